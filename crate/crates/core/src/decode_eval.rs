//! Greedy BIO decoding and the three evaluation metrics: entity-level F1,
//! intent accuracy, and sentence-level semantic accuracy.
//!
//! Metric functions take aligned per-sentence lists and panic if the lengths
//! differ.

use std::collections::HashSet;

use ndarray::Array2;

use crate::corpus::{Bio, Span};

/// Per-row argmax; ties go to the earlier class in `O < B < I`.
pub fn argmax_tags(dists: &Array2<f64>) -> Vec<Bio> {
    dists
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            Bio::from_index(best).expect("three-way distribution")
        })
        .collect()
}

/// Maximal `B I*` runs as 1-based inclusive `(start, end)`. An `I` with no
/// open span starts one, as if it were `B`.
pub fn decode_tags(tags: &[Bio]) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut open = false;
    for (i, &tag) in tags.iter().enumerate() {
        let pos = i + 1;
        match tag {
            Bio::O => open = false,
            Bio::I if open => spans.last_mut().expect("open span").1 = pos,
            Bio::B | Bio::I => {
                spans.push((pos, pos));
                open = true;
            }
        }
    }
    spans
}

/// Decodes word-row distributions (placeholders already removed).
pub fn decode_bio(dists: &Array2<f64>) -> Vec<(usize, usize)> {
    decode_tags(&argmax_tags(dists))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub intent: usize,
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged exact-match F1 over typed spans.
pub fn entity_f1(preds: &[Vec<Span>], golds: &[Vec<Span>]) -> EntityScore {
    assert_eq!(preds.len(), golds.len(), "entity_f1: unaligned sentence lists");
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let gold: HashSet<&Span> = g.iter().collect();
        let pred: HashSet<&Span> = p.iter().collect();
        tp += pred.intersection(&gold).count();
        n_pred += pred.len();
        n_gold += gold.len();
    }
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    EntityScore {
        precision,
        recall,
        f1,
        tp,
        fp: n_pred - tp,
        fn_: n_gold - tp,
    }
}

pub fn intent_accuracy(preds: &[usize], golds: &[usize]) -> f64 {
    assert_eq!(preds.len(), golds.len(), "intent_accuracy: unaligned lists");
    ratio(preds.iter().zip(golds).filter(|(p, g)| p == g).count(), golds.len())
}

fn same_spans(a: &[Span], b: &[Span]) -> bool {
    a.iter().collect::<HashSet<_>>() == b.iter().collect::<HashSet<_>>()
}

/// Fraction of sentences whose typed span set is exactly right.
pub fn slot_exact_match(preds: &[Prediction], golds: &[Prediction]) -> f64 {
    assert_eq!(preds.len(), golds.len(), "slot_exact_match: unaligned lists");
    ratio(
        preds.iter().zip(golds).filter(|(p, g)| same_spans(&p.spans, &g.spans)).count(),
        golds.len(),
    )
}

/// Fraction of sentences with the intent and every typed span right.
pub fn semantic_accuracy(preds: &[Prediction], golds: &[Prediction]) -> f64 {
    assert_eq!(preds.len(), golds.len(), "semantic_accuracy: unaligned lists");
    ratio(
        preds
            .iter()
            .zip(golds)
            .filter(|(p, g)| p.intent == g.intent && same_spans(&p.spans, &g.spans))
            .count(),
        golds.len(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub slot_f1: f64,
    pub intent_acc: f64,
    pub semantic_acc: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub n_sentences: usize,
}

impl MetricsReport {
    pub fn evaluate(preds: &[Prediction], golds: &[Prediction]) -> Self {
        let pred_spans: Vec<Vec<Span>> = preds.iter().map(|p| p.spans.clone()).collect();
        let gold_spans: Vec<Vec<Span>> = golds.iter().map(|g| g.spans.clone()).collect();
        let entity = entity_f1(&pred_spans, &gold_spans);
        let pi: Vec<usize> = preds.iter().map(|p| p.intent).collect();
        let gi: Vec<usize> = golds.iter().map(|g| g.intent).collect();
        Self {
            slot_f1: entity.f1,
            intent_acc: intent_accuracy(&pi, &gi),
            semantic_acc: semantic_accuracy(preds, golds),
            tp: entity.tp,
            fp: entity.fp,
            fn_: entity.fn_,
            n_sentences: golds.len(),
        }
    }

    /// Flat JSON object with keys `slot_f1`, `intent_acc`, `semantic_acc`,
    /// `tp`, `fp`, `fn`.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"slot_f1\":{},\"intent_acc\":{},\"semantic_acc\":{},\"tp\":{},\"fp\":{},\"fn\":{}}}",
            self.slot_f1, self.intent_acc, self.semantic_acc, self.tp, self.fp, self.fn_
        )
    }
}
