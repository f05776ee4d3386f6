//! Task heads: intent classification, the intent-gated fusion of syntactic
//! and raw features, BIO tagging, and span typing, plus their losses.
//!
//! All losses here are per-sample sums; batch averaging happens in the
//! trainer.

use ndarray::Array2;

use crate::corpus::{Bio, IntentLabel};
use crate::error::{Error, Result};
use crate::labelsem::{AttentionModule, LabelTable};
use crate::params::{rng_for, xavier, ParamId, ParamStore};
use crate::tape::{Tape, Var};

fn affine(store: &mut ParamStore, prefix: &str, rows: usize, cols: usize, seed: u64) -> (ParamId, ParamId) {
    let wn = format!("{prefix}.w");
    let w = store.add_trainable(&wn, xavier(rows, cols, &mut rng_for(seed, &wn)));
    let b = store.add_trainable(&format!("{prefix}.b"), Array2::zeros((1, rows)));
    (w, b)
}

fn expect_shape(tape: &Tape, v: Var, shape: (usize, usize), what: &str) -> Result<()> {
    if tape.shape(v) != shape {
        return Err(Error::dims(format!(
            "{what}: got {:?}, expected {:?}",
            tape.shape(v),
            shape
        )));
    }
    Ok(())
}

/// `softmax(W_I [h_intent ‖ g_0] + b_I)`.
#[derive(Debug, Clone, Copy)]
pub struct IntentHead {
    pub w: ParamId,
    pub b: ParamId,
    n_intents: usize,
    d: usize,
    d_g: usize,
}

impl IntentHead {
    pub fn new(store: &mut ParamStore, n_intents: usize, d: usize, d_g: usize, seed: u64) -> Self {
        let (w, b) = affine(store, "intent_head", n_intents, d + d_g, seed);
        Self { w, b, n_intents, d, d_g }
    }

    pub fn n_intents(&self) -> usize {
        self.n_intents
    }

    pub fn forward(&self, tape: &mut Tape, h_intent: Var, g0: Var) -> Result<Var> {
        expect_shape(tape, h_intent, (1, self.d), "intent context")?;
        expect_shape(tape, g0, (1, self.d_g), "intent query")?;
        let x = tape.concat_cols(&[h_intent, g0]);
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let logits = tape.linear(x, w, b);
        Ok(tape.softmax_rows(logits))
    }
}

/// Label attention over the intent table followed by the intent head.
/// Returns `(probs 1 × |I|, h_intent 1 × d)`.
pub fn intent_forward(
    tape: &mut Tape,
    g0: Var,
    table: &LabelTable,
    attn: &AttentionModule,
    head: &IntentHead,
) -> Result<(Var, Var)> {
    let (h_intent, _) = attn.forward(tape, g0, table)?;
    let probs = head.forward(tape, h_intent, g0)?;
    Ok((probs, h_intent))
}

/// `−ln p[gold]` for a `1 × |I|` distribution.
pub fn intent_loss(tape: &mut Tape, probs: Var, gold: IntentLabel) -> Var {
    tape.nll(probs, &[gold.0])
}

/// `σ(W_g [H^I ‖ G] + b_g)`, with the intent context repeated on every row.
#[derive(Debug, Clone, Copy)]
pub struct GateModule {
    pub w: ParamId,
    pub b: ParamId,
    d: usize,
    d_g: usize,
}

impl GateModule {
    pub fn new(store: &mut ParamStore, d: usize, d_g: usize, seed: u64) -> Self {
        let (w, b) = affine(store, "gate", d_g, d + d_g, seed);
        Self { w, b, d, d_g }
    }

    /// Returns `(fused n × (d_g + d), gate n × d_g)` where fused row `i`
    /// is `[gate_i ⊙ g_i ‖ h_i]`.
    pub fn fuse(&self, tape: &mut Tape, h_intent: Var, g: Var, h: Var) -> Result<(Var, Var)> {
        let n = tape.shape(g).0;
        expect_shape(tape, h_intent, (1, self.d), "gate intent context")?;
        expect_shape(tape, g, (n, self.d_g), "gate syntactic features")?;
        expect_shape(tape, h, (n, self.d), "gate raw features")?;
        let hi = tape.broadcast_rows(h_intent, n);
        let x = tape.concat_cols(&[hi, g]);
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let pre = tape.linear(x, w, b);
        let gate = tape.sigmoid(pre);
        let gated = tape.mul(gate, g);
        Ok((tape.concat_cols(&[gated, h]), gate))
    }
}

/// Per-row distribution over `(O, B, I)`.
#[derive(Debug, Clone, Copy)]
pub struct BioTagger {
    pub w: ParamId,
    pub b: ParamId,
    width: usize,
}

impl BioTagger {
    pub fn new(store: &mut ParamStore, d: usize, d_g: usize, seed: u64) -> Self {
        let (w, b) = affine(store, "bio_tagger", Bio::ALL.len(), d_g + d, seed);
        Self { w, b, width: d_g + d }
    }

    pub fn forward(&self, tape: &mut Tape, fused: Var) -> Result<Var> {
        let n = tape.shape(fused).0;
        expect_shape(tape, fused, (n, self.width), "fused features")?;
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let logits = tape.linear(fused, w, b);
        Ok(tape.softmax_rows(logits))
    }
}

/// Summed `−ln p(gold)` over word rows `1..=N_w`; placeholder rows are skipped.
pub fn bio_loss(tape: &mut Tape, probs: Var, gold: &[Bio]) -> Result<Var> {
    let n = tape.shape(probs).0;
    if n != gold.len() + 2 {
        return Err(Error::dims(format!(
            "{n} tagger rows for {} gold tags",
            gold.len()
        )));
    }
    let words = tape.rows(probs, 1, n - 1);
    let targets: Vec<usize> = gold.iter().map(|t| t.index()).collect();
    Ok(tape.nll(words, &targets))
}

/// `Σ_{i=l}^{r} h_i` over raw encoder rows (row index = 1-based word index).
pub fn span_repr(tape: &mut Tape, h: Var, start: usize, end: usize) -> Result<Var> {
    let n_words = tape.shape(h).0.saturating_sub(2);
    if start == 0 || start > end || end > n_words {
        return Err(Error::OutOfRange);
    }
    Ok(tape.sum_rows(h, start, end + 1))
}

/// `softmax(W_o2 x + b_o2)` over slot types.
#[derive(Debug, Clone, Copy)]
pub struct SpanTyper {
    pub w: ParamId,
    pub b: ParamId,
    d: usize,
}

impl SpanTyper {
    pub fn new(store: &mut ParamStore, n_types: usize, d: usize, seed: u64) -> Self {
        let (w, b) = affine(store, "span_typer", n_types, d, seed);
        Self { w, b, d }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        expect_shape(tape, x, (1, self.d), "span feature")?;
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let logits = tape.linear(x, w, b);
        Ok(tape.softmax_rows(logits))
    }
}

/// Types one span representation. With `labels`, the span attends over the
/// slot label table first; without, the typer reads `r` directly.
pub fn slot_type_forward(
    tape: &mut Tape,
    r: Var,
    labels: Option<(&LabelTable, &AttentionModule)>,
    typer: &SpanTyper,
) -> Result<Var> {
    let x = match labels {
        Some((table, attn)) => attn.forward(tape, r, table)?.0,
        None => r,
    };
    typer.forward(tape, x)
}

/// Summed `−ln p(gold type)` over entities; zero when there are none.
pub fn slot_type_loss(tape: &mut Tape, dists: &[Var], gold: &[usize]) -> Result<Var> {
    if dists.len() != gold.len() {
        return Err(Error::dims(format!(
            "{} type distributions for {} gold entities",
            dists.len(),
            gold.len()
        )));
    }
    let mut total = tape.constant(Array2::zeros((1, 1)));
    for (&d, &g) in dists.iter().zip(gold) {
        let l = tape.nll(d, &[g]);
        total = tape.add(total, l);
    }
    Ok(total)
}
