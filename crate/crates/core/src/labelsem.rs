//! Label embedding tables and the label attention shared by the intent and
//! span-typing heads.
//!
//! Each label row is the sum of a frozen description embedding (pooled
//! encoder features of the label's description) and a trainable global
//! embedding. Attention scores a query against every row and returns the
//! softmax-weighted sum of rows. Two scoring functions are available:
//!
//! ```text
//! Linear:    s_i = w · [e_i ‖ q] + b
//! Additive:  s_i = w · tanh(W_h [e_i ‖ q] + b_h) + b
//! ```
//!
//! Under `Linear` the query contributes the same `w_q · q` to every score,
//! so the softmax cancels it and the weights do not depend on the query.
//! `Additive` mixes label and query through the hidden layer.

use ndarray::{Array1, Array2};

use crate::corpus::LabelVocab;
use crate::encoder::{Encoder, WordVocab};
use crate::error::{Error, Result};
use crate::params::{rng_for, uniform, xavier, ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};

pub const GLOBAL_INIT_BOUND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GlobalInit {
    Uniform(f64),
    Zeros,
}

impl Default for GlobalInit {
    fn default() -> Self {
        GlobalInit::Uniform(GLOBAL_INIT_BOUND)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabelTable {
    pub desc: ParamId,
    pub global: ParamId,
    n_labels: usize,
    dim: usize,
}

impl LabelTable {
    /// Registers `desc` (frozen) and a fresh global part under `prefix`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        desc: Array2<f64>,
        init: GlobalInit,
        seed: u64,
    ) -> Self {
        let (n_labels, dim) = desc.dim();
        let global_name = format!("{prefix}.global");
        let global = match init {
            GlobalInit::Uniform(bound) => {
                uniform(n_labels, dim, bound, &mut rng_for(seed, &global_name))
            }
            GlobalInit::Zeros => Array2::zeros((n_labels, dim)),
        };
        Self {
            desc: store.add_frozen(&format!("{prefix}.desc"), desc),
            global: store.add_trainable(&global_name, global),
            n_labels,
            dim,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn combined(&self, tape: &mut Tape) -> Var {
        let desc = tape.param(self.desc);
        let global = tape.param(self.global);
        tape.add(desc, global)
    }

    pub fn combined_value(&self, store: &ParamStore) -> Array2<f64> {
        store.get(self.desc) + store.get(self.global)
    }
}

/// Description embeddings for `names`, stacked as rows.
pub fn description_matrix(
    names: &[String],
    vocab: &LabelVocab,
    encoder: &Encoder,
    words: &WordVocab,
    store: &ParamStore,
) -> Result<Array2<f64>> {
    let d = encoder.config().d;
    let mut out = Array2::zeros((names.len(), d));
    for (i, name) in names.iter().enumerate() {
        let row = encoder.embed_description(store, words, &vocab.description(name))?;
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

/// Builds a table whose description part is computed now, with the
/// encoder's current parameters, and never updated afterwards.
#[allow(clippy::too_many_arguments)]
pub fn build_table(
    store: &mut ParamStore,
    prefix: &str,
    names: &[String],
    vocab: &LabelVocab,
    encoder: &Encoder,
    words: &WordVocab,
    init: GlobalInit,
    seed: u64,
) -> Result<LabelTable> {
    let desc = description_matrix(names, vocab, encoder, words, store)?;
    Ok(LabelTable::new(store, prefix, desc, init, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelScore {
    Linear,
    /// Hidden layer of the given width.
    Additive(usize),
}

impl LabelScore {
    /// `linear` or `additive:<width>`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "linear" => Some(LabelScore::Linear),
            other => other
                .strip_prefix("additive:")
                .and_then(|w| w.parse().ok())
                .filter(|&w| w > 0)
                .map(LabelScore::Additive),
        }
    }
}

impl std::fmt::Display for LabelScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelScore::Linear => write!(f, "linear"),
            LabelScore::Additive(w) => write!(f, "additive:{w}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Hidden {
    /// `width × (d_label + d_query)`
    pub w: ParamId,
    /// `1 × width`
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionModule {
    /// `1 × (d_label + d_query)` for linear scores, `1 × width` for additive.
    pub w: ParamId,
    /// `1 × 1`
    pub b: ParamId,
    pub hidden: Option<Hidden>,
    d_label: usize,
    d_query: usize,
}

impl AttentionModule {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_label: usize,
        d_query: usize,
        score: LabelScore,
        seed: u64,
    ) -> Self {
        let hidden = match score {
            LabelScore::Linear => None,
            LabelScore::Additive(width) => {
                let hn = format!("{prefix}.hidden.w");
                let init = xavier(width, d_label + d_query, &mut rng_for(seed, &hn));
                Some(Hidden {
                    w: store.add_trainable(&hn, init),
                    b: store.add_trainable(&format!("{prefix}.hidden.b"), Array2::zeros((1, width))),
                })
            }
        };
        let width = match score {
            LabelScore::Linear => d_label + d_query,
            LabelScore::Additive(width) => width,
        };
        let wn = format!("{prefix}.w");
        Self {
            w: store.add_trainable(&wn, xavier(1, width, &mut rng_for(seed, &wn))),
            b: store.add_trainable(&format!("{prefix}.b"), Array2::zeros((1, 1))),
            hidden,
            d_label,
            d_query,
        }
    }

    pub fn score(&self, store: &ParamStore) -> LabelScore {
        match self.hidden {
            None => LabelScore::Linear,
            Some(h) => LabelScore::Additive(store.get(h.b).ncols()),
        }
    }

    /// Unnormalized scores, `1 × n_labels`.
    fn scores(&self, tape: &mut Tape, query: Var, e: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        match self.hidden {
            None => {
                let w_label = tape.slice_cols(w, 0, self.d_label);
                let w_query = tape.slice_cols(w, self.d_label, self.d_label + self.d_query);
                let label_scores = tape.matmul_nt(w_label, e);
                let query_score = tape.matmul_nt(query, w_query);
                let shift = tape.add(query_score, b);
                tape.add_scalar(label_scores, shift)
            }
            Some(hidden) => {
                let wh = tape.param(hidden.w);
                let bh = tape.param(hidden.b);
                let wh_label = tape.slice_cols(wh, 0, self.d_label);
                let wh_query = tape.slice_cols(wh, self.d_label, self.d_label + self.d_query);
                let from_labels = tape.matmul_nt(e, wh_label);
                let from_query = tape.linear(query, wh_query, bh);
                let pre = tape.add_row(from_labels, from_query);
                let act = tape.tanh(pre);
                let scores = tape.matmul_nt(w, act);
                tape.add_scalar(scores, b)
            }
        }
    }

    /// Returns `(context 1 × d_label, weights 1 × n_labels)`.
    pub fn forward(&self, tape: &mut Tape, query: Var, table: &LabelTable) -> Result<(Var, Var)> {
        if tape.shape(query) != (1, self.d_query) {
            return Err(Error::dims(format!(
                "attention query {:?}, expected (1, {})",
                tape.shape(query),
                self.d_query
            )));
        }
        if table.dim() != self.d_label {
            return Err(Error::dims(format!(
                "label width {} for attention over width {}",
                table.dim(),
                self.d_label
            )));
        }
        let e = table.combined(tape);
        let scores = self.scores(tape, query, e);
        let weights = tape.softmax_rows(scores);
        let context = tape.matmul(weights, e);
        Ok((context, weights))
    }
}

/// Value-level label attention: `(context, weights)`.
pub fn label_attention(
    store: &ParamStore,
    query: &Array1<f64>,
    table: &LabelTable,
    attn: &AttentionModule,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let mut tape = Tape::new(store, Mode::Eval);
    let q = tape.constant(query.clone().insert_axis(ndarray::Axis(0)));
    let (ctx, w) = attn.forward(&mut tape, q, table)?;
    Ok((tape.value(ctx).row(0).to_owned(), tape.value(w).row(0).to_owned()))
}
