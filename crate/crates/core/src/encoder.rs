//! Word-level reference encoder producing contextual token features.
//!
//! Tokens are wrapped as `[CLS] w_1 … w_n [SEP]` and mapped through learned
//! word embeddings plus fixed sinusoidal positions, followed by `n_layers`
//! pre-norm transformer blocks (multi-head self-attention and a GELU
//! feed-forward, each with a residual connection). With `n_layers = 0` the
//! output is exactly embedding + position.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::params::{rng_for, uniform, xavier, ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const LN_EPS: f64 = 1e-5;

/// Word inventory with the three reserved entries at ids 0, 1 and 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for WordVocab {
    fn default() -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [UNK, CLS, SEP] {
            v.add(w);
        }
        v
    }
}

impl WordVocab {
    pub const UNK_ID: usize = 0;
    pub const CLS_ID: usize = 1;
    pub const SEP_ID: usize = 2;

    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a vocabulary from its full word list, reserved entries included.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[0] != UNK || words[1] != CLS || words[2] != SEP {
            return Err(Error::InvalidVocab("word list must start with [UNK] [CLS] [SEP]".into()));
        }
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            if v.index.contains_key(&w) {
                return Err(Error::InvalidVocab(format!("duplicate word `{w}`")));
            }
            v.add(&w);
        }
        Ok(v)
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), self.words.len() - 1);
        self.words.len() - 1
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// `[CLS] tokens… [SEP]` as ids.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(Self::CLS_ID);
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        ids.push(Self::SEP_ID);
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("vocab_size", self.vocab_size),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "encoder d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("encoder dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Row features for `[CLS] w_1 … w_n [SEP]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures(pub Array2<f64>);

impl TokenFeatures {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    embedding: ParamId,
    blocks: Vec<Block>,
    positions: Array2<f64>,
}

pub fn sinusoidal_positions(max_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, f, seed) = (config.d, config.ffn_dim, config.seed);
        let embedding = store.add_trainable(
            "encoder.embedding",
            uniform(config.vocab_size, d, 1.0, &mut rng_for(seed, "encoder.embedding")),
        );
        let weight = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
            let init = xavier(rows, cols, &mut rng_for(seed, &name));
            store.add_trainable(&name, init)
        };
        let fill = |store: &mut ParamStore, name: String, cols: usize, v: f64| {
            store.add_trainable(&name, Array2::from_elem((1, cols), v))
        };

        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("encoder.layer{l}.{s}");
            blocks.push(Block {
                ln1_g: fill(store, p("ln1.gain"), d, 1.0),
                ln1_b: fill(store, p("ln1.bias"), d, 0.0),
                wq: weight(store, p("wq"), d, d),
                bq: fill(store, p("bq"), d, 0.0),
                wk: weight(store, p("wk"), d, d),
                bk: fill(store, p("bk"), d, 0.0),
                wv: weight(store, p("wv"), d, d),
                bv: fill(store, p("bv"), d, 0.0),
                wo: weight(store, p("wo"), d, d),
                bo: fill(store, p("bo"), d, 0.0),
                ln2_g: fill(store, p("ln2.gain"), d, 1.0),
                ln2_b: fill(store, p("ln2.bias"), d, 0.0),
                w1: weight(store, p("ffn.w1"), f, d),
                b1: fill(store, p("ffn.b1"), f, 0.0),
                w2: weight(store, p("ffn.w2"), d, f),
                b2: fill(store, p("ffn.b2"), d, 0.0),
            });
        }
        let positions = sinusoidal_positions(config.max_len, d);
        Ok(Self {
            config,
            embedding,
            blocks,
            positions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    /// Features for a full id sequence (placeholders included).
    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let n = ids.len();
        if n > self.config.max_len {
            return Err(Error::TooLong {
                len: n,
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::dims(format!(
                "word id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = tape.param(self.embedding);
        let emb = tape.gather(table, ids);
        let pos = tape.constant(self.positions.slice(ndarray::s![..n, ..]).to_owned());
        let mut x = tape.add(emb, pos);
        x = tape.dropout(x, self.config.dropout);
        for block in &self.blocks {
            x = self.block(tape, block, x);
        }
        Ok(x)
    }

    fn layer_norm(tape: &mut Tape, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let n = tape.normalize_rows(x, LN_EPS);
        let g = tape.param(gain);
        let b = tape.param(bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }

    fn block(&self, tape: &mut Tape, p: &Block, x: Var) -> Var {
        let d = self.config.d;
        let heads = self.config.n_heads;
        let dh = d / heads;

        let xn = Self::layer_norm(tape, x, p.ln1_g, p.ln1_b);
        let proj = |tape: &mut Tape, w: ParamId, b: ParamId| {
            let w = tape.param(w);
            let b = tape.param(b);
            tape.linear(xn, w, b)
        };
        let q = proj(tape, p.wq, p.bq);
        let k = proj(tape, p.wk, p.bk);
        let v = proj(tape, p.wv, p.bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let att = tape.softmax_rows(scores);
            let att = tape.dropout(att, self.config.dropout);
            contexts.push(tape.matmul(att, vh));
        }
        let ctx = tape.concat_cols(&contexts);
        let wo = tape.param(p.wo);
        let bo = tape.param(p.bo);
        let attn_out = tape.linear(ctx, wo, bo);
        let attn_out = tape.dropout(attn_out, self.config.dropout);
        let x = tape.add(x, attn_out);

        let xn = Self::layer_norm(tape, x, p.ln2_g, p.ln2_b);
        let w1 = tape.param(p.w1);
        let b1 = tape.param(p.b1);
        let hidden = tape.linear(xn, w1, b1);
        let hidden = tape.gelu(hidden);
        let w2 = tape.param(p.w2);
        let b2 = tape.param(p.b2);
        let ffn_out = tape.linear(hidden, w2, b2);
        let ffn_out = tape.dropout(ffn_out, self.config.dropout);
        tape.add(x, ffn_out)
    }

    /// Value-level encoding of a tokenized utterance.
    pub fn encode<S: AsRef<str>>(
        &self,
        store: &ParamStore,
        vocab: &WordVocab,
        tokens: &[S],
        mode: Mode,
        seed: u64,
    ) -> Result<TokenFeatures> {
        let mut tape = Tape::with_seed(store, mode, seed);
        let h = self.forward(&mut tape, &vocab.encode(tokens))?;
        Ok(TokenFeatures(tape.value(h).clone()))
    }

    /// Mean of the eval-mode word rows of `description`.
    pub fn embed_description(
        &self,
        store: &ParamStore,
        vocab: &WordVocab,
        description: &str,
    ) -> Result<Array1<f64>> {
        let tokens: Vec<&str> = description.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::EmptyDescription);
        }
        let h = self.encode(store, vocab, &tokens, Mode::Eval, 0)?;
        let words = h.0.slice(ndarray::s![1..=tokens.len(), ..]);
        Ok(words.mean_axis(Axis(0)).expect("non-empty description"))
    }
}
