//! Central finite-difference checks of the tape's analytic gradients, one
//! group per model component plus the end-to-end joint loss.
//!
//! Each group builds a scalar function of a small randomly initialized
//! parameter set, takes analytic gradients from one backward pass, and
//! compares them entry by entry against `(f(θ + h) − f(θ − h)) / 2h`.

use ndarray::Array2;
use rand::Rng;

use crate::corpus::{Bio, IntentLabel, LabelVocab, Span};
use crate::depgraph::{build_adjacency, DepParse};
use crate::encoder::{Encoder, EncoderConfig, WordVocab};
use crate::error::{Error, Result};
use crate::gat::{Gat, GatConfig};
use crate::heads::{
    bio_loss, intent_forward, intent_loss, slot_type_forward, slot_type_loss, span_repr, BioTagger,
    GateModule, IntentHead, SpanTyper,
};
use crate::labelsem::{AttentionModule, GlobalInit, LabelScore, LabelTable};
use crate::model::{Example, Model, ModelConfig};
use crate::params::{rng_for, uniform, ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};
use crate::trainer::batch_losses;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so gradients that are zero on
/// both sides compare as equal.
pub const REL_FLOOR: f64 = 1e-5;

pub const GROUPS: [&str; 8] = [
    "encoder",
    "gat",
    "label_attention",
    "intent_head",
    "gate_fusion",
    "bio_tagger",
    "span_typer",
    "joint",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Width used for every feature dimension; at most 8 and even.
    pub dim: usize,
    pub step: f64,
    pub tol: f64,
    /// Cap on entries checked per module group.
    pub max_entries: usize,
    /// Entries sampled for the joint group.
    pub joint_entries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 8,
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            max_entries: 400,
            joint_entries: 20,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim > 8 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("gradcheck dim {} must be even and in 2..=8", self.dim)));
        }
        if !(self.step > 0.0) || !(self.tol > 0.0) {
            return Err(Error::Config("gradcheck step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Paired analytic and numeric values for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSamples {
    pub name: String,
    /// `tensor[row, col]` per entry.
    pub labels: Vec<String>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_at: String,
    pub passed: bool,
}

pub fn compare(samples: &GroupSamples, tol: f64) -> GroupResult {
    let mut worst = (0.0, String::new());
    for ((a, n), label) in samples.analytic.iter().zip(&samples.numeric).zip(&samples.labels) {
        let e = relative_error(*a, *n);
        // NaN compares false; record it explicitly.
        if e > worst.0 || e.is_nan() {
            worst = (e, label.clone());
        }
    }
    GroupResult {
        name: samples.name.clone(),
        checked: samples.analytic.len(),
        worst_rel_err: worst.0,
        worst_at: worst.1,
        passed: !worst.0.is_nan() && worst.0 < tol && !samples.analytic.is_empty(),
    }
}

enum Targets {
    /// Every entry of every listed tensor, subsampled down to the cap.
    All(Vec<ParamId>),
    /// `n` entries: a random trainable tensor, then a random entry in it.
    Sample(usize),
}

fn collect<F>(
    name: &str,
    store: &mut ParamStore,
    mode: Mode,
    targets: Targets,
    build: F,
    config: &GradCheckConfig,
) -> Result<GroupSamples>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let dropout_seed = config.seed ^ 0x5eed;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_seed(store, mode, dropout_seed);
        let out = build(&mut tape)?;
        Ok(tape.scalar(out))
    };
    let grads = {
        let mut tape = Tape::with_seed(store, mode, dropout_seed);
        let out = build(&mut tape)?;
        tape.backward(out)
    };

    let mut rng = rng_for(config.seed, &format!("gradcheck.{name}"));
    let entries: Vec<(ParamId, (usize, usize))> = match targets {
        Targets::All(ids) => {
            let mut all: Vec<_> = ids
                .iter()
                .flat_map(|&id| {
                    let (r, c) = store.get(id).dim();
                    (0..r).flat_map(move |i| (0..c).map(move |j| (id, (i, j))))
                })
                .collect();
            while all.len() > config.max_entries {
                all.swap_remove(rng.gen_range(0..all.len()));
            }
            all
        }
        Targets::Sample(n) => {
            let ids: Vec<ParamId> = store.trainable_ids().collect();
            (0..n)
                .map(|_| {
                    let id = ids[rng.gen_range(0..ids.len())];
                    let (r, c) = store.get(id).dim();
                    (id, (rng.gen_range(0..r), rng.gen_range(0..c)))
                })
                .collect()
        }
    };

    let h = config.step;
    let mut samples = GroupSamples {
        name: name.to_string(),
        labels: Vec::with_capacity(entries.len()),
        analytic: Vec::with_capacity(entries.len()),
        numeric: Vec::with_capacity(entries.len()),
    };
    for (id, idx) in entries {
        let original = store.get(id)[idx];
        store.get_mut(id)[idx] = original + h;
        let plus = eval(store)?;
        store.get_mut(id)[idx] = original - h;
        let minus = eval(store)?;
        store.get_mut(id)[idx] = original;
        samples.labels.push(format!("{}[{}, {}]", store.name(id), idx.0, idx.1));
        samples.analytic.push(grads.entry(id, idx));
        samples.numeric.push((plus - minus) / (2.0 * h));
    }
    Ok(samples)
}

fn random(rows: usize, cols: usize, seed: u64, name: &str) -> Array2<f64> {
    uniform(rows, cols, 1.0, &mut rng_for(seed, name))
}

/// `sum(x ⊙ R)` for a fixed random `R`, so every output entry matters.
fn project(tape: &mut Tape, x: Var, seed: u64, name: &str) -> Var {
    let (r, c) = tape.shape(x);
    let weighted = tape.mul_const(x, random(r, c, seed, name));
    tape.sum(weighted)
}

/// Four words, heads `2 0 2 3`.
fn small_parse() -> DepParse {
    DepParse::new(vec![2, 0, 2, 3], 1).expect("valid tree")
}

fn group_samples(name: &str, config: &GradCheckConfig) -> Result<GroupSamples> {
    let (d, seed) = (config.dim, config.seed);
    let n = small_parse().len() + 2;
    let mut store = ParamStore::new();
    match name {
        "encoder" => {
            let enc = Encoder::new(
                EncoderConfig {
                    d,
                    vocab_size: 9,
                    n_layers: 2,
                    n_heads: 2,
                    ffn_dim: d,
                    max_len: 8,
                    dropout: 0.0,
                    seed,
                },
                &mut store,
            )?;
            let ids = [1, 3, 7, 4, 3, 2];
            let all = store.trainable_ids().collect();
            collect(name, &mut store, Mode::Eval, Targets::All(all), |t| {
                let h = enc.forward(t, &ids)?;
                Ok(project(t, h, seed, "r.encoder"))
            }, config)
        }
        "gat" => {
            let gat = Gat::new(
                GatConfig {
                    k_heads: 2,
                    d_in: d,
                    d_out_total: d,
                    dropout_rate: 0.3,
                    layers: 2,
                    seed,
                },
                &mut store,
            )?;
            let x = random(n, d, seed, "x.gat");
            let adj = build_adjacency(&small_parse());
            let all = store.trainable_ids().collect();
            collect(name, &mut store, Mode::Train, Targets::All(all), |t| {
                let h = t.constant(x.clone());
                let g = gat.forward(t, h, &adj)?;
                Ok(project(t, g, seed, "r.gat"))
            }, config)
        }
        "label_attention" => {
            let table = LabelTable::new(&mut store, "labels", random(4, d, seed, "desc"), GlobalInit::default(), seed);
            let additive = AttentionModule::new(&mut store, "attn", d, d, LabelScore::Additive(d), seed);
            let linear = AttentionModule::new(&mut store, "linear_attn", d, d, LabelScore::Linear, seed);
            let query = store.add_trainable("query", random(1, d, seed, "query"));
            let all = store.trainable_ids().collect();
            collect(name, &mut store, Mode::Eval, Targets::All(all), |t| {
                let q = t.param(query);
                let (ctx, _) = additive.forward(t, q, &table)?;
                let a = project(t, ctx, seed, "r.attn");
                let (ctx, _) = linear.forward(t, q, &table)?;
                let b = project(t, ctx, seed, "r.linear_attn");
                Ok(t.add(a, b))
            }, config)
        }
        "intent_head" => {
            let table = LabelTable::new(&mut store, "labels", random(3, d, seed, "desc"), GlobalInit::default(), seed);
            let attn = AttentionModule::new(&mut store, "attn", d, d, LabelScore::Additive(d), seed);
            let head = IntentHead::new(&mut store, 3, d, d, seed);
            let g0 = store.add_trainable("g0", random(1, d, seed, "g0"));
            let all = store.trainable_ids().collect();
            collect(name, &mut store, Mode::Eval, Targets::All(all), |t| {
                let g = t.param(g0);
                let (probs, _) = intent_forward(t, g, &table, &attn, &head)?;
                Ok(intent_loss(t, probs, IntentLabel(1)))
            }, config)
        }
        "gate_fusion" => {
            let gate = GateModule::new(&mut store, d, d, seed);
            let hi = store.add_trainable("h_intent", random(1, d, seed, "hi"));
            let g = store.add_trainable("g", random(n, d, seed, "g"));
            let h = store.add_trainable("h", random(n, d, seed, "h"));
            let all = store.trainable_ids().collect();
            collect(name, &mut store, Mode::Eval, Targets::All(all), |t| {
                let (hi, g, h) = (t.param(hi), t.param(g), t.param(h));
                let (fused, _) = gate.fuse(t, hi, g, h)?;
                Ok(project(t, fused, seed, "r.gate"))
            }, config)
        }
        "bio_tagger" => {
            let tagger = BioTagger::new(&mut store, d, d, seed);
            let fused = store.add_trainable("fused", random(n, 2 * d, seed, "fused"));
            let gold = [Bio::B, Bio::I, Bio::O, Bio::B];
            let all = store.trainable_ids().collect();
            collect(name, &mut store, Mode::Eval, Targets::All(all), |t| {
                let f = t.param(fused);
                let probs = tagger.forward(t, f)?;
                bio_loss(t, probs, &gold)
            }, config)
        }
        "span_typer" => {
            let table = LabelTable::new(&mut store, "labels", random(4, d, seed, "desc"), GlobalInit::default(), seed);
            let attn = AttentionModule::new(&mut store, "attn", d, d, LabelScore::Additive(d), seed);
            let typer = SpanTyper::new(&mut store, 4, d, seed);
            let h = store.add_trainable("h", random(n, d, seed, "h"));
            let all = store.trainable_ids().collect();
            collect(name, &mut store, Mode::Eval, Targets::All(all), |t| {
                let hv = t.param(h);
                let mut dists = Vec::new();
                for (l, r) in [(1, 2), (4, 4)] {
                    let rep = span_repr(t, hv, l, r)?;
                    dists.push(slot_type_forward(t, rep, Some((&table, &attn)), &typer)?);
                }
                slot_type_loss(t, &dists, &[2, 0])
            }, config)
        }
        "joint" => joint_samples(config),
        other => Err(Error::Config(format!("unknown gradcheck group `{other}`"))),
    }
}

fn joint_samples(config: &GradCheckConfig) -> Result<GroupSamples> {
    let d = config.dim;
    let labels = LabelVocab::new(
        vec!["book_flight".into(), "get_weather".into()],
        vec!["city".into(), "date".into(), "airline".into()],
    )?;
    let mut words = WordVocab::new();
    for w in ["book", "flight", "to", "boston", "weather", "in", "city", "date", "airline", "get"] {
        words.add(w);
    }
    let model_config = ModelConfig {
        d,
        encoder_layers: 1,
        encoder_heads: 2,
        ffn_dim: d,
        max_len: 8,
        encoder_dropout: 0.1,
        d_g: d,
        gat_heads: 2,
        gat_layers: 1,
        gat_dropout: 0.3,
        label_score: LabelScore::Additive(d),
        seed: config.seed,
        ..ModelConfig::default()
    };
    let mut model = Model::new(model_config, labels, words)?;
    let first = {
        let tokens = ["book", "flight", "to", "boston"];
        let (ids, adj) = model.prepare_tokens(&tokens, &small_parse())?;
        Example {
            ids,
            adj,
            bio: vec![Bio::B, Bio::O, Bio::B, Bio::I],
            spans: vec![Span::new(1, 1, 2), Span::new(3, 4, 0)],
            intent: IntentLabel(0),
        }
    };
    let second = {
        let tokens = ["weather", "in", "boston"];
        let parse = DepParse::new(vec![0, 1, 2], 1)?;
        let (ids, adj) = model.prepare_tokens(&tokens, &parse)?;
        Example {
            ids,
            adj,
            bio: vec![Bio::O, Bio::O, Bio::B],
            spans: vec![Span::new(3, 3, 0)],
            intent: IntentLabel(1),
        }
    };
    // Split borrow: the closure reads the model's modules while `collect`
    // mutates the store it owns.
    let mut store = std::mem::take(&mut model.store);
    let view = model.clone();
    let batch = [&first, &second];
    let samples = collect(
        "joint",
        &mut store,
        Mode::Train,
        Targets::Sample(config.joint_entries),
        |t| Ok(batch_losses(&view, t, &batch, 0.6)?.3),
        config,
    );
    model.store = store;
    samples
}

/// Analytic and numeric values for one named group.
pub fn group(name: &str, config: &GradCheckConfig) -> Result<GroupSamples> {
    config.validate()?;
    group_samples(name, config)
}

/// Runs every group and compares at `config.tol`.
pub fn run_all(config: &GradCheckConfig) -> Result<Vec<GroupResult>> {
    config.validate()?;
    GROUPS
        .iter()
        .map(|g| Ok(compare(&group_samples(g, config)?, config.tol)))
        .collect()
}
