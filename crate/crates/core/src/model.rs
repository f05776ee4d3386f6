//! The full joint model: encoder, dependency graph attention, intent label
//! attention, intent-gated fusion, BIO tagging and span typing.

use ndarray::Array2;

use crate::corpus::{Bio, Dataset, IntentLabel, LabelVocab, Sample, Span};
use crate::decode_eval::{decode_bio, Prediction};
use crate::depgraph::{build_adjacency, AdjacencyMatrix, DepParse};
use crate::encoder::{Encoder, EncoderConfig, WordVocab};
use crate::error::{Error, Result};
use crate::gat::{Gat, GatConfig};
use crate::heads::{
    bio_loss, intent_loss, slot_type_forward, slot_type_loss, span_repr, BioTagger, GateModule,
    IntentHead, SpanTyper,
};
use crate::labelsem::{build_table, AttentionModule, GlobalInit, LabelScore, LabelTable};
use crate::params::{rng_for, xavier, ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Type spans from the summed span features directly.
    pub no_slot_label_attn: bool,
    /// Use the `[CLS]` encoder row in place of the intent label context.
    pub no_intent_label_attn: bool,
    /// Skip graph attention; syntactic features are a fixed map of `H`.
    pub no_dep_encoder: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub encoder_dropout: f64,
    pub d_g: usize,
    pub gat_heads: usize,
    pub gat_layers: usize,
    pub gat_dropout: f64,
    pub global_init: GlobalInit,
    pub label_score: LabelScore,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            encoder_layers: 1,
            encoder_heads: 2,
            ffn_dim: 64,
            max_len: 128,
            encoder_dropout: 0.0,
            d_g: 32,
            gat_heads: 2,
            gat_layers: 1,
            gat_dropout: 0.0,
            global_init: GlobalInit::default(),
            label_score: LabelScore::Additive(32),
            ablations: Ablations::default(),
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl ModelConfig {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            vocab_size,
            n_layers: self.encoder_layers,
            n_heads: self.encoder_heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            dropout: self.encoder_dropout,
            seed: self.seed,
        }
    }

    pub fn gat_config(&self) -> GatConfig {
        GatConfig {
            k_heads: self.gat_heads,
            d_in: self.d,
            d_out_total: self.d_g,
            dropout_rate: self.gat_dropout,
            layers: self.gat_layers,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config(3).validate()?;
        self.gat_config().validate()
    }

    /// `key = value` pairs in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let init = match self.global_init {
            GlobalInit::Uniform(b) => b.to_string(),
            GlobalInit::Zeros => "0".to_string(),
        };
        vec![
            ("d", self.d.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("encoder_heads", self.encoder_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("max_len", self.max_len.to_string()),
            ("encoder_dropout", self.encoder_dropout.to_string()),
            ("d_g", self.d_g.to_string()),
            ("gat_heads", self.gat_heads.to_string()),
            ("gat_layers", self.gat_layers.to_string()),
            ("gat_dropout", self.gat_dropout.to_string()),
            ("global_init", init),
            ("label_score", self.label_score.to_string()),
            ("no_slot_label_attn", self.ablations.no_slot_label_attn.to_string()),
            ("no_intent_label_attn", self.ablations.no_intent_label_attn.to_string()),
            ("no_dep_encoder", self.ablations.no_dep_encoder.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Applies one setting. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d" => self.d = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "encoder_heads" => self.encoder_heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "encoder_dropout" => self.encoder_dropout = parse(key, value)?,
            "d_g" => self.d_g = parse(key, value)?,
            "gat_heads" => self.gat_heads = parse(key, value)?,
            "gat_layers" => self.gat_layers = parse(key, value)?,
            "gat_dropout" => self.gat_dropout = parse(key, value)?,
            "global_init" => {
                let b: f64 = parse(key, value)?;
                self.global_init = if b == 0.0 { GlobalInit::Zeros } else { GlobalInit::Uniform(b) };
            }
            "label_score" => {
                self.label_score = LabelScore::parse(value).ok_or_else(|| {
                    Error::Config(format!("bad value `{value}` for `label_score` (linear or additive:<width>)"))
                })?
            }
            "no_slot_label_attn" => self.ablations.no_slot_label_attn = parse(key, value)?,
            "no_intent_label_attn" => self.ablations.no_intent_label_attn = parse(key, value)?,
            "no_dep_encoder" => self.ablations.no_dep_encoder = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Training vocabulary: every token of `train`, then every description token.
pub fn build_word_vocab(train: &Dataset, labels: &LabelVocab) -> WordVocab {
    let mut words = WordVocab::new();
    for s in &train.samples {
        for t in &s.utterance.tokens {
            words.add(t);
        }
    }
    for name in labels.intents().iter().chain(labels.slot_types()) {
        for t in labels.description(name).split_whitespace() {
            words.add(t);
        }
    }
    words
}

/// A sample converted to model inputs.
#[derive(Debug, Clone)]
pub struct Example {
    pub ids: Vec<usize>,
    pub adj: AdjacencyMatrix,
    pub bio: Vec<Bio>,
    pub spans: Vec<Span>,
    pub intent: IntentLabel,
}

impl Example {
    pub fn n_words(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn gold(&self) -> Prediction {
        Prediction {
            intent: self.intent.0,
            spans: self.spans.clone(),
        }
    }
}

#[derive(Debug, Clone)]
enum Syntax {
    Graph(Gat),
    /// Frozen `d_g × d` map applied to `H`.
    Bypass(ParamId),
}

/// Per-sample loss terms, each a `1 × 1` tape variable.
#[derive(Debug, Clone, Copy)]
pub struct SampleLosses {
    pub intent: Var,
    pub slot1: Var,
    pub slot2: Var,
}

struct Shared {
    h: Var,
    intent_probs: Var,
    bio_probs: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    labels: LabelVocab,
    words: WordVocab,
    pub store: ParamStore,
    encoder: Encoder,
    syntax: Syntax,
    intent_labels: Option<(LabelTable, AttentionModule)>,
    intent_head: IntentHead,
    gate: GateModule,
    tagger: BioTagger,
    slot_labels: Option<(LabelTable, AttentionModule)>,
    typer: SpanTyper,
}

impl Model {
    /// Builds a freshly initialized model. Label description parts are
    /// computed from the initial encoder and frozen.
    pub fn new(config: ModelConfig, labels: LabelVocab, words: WordVocab) -> Result<Self> {
        config.validate()?;
        if labels.intents().is_empty() || labels.slot_types().is_empty() {
            return Err(Error::Config("model needs at least one intent and one slot type".into()));
        }
        let seed = config.seed;
        let (d, d_g) = (config.d, config.d_g);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder_config(words.len()), &mut store)?;

        let syntax = if config.ablations.no_dep_encoder {
            let name = "dep_bypass.proj";
            let proj = if d == d_g {
                Array2::eye(d)
            } else {
                xavier(d_g, d, &mut rng_for(seed, name))
            };
            Syntax::Bypass(store.add_frozen(name, proj))
        } else {
            Syntax::Graph(Gat::new(config.gat_config(), &mut store)?)
        };

        let intent_labels = if config.ablations.no_intent_label_attn {
            None
        } else {
            let table = build_table(
                &mut store,
                "intent_labels",
                labels.intents(),
                &labels,
                &encoder,
                &words,
                config.global_init,
                seed,
            )?;
            let attn = AttentionModule::new(&mut store, "intent_attn", d, d_g, config.label_score, seed);
            Some((table, attn))
        };
        let intent_head = IntentHead::new(&mut store, labels.intents().len(), d, d_g, seed);
        let gate = GateModule::new(&mut store, d, d_g, seed);
        let tagger = BioTagger::new(&mut store, d, d_g, seed);
        let slot_labels = if config.ablations.no_slot_label_attn {
            None
        } else {
            let table = build_table(
                &mut store,
                "slot_labels",
                labels.slot_types(),
                &labels,
                &encoder,
                &words,
                config.global_init,
                seed,
            )?;
            let attn = AttentionModule::new(&mut store, "slot_attn", d, d, config.label_score, seed);
            Some((table, attn))
        };
        let typer = SpanTyper::new(&mut store, labels.slot_types().len(), d, seed);

        Ok(Self {
            config,
            labels,
            words,
            store,
            encoder,
            syntax,
            intent_labels,
            intent_head,
            gate,
            tagger,
            slot_labels,
            typer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn labels(&self) -> &LabelVocab {
        &self.labels
    }

    pub fn words(&self) -> &WordVocab {
        &self.words
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn gat(&self) -> Option<&Gat> {
        match &self.syntax {
            Syntax::Graph(g) => Some(g),
            Syntax::Bypass(_) => None,
        }
    }

    pub fn intent_labels(&self) -> Option<&(LabelTable, AttentionModule)> {
        self.intent_labels.as_ref()
    }

    pub fn slot_labels(&self) -> Option<&(LabelTable, AttentionModule)> {
        self.slot_labels.as_ref()
    }

    pub fn intent_head(&self) -> &IntentHead {
        &self.intent_head
    }

    pub fn gate(&self) -> &GateModule {
        &self.gate
    }

    pub fn tagger(&self) -> &BioTagger {
        &self.tagger
    }

    pub fn typer(&self) -> &SpanTyper {
        &self.typer
    }

    pub fn prepare_tokens<S: AsRef<str>>(&self, tokens: &[S], parse: &DepParse) -> Result<(Vec<usize>, AdjacencyMatrix)> {
        if tokens.len() != parse.len() {
            return Err(Error::dims(format!(
                "{} tokens with a parse over {} words",
                tokens.len(),
                parse.len()
            )));
        }
        Ok((self.words.encode(tokens), build_adjacency(parse)))
    }

    pub fn prepare(&self, sample: &Sample, parse: &DepParse) -> Result<Example> {
        let (ids, adj) = self.prepare_tokens(&sample.utterance.tokens, parse)?;
        Ok(Example {
            ids,
            adj,
            bio: sample.slots.bio.clone(),
            spans: sample.slots.spans.clone(),
            intent: sample.intent,
        })
    }

    pub fn prepare_dataset(&self, data: &Dataset, parses: &[DepParse]) -> Result<Vec<Example>> {
        if data.len() != parses.len() {
            return Err(Error::LineCountMismatch {
                what: "dependency parses".into(),
                expected: data.len(),
                found: parses.len(),
            });
        }
        data.samples
            .iter()
            .zip(parses)
            .map(|(s, p)| self.prepare(s, p))
            .collect()
    }

    fn shared(&self, tape: &mut Tape, ids: &[usize], adj: &AdjacencyMatrix) -> Result<Shared> {
        if adj.size() != ids.len() {
            return Err(Error::dims(format!(
                "adjacency over {} nodes for {} tokens",
                adj.size(),
                ids.len()
            )));
        }
        let h = self.encoder.forward(tape, ids)?;
        let g = match &self.syntax {
            Syntax::Graph(gat) => gat.forward(tape, h, adj)?,
            Syntax::Bypass(proj) => {
                let p = tape.param(*proj);
                tape.matmul_nt(h, p)
            }
        };
        let g0 = tape.row(g, 0);
        let h_intent = match &self.intent_labels {
            Some((table, attn)) => attn.forward(tape, g0, table)?.0,
            None => tape.row(h, 0),
        };
        let intent_probs = self.intent_head.forward(tape, h_intent, g0)?;
        let (fused, _) = self.gate.fuse(tape, h_intent, g, h)?;
        let bio_probs = self.tagger.forward(tape, fused)?;
        Ok(Shared {
            h,
            intent_probs,
            bio_probs,
        })
    }

    fn type_dist(&self, tape: &mut Tape, h: Var, start: usize, end: usize) -> Result<Var> {
        let r = span_repr(tape, h, start, end)?;
        let labels = self.slot_labels.as_ref().map(|(t, a)| (t, a));
        slot_type_forward(tape, r, labels, &self.typer)
    }

    /// Per-sample summed losses with gold spans fed to the span typer.
    pub fn sample_losses(&self, tape: &mut Tape, ex: &Example) -> Result<SampleLosses> {
        let s = self.shared(tape, &ex.ids, &ex.adj)?;
        let intent = intent_loss(tape, s.intent_probs, ex.intent);
        let slot1 = bio_loss(tape, s.bio_probs, &ex.bio)?;
        let dists = ex
            .spans
            .iter()
            .map(|sp| self.type_dist(tape, s.h, sp.start, sp.end))
            .collect::<Result<Vec<_>>>()?;
        let gold: Vec<usize> = ex.spans.iter().map(|sp| sp.label).collect();
        let slot2 = slot_type_loss(tape, &dists, &gold)?;
        Ok(SampleLosses { intent, slot1, slot2 })
    }

    /// Eval-mode prediction: argmax intent, greedy BIO spans, argmax type per span.
    pub fn predict_ids(&self, ids: &[usize], adj: &AdjacencyMatrix) -> Result<Prediction> {
        let mut tape = Tape::new(&self.store, Mode::Eval);
        let s = self.shared(&mut tape, ids, adj)?;
        let intent = argmax(tape.value(s.intent_probs).row(0).iter().copied());
        let n = ids.len();
        let words = tape.value(s.bio_probs).slice(ndarray::s![1..n - 1, ..]).to_owned();
        let mut spans = Vec::new();
        for (start, end) in decode_bio(&words) {
            let dist = self.type_dist(&mut tape, s.h, start, end)?;
            let label = argmax(tape.value(dist).row(0).iter().copied());
            spans.push(Span::new(start, end, label));
        }
        Ok(Prediction { intent, spans })
    }

    pub fn predict(&self, ex: &Example) -> Result<Prediction> {
        self.predict_ids(&ex.ids, &ex.adj)
    }

    pub fn predict_tokens<S: AsRef<str>>(&self, tokens: &[S], parse: &DepParse) -> Result<Prediction> {
        let (ids, adj) = self.prepare_tokens(tokens, parse)?;
        self.predict_ids(&ids, &adj)
    }
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
