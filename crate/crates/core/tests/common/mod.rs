#![allow(dead_code)]

use std::path::PathBuf;

use slotgraph::config::RunConfig;
use slotgraph::corpus::{load_split, LabelVocab, TagMode};
use slotgraph::depgraph::load_parses;
use slotgraph::model::{build_word_vocab, Example, Model};

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy")
}

/// Bundled toy corpus prepared for a model built from `config`.
pub struct Toy {
    pub model: Model,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub labels: LabelVocab,
}

/// Toy profile with `overrides` (`key=value`) applied on top.
pub fn toy_config(overrides: &[&str]) -> RunConfig {
    let mut c = RunConfig::profile("toy").unwrap();
    for o in overrides {
        c.set_pair(o).unwrap();
    }
    c
}

pub fn toy(config: &RunConfig) -> Toy {
    let dir = toy_dir();
    let (train_ds, labels) = load_split(&dir.join("train"), None, TagMode::Strict).unwrap();
    let (test_ds, _) = load_split(&dir.join("test"), Some(&labels), TagMode::Strict).unwrap();
    let train_parses = load_parses(&dir.join("train/seq.dep"), &train_ds).unwrap();
    let test_parses = load_parses(&dir.join("test/seq.dep"), &test_ds).unwrap();
    let words = build_word_vocab(&train_ds, &labels);
    let model = Model::new(config.model.clone(), labels.clone(), words).unwrap();
    let train = model.prepare_dataset(&train_ds, &train_parses).unwrap();
    let test = model.prepare_dataset(&test_ds, &test_parses).unwrap();
    Toy {
        model,
        train,
        test,
        labels,
    }
}
