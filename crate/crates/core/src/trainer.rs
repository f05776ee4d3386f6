//! Joint loss, Adam, and the seeded training loop with dev-based model
//! selection.
//!
//! Losses are per-sample sums averaged over the batch. The total is
//! `(1 − γ)(slot1 + slot2) + γ · intent`.

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::RngCore;

use crate::decode_eval::{MetricsReport, Prediction};
use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::params::{rng_for, ParamStore};
use crate::tape::{Gradients, Mode, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm limit; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            batch_size: 16,
            lr: 1e-5,
            epochs: 50,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) || self.clip_norm < 0.0 {
            return Err(Error::Config("lr and adam_eps must be positive, clip_norm non-negative".into()));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("Adam beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("gamma", self.gamma.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("train_seed", self.seed.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
        ]
    }

    /// Applies one setting. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "gamma" => self.gamma = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "train_seed" => self.seed = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_intent: f64,
    pub l_slot1: f64,
    pub l_slot2: f64,
    pub l_total: f64,
}

pub fn joint_loss(l_slot1: f64, l_slot2: f64, l_intent: f64, gamma: f64) -> LossReport {
    LossReport {
        l_intent,
        l_slot1,
        l_slot2,
        l_total: (1.0 - gamma) * (l_slot1 + l_slot2) + gamma * l_intent,
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.6} (intent {:.6}, bio {:.6}, type {:.6})",
            self.l_total, self.l_intent, self.l_slot1, self.l_slot2
        )
    }
}

/// Batch-mean loss terms on `tape`: `(intent, slot1, slot2, total)`.
pub fn batch_losses(
    model: &Model,
    tape: &mut Tape,
    batch: &[&Example],
    gamma: f64,
) -> Result<(Var, Var, Var, Var)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let zero = || Array2::zeros((1, 1));
    let (mut li, mut l1, mut l2) = (tape.constant(zero()), tape.constant(zero()), tape.constant(zero()));
    for ex in batch {
        let s = model.sample_losses(tape, ex)?;
        li = tape.add(li, s.intent);
        l1 = tape.add(l1, s.slot1);
        l2 = tape.add(l2, s.slot2);
    }
    let k = 1.0 / batch.len() as f64;
    let li = tape.scale(li, k);
    let l1 = tape.scale(l1, k);
    let l2 = tape.scale(l2, k);
    let slots = tape.add(l1, l2);
    let slots = tape.scale(slots, 1.0 - gamma);
    let intent = tape.scale(li, gamma);
    let total = tape.add(slots, intent);
    Ok((li, l1, l2, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.entries().iter().map(|e| Array2::zeros(e.value.raw_dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every trainable tensor. Tensors the loss
    /// never reached see a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, config: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match grads.get(id) {
                Some(g) => {
                    m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
                    v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                }
                None => {
                    m.mapv_inplace(|m| b1 * m);
                    v.mapv_inplace(|v| b2 * v);
                }
            }
            let value = store.get_mut(id);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= config.lr * (m / c1) / ((v / c2).sqrt() + config.adam_eps);
            });
        }
    }
}

/// Forward, backward and one Adam update over `batch`; dropout draws from
/// `dropout_seed`.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Example],
    config: &TrainConfig,
    dropout_seed: u64,
) -> Result<LossReport> {
    let (report, mut grads) = {
        let mut tape = Tape::with_seed(&model.store, Mode::Train, dropout_seed);
        let (li, l1, l2, total) = batch_losses(model, &mut tape, batch, config.gamma)?;
        let report = joint_loss(tape.scalar(l1), tape.scalar(l2), tape.scalar(li), config.gamma);
        (report, tape.backward(total))
    };
    if config.clip_norm > 0.0 {
        grads.clip_global_norm(config.clip_norm);
    }
    adam.update(&mut model.store, &grads, config);
    Ok(report)
}

/// Eval-mode batch-mean losses over `examples`.
pub fn evaluate_loss(model: &Model, examples: &[Example], gamma: f64) -> Result<LossReport> {
    let refs: Vec<&Example> = examples.iter().collect();
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let (li, l1, l2, _) = batch_losses(model, &mut tape, &refs, gamma)?;
    Ok(joint_loss(tape.scalar(l1), tape.scalar(l2), tape.scalar(li), gamma))
}

pub fn predict_all(model: &Model, examples: &[Example]) -> Result<Vec<Prediction>> {
    examples.iter().map(|ex| model.predict(ex)).collect()
}

pub fn evaluate(model: &Model, examples: &[Example]) -> Result<MetricsReport> {
    let preds = predict_all(model, examples)?;
    let golds: Vec<Prediction> = examples.iter().map(Example::gold).collect();
    Ok(MetricsReport::evaluate(&preds, &golds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the step losses over the epoch.
    pub train: LossReport,
    pub dev: MetricsReport,
}

impl EpochRecord {
    /// One line of the history file.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"epoch\":{},\"l_total\":{},\"l_intent\":{},\"l_slot1\":{},\"l_slot2\":{},\"dev\":{}}}",
            self.epoch,
            self.train.l_total,
            self.train.l_intent,
            self.train.l_slot1,
            self.train.l_slot2,
            self.dev.to_json()
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// The model after the last epoch.
    pub last: Model,
}

/// Trains for `config.epochs`, shuffling with a per-epoch seeded generator
/// and keeping the model with the highest dev semantic accuracy (earliest
/// epoch on ties).
pub fn train_loop(
    mut model: Model,
    train: &[Example],
    dev: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(Model, usize, f64)> = None;

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(config.seed, &format!("shuffle.epoch{epoch}")));
        let mut sums = [0.0; 3];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let seed = rng_for(config.seed, &format!("dropout.epoch{epoch}.batch{b}")).next_u64();
            let r = train_step(&mut model, &mut adam, &batch, config, seed)?;
            let w = batch.len() as f64;
            sums[0] += r.l_intent * w;
            sums[1] += r.l_slot1 * w;
            sums[2] += r.l_slot2 * w;
        }
        let n = train.len() as f64;
        let loss = joint_loss(sums[1] / n, sums[2] / n, sums[0] / n, config.gamma);
        let dev_metrics = evaluate(&model, dev)?;
        log::info!(
            "epoch {epoch}: {loss}; dev semantic acc {:.4}",
            dev_metrics.semantic_acc
        );
        let better = best
            .as_ref()
            .map_or(true, |(_, _, acc)| dev_metrics.semantic_acc > *acc);
        if better {
            best = Some((model.clone(), epoch, dev_metrics.semantic_acc));
        }
        history.push(EpochRecord {
            epoch,
            train: loss,
            dev: dev_metrics,
        });
    }
    let (best, best_epoch, _) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        last: model,
    })
}
