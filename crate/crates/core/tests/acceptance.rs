//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::time::{Duration, Instant};

use ndarray::{array, Array1, Array2};
use rand::Rng;

use slotgraph::checkpoint;
use slotgraph::config::RunConfig;
use slotgraph::corpus::{Bio, Span};
use slotgraph::decode_eval::{decode_tags, entity_f1, intent_accuracy, semantic_accuracy, slot_exact_match, Prediction};
use slotgraph::depgraph::{build_adjacency, DepParse};
use slotgraph::encoder::TokenFeatures;
use slotgraph::gat::{attention_coeffs, gat_forward, GatLayer};
use slotgraph::gradcheck::{compare, group, run_all, GradCheckConfig, GROUPS};
use slotgraph::labelsem::{label_attention, AttentionModule, GlobalInit, LabelScore, LabelTable};
use slotgraph::model::{Ablations, Example};
use slotgraph::params::{rng_for, uniform, ParamStore};
use slotgraph::tape::Mode;
use slotgraph::trainer::{evaluate, train_loop, train_step, Adam, TrainConfig, TrainOutcome};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_scope() -> Outcome {
    // Full-corpus scores are out of scope; this only pins the two dataset
    // profiles.
    let atis = RunConfig::profile("atis").map_err(|e| e.to_string())?;
    let snips = RunConfig::profile("snips").map_err(|e| e.to_string())?;
    let got = |c: &RunConfig| (c.train.gamma, c.train.batch_size, c.train.lr, c.model.gat_heads, c.model.gat_dropout, c.model.d_g);
    ensure(got(&atis) == (0.6, 16, 1e-5, 4, 0.4, 256), || format!("atis profile {:?}", got(&atis)))?;
    ensure(got(&snips) == (0.5, 14, 1e-5, 2, 0.5, 512), || format!("snips profile {:?}", got(&snips)))?;
    Ok("full-scale reproduction out of scope; atis/snips profiles hold their reference hyper-parameters".into())
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let config = GradCheckConfig::default();
    ensure(config.dim <= 8 && config.tol == 1e-4, || "harness settings".into())?;
    let results = run_all(&config).map_err(|e| e.to_string())?;
    let again = run_all(&config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut worst: f64 = 0.0;
    for (r, s) in results.iter().zip(&again) {
        ensure(r.passed, || format!("{} worst {:.3e} at {}", r.name, r.worst_rel_err, r.worst_at))?;
        ensure(r.worst_rel_err.to_bits() == s.worst_rel_err.to_bits(), || format!("{} not deterministic", r.name))?;
        worst = worst.max(r.worst_rel_err);
    }
    ensure(results.len() == GROUPS.len(), || "missing groups".into())?;
    let mut bad = group("joint", &config).map_err(|e| e.to_string())?;
    bad.analytic[0] += 1e-2;
    ensure(!compare(&bad, config.tol).passed, || "corrupted gradient not reported".into())?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} groups, worst rel err {worst:.2e} < 1e-4, dim {}, {:.2}s for two runs",
        results.len(),
        config.dim,
        elapsed.as_secs_f64()
    ))
}

fn c3_gat() -> Outcome {
    let e = std::f64::consts::E;
    let adj = build_adjacency(&DepParse::new(vec![0], 1).map_err(|e| e.to_string())?);
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "g", 1, 2, 2, 0.0, 0);
    *store.get_mut(layer.heads[0].w) = Array2::eye(2);
    *store.get_mut(layer.heads[0].a) = array![[0.0, 0.0, 1.0, 0.0]];
    let h = TokenFeatures(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
    let want = array![
        [e / (e + 1.0), 1.0 / (e + 1.0)],
        [2.0 * e / (2.0 * e + 1.0), (1.0 + e) / (2.0 * e + 1.0)],
        [e / (1.0 + e), 1.0],
    ];
    let got = gat_forward(&store, &layer, &h, &adj, Mode::Eval, 0).map_err(|e| e.to_string())?;
    let oracle_err = got.0.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(oracle_err <= 1e-9, || format!("3-node oracle off by {oracle_err:.2e}"))?;

    let parses = [vec![0], vec![0, 1], vec![2, 0, 2], vec![0, 1, 2, 3], vec![3, 3, 0, 3, 4], vec![2, 5, 2, 5, 0, 5]];
    let mut checked = 0;
    for (k, heads) in parses.iter().enumerate() {
        let adj = build_adjacency(&DepParse::new(heads.clone(), 1).map_err(|e| e.to_string())?);
        let n = adj.size();
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "g", 2, 4, 4, 0.0, k as u64);
        let h = TokenFeatures(uniform(n, 4, 1.0, &mut rng_for(k as u64, "h")));
        for alpha in attention_coeffs(&store, &layer, &h, &adj).map_err(|e| e.to_string())? {
            for i in 0..n {
                let sum = alpha.row(i).sum();
                ensure((sum - 1.0).abs() <= 1e-9, || format!("row {i} sums to {sum}"))?;
                for j in 0..n {
                    ensure(adj.is_edge(i, j) || alpha[[i, j]] == 0.0, || format!("weight on non-neighbor ({i},{j})"))?;
                }
            }
        }
        let base = gat_forward(&store, &layer, &h, &adj, Mode::Eval, 0).map_err(|e| e.to_string())?;
        for i in 0..n {
            let mut moved = h.0.clone();
            for j in (0..n).filter(|&j| !adj.is_edge(i, j)) {
                moved.row_mut(j).mapv_inplace(|v| v * -3.0 + 1.0);
            }
            let g = gat_forward(&store, &layer, &TokenFeatures(moved), &adj, Mode::Eval, 0).map_err(|e| e.to_string())?;
            ensure(g.0.row(i) == base.0.row(i), || format!("node {i} moved when non-neighbors changed"))?;
            checked += 1;
        }
    }
    Ok(format!("3-node oracle err {oracle_err:.1e}; rows sum to 1, masked, local on {checked} nodes"))
}

fn c4_label_attention() -> Outcome {
    let mut worst: f64 = 0.0;
    for (k, score) in [LabelScore::Linear, LabelScore::Additive(6)].into_iter().enumerate() {
        let mut store = ParamStore::new();
        let desc = uniform(5, 4, 1.0, &mut rng_for(k as u64, "desc"));
        let table = LabelTable::new(&mut store, "t", desc, GlobalInit::default(), 1);
        let attn = AttentionModule::new(&mut store, "a", 4, 3, score, 1);
        let q: Array1<f64> = array![0.2, -1.1, 0.7];
        let (ctx, beta) = label_attention(&store, &q, &table, &attn).map_err(|e| e.to_string())?;
        ensure((beta.sum() - 1.0).abs() <= 1e-9 && beta.iter().all(|&b| b >= 0.0), || "weights not a distribution".into())?;
        let rebuilt = beta.dot(&table.combined_value(&store));
        worst = ctx.iter().zip(&rebuilt).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        ensure(worst <= 1e-9, || format!("reconstruction off by {worst:.2e}"))?;
        store.get_mut(attn.b)[[0, 0]] += 7.5;
        let (ctx2, beta2) = label_attention(&store, &q, &table, &attn).map_err(|e| e.to_string())?;
        let shift = ctx.iter().zip(&ctx2).chain(beta.iter().zip(&beta2)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(shift <= 1e-12, || format!("score shift moved output by {shift:.2e}"))?;
    }

    let config = common::toy_config(&[]);
    let mut toy = common::toy(&config);
    let frozen: Vec<(String, Array2<f64>)> = toy
        .model
        .store
        .entries()
        .iter()
        .filter(|e| e.name.ends_with(".desc"))
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect();
    let mut adam = Adam::new(&toy.model.store);
    let batch: Vec<&Example> = toy.train.iter().take(8).collect();
    train_step(&mut toy.model, &mut adam, &batch, &config.train, 0).map_err(|e| e.to_string())?;
    for (name, before) in &frozen {
        let now = toy.model.store.get(toy.model.store.find(name).unwrap());
        ensure(now.iter().zip(before).all(|(a, b)| a.to_bits() == b.to_bits()), || format!("{name} changed"))?;
    }
    Ok(format!(
        "convex reconstruction err {worst:.1e}, shift invariant, {} description tables bit-stable after a step",
        frozen.len()
    ))
}

fn reference_decode(tags: &[Bio]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..tags.len() {
        let opens = tags[i] == Bio::B || (tags[i] == Bio::I && (i == 0 || tags[i - 1] == Bio::O));
        if opens {
            let mut j = i;
            while j + 1 < tags.len() && tags[j + 1] == Bio::I {
                j += 1;
            }
            out.push((i + 1, j + 1));
        }
    }
    out
}

fn c5_decode_metrics() -> Outcome {
    let mut strings = 0;
    for n in 0..=6u32 {
        for code in 0..3usize.pow(n) {
            let seq: Vec<Bio> = (0..n).map(|k| Bio::from_index(code / 3usize.pow(k) % 3).unwrap()).collect();
            ensure(decode_tags(&seq) == reference_decode(&seq), || format!("decode differs on {seq:?}"))?;
            strings += 1;
        }
    }
    let s = entity_f1(&[vec![Span::new(2, 3, 0)]], &[vec![Span::new(2, 3, 0), Span::new(5, 5, 1)]]);
    ensure((s.precision, s.recall, s.f1) == (1.0, 0.5, 2.0 / 3.0), || format!("F1 example gave {s:?}"))?;

    let mut rng = rng_for(0, "acceptance.metrics");
    let random_pred = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut spans = BTreeSet::new();
        for p in 1..=4 {
            if rng.gen_bool(0.4) {
                spans.insert(Span::new(p, p, rng.gen_range(0..2)));
            }
        }
        Prediction {
            intent: rng.gen_range(0..3),
            spans: spans.into_iter().collect(),
        }
    };
    for _ in 0..500 {
        let n = rng.gen_range(1..10);
        let preds: Vec<Prediction> = (0..n).map(|_| random_pred(&mut rng)).collect();
        let golds: Vec<Prediction> = (0..n).map(|_| random_pred(&mut rng)).collect();
        let pi: Vec<usize> = preds.iter().map(|p| p.intent).collect();
        let gi: Vec<usize> = golds.iter().map(|p| p.intent).collect();
        let sem = semantic_accuracy(&preds, &golds);
        let bound = intent_accuracy(&pi, &gi).min(slot_exact_match(&preds, &golds));
        ensure(sem <= bound, || format!("semantic {sem} above {bound}"))?;
    }
    Ok(format!("decode matches reference on {strings} tag strings; F1 example (1, 0.5, 2/3); bound holds on 500 random sets"))
}

fn c6_loss_algebra() -> Outcome {
    let config = common::toy_config(&[]);
    let toy = common::toy(&config);
    let batch: Vec<&Example> = toy.train.iter().take(8).collect();
    let mut reports = 0;
    for gamma in [0.0, 0.25, 0.6, 1.0] {
        let mut model = toy.model.clone();
        let mut adam = Adam::new(&model.store);
        let tc = TrainConfig { gamma, ..config.train.clone() };
        let watch = |gamma: f64| -> &'static [&'static str] {
            if gamma == 1.0 {
                &["bio_tagger.", "span_typer."]
            } else if gamma == 0.0 {
                &["intent_head."]
            } else {
                &[]
            }
        };
        let before: Vec<(String, Array2<f64>)> = model
            .store
            .entries()
            .iter()
            .filter(|e| watch(gamma).iter().any(|p| e.name.starts_with(p)))
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        let r = train_step(&mut model, &mut adam, &batch, &tc, 3).map_err(|e| e.to_string())?;
        let want = (1.0 - gamma) * (r.l_slot1 + r.l_slot2) + gamma * r.l_intent;
        ensure(r.l_total == want, || format!("gamma {gamma}: {} != {want}", r.l_total))?;
        reports += 1;
        for (name, v) in &before {
            ensure(model.store.get(model.store.find(name).unwrap()) == v, || format!("gamma {gamma} moved {name}"))?;
        }
    }
    Ok(format!("identity exact on {reports} steps; slot heads fixed at gamma=1, intent head fixed at gamma=0"))
}

fn c7_toy_overfit() -> Outcome {
    let config = RunConfig::profile("toy").map_err(|e| e.to_string())?;
    let (m, t) = (&config.model, &config.train);
    ensure(
        t.lr == 1e-2 && m.d == 32 && m.d_g == 32 && m.gat_heads == 2 && t.epochs == 300,
        || "toy profile settings".into(),
    )?;
    let toy = common::toy(&config);
    let vocab: HashSet<String> = std::fs::read_to_string(common::toy_dir().join("train/seq.in"))
        .unwrap()
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let shape = (toy.train.len(), vocab.len(), toy.labels.intents().len(), toy.labels.slot_types().len(), toy.test.len());
    ensure(shape.0 == 40 && shape.1 <= 30 && shape.2 == 3 && shape.3 == 4 && shape.4 == 10, || {
        format!("corpus shape {shape:?}")
    })?;

    let start = Instant::now();
    let out = train_loop(toy.model, &toy.train, &toy.train, t).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let first = out
        .history
        .iter()
        .find(|r| r.dev.semantic_acc == 1.0 && r.train.l_total < 0.05)
        .map(|r| r.epoch);
    let last = out.history.last().unwrap();
    let train_acc = evaluate(&out.last, &toy.train).map_err(|e| e.to_string())?.semantic_acc;
    let held_out = evaluate(&out.last, &toy.test).map_err(|e| e.to_string())?.semantic_acc;
    ensure(train_acc == 1.0, || format!("train semantic acc {train_acc}"))?;
    ensure(last.train.l_total < 0.05, || format!("final loss {:.4}", last.train.l_total))?;
    ensure(held_out >= 0.8, || format!("held-out semantic acc {held_out}"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "train semantic acc 1.0 (first reached with loss < 0.05 at epoch {}), final loss {:.2e}, held-out {held_out:.2}, {:.1}s",
        first.unwrap_or(0),
        last.train.l_total,
        elapsed.as_secs_f64()
    ))
}

fn inventory(ablations: Ablations) -> Vec<(String, (usize, usize))> {
    let config = common::toy_config(&[]);
    let mut mc = config.model.clone();
    mc.ablations = ablations;
    let mut rc = config;
    rc.model = mc;
    common::toy(&rc).model.store.trainable_inventory()
}

fn c8_ablations() -> Outcome {
    let full = inventory(Ablations::default());
    let cases: [(&str, Ablations, &[&str]); 3] = [
        ("no_slot_label_attn", Ablations { no_slot_label_attn: true, ..Ablations::default() }, &["slot_labels.", "slot_attn."]),
        ("no_intent_label_attn", Ablations { no_intent_label_attn: true, ..Ablations::default() }, &["intent_labels.", "intent_attn."]),
        ("no_dep_encoder", Ablations { no_dep_encoder: true, ..Ablations::default() }, &["gat."]),
    ];
    let mut details = Vec::new();
    for (name, ablations, removed) in cases {
        let inv = inventory(ablations);
        let expected: Vec<_> = full
            .iter()
            .filter(|(n, _)| !removed.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect();
        ensure(inv == expected, || format!("{name}: inventory differs from the full model minus {removed:?}"))?;
        ensure(inv.len() < full.len(), || format!("{name}: nothing removed"))?;

        let mut config = common::toy_config(&[]);
        config.model.ablations = ablations;
        let toy = common::toy(&config);
        let out = train_loop(toy.model, &toy.train, &toy.train, &config.train).map_err(|e| e.to_string())?;
        let loss = out.history.last().unwrap().train.l_total;
        ensure(loss < 0.2, || format!("{name}: final loss {loss:.4}"))?;
        details.push(format!("{name} -{} tensors, loss {loss:.1e}", full.len() - inv.len()));
    }
    Ok(details.join("; "))
}

fn c9_reproducibility() -> Outcome {
    let config = common::toy_config(&["epochs=8", "gat_dropout=0.3", "encoder_dropout=0.1", "seed=17"]);
    let run = || -> Result<TrainOutcome, String> {
        let toy = common::toy(&config);
        train_loop(toy.model, &toy.train, &toy.test, &config.train).map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    let bits = |o: &TrainOutcome| -> Vec<u64> {
        o.history
            .iter()
            .flat_map(|r| [r.train.l_total, r.train.l_intent, r.train.l_slot1, r.train.l_slot2, r.dev.semantic_acc])
            .map(f64::to_bits)
            .collect()
    };
    ensure(bits(&a) == bits(&b), || "loss histories differ".into())?;
    let (ca, cb) = (checkpoint::to_bytes(&a.best), checkpoint::to_bytes(&b.best));
    ensure(ca == cb, || "best checkpoints differ".into())?;
    ensure(checkpoint::to_bytes(&a.last) == checkpoint::to_bytes(&b.last), || "final checkpoints differ".into())?;
    Ok(format!("{} epochs with dropout, histories and {}-byte checkpoints bit-identical", a.history.len(), ca.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("scope", c1_scope),
        ("gradient integrity", c2_gradients),
        ("graph attention", c3_gat),
        ("label attention", c4_label_attention),
        ("decoding and metrics", c5_decode_metrics),
        ("loss algebra", c6_loss_algebra),
        ("toy overfit", c7_toy_overfit),
        ("ablation wiring", c8_ablations),
        ("reproducibility", c9_reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
