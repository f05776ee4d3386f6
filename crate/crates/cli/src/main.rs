use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use slotgraph::checkpoint;
use slotgraph::config::RunConfig;
use slotgraph::corpus::{load_split, typed_tags, Dataset, LabelVocab, TagMode};
use slotgraph::depgraph::{format_dep, load_parses, parse_line, read_conllu_heads, DepParse};
use slotgraph::gradcheck::{run_all, GradCheckConfig};
use slotgraph::model::{build_word_vocab, Example, Model};
use slotgraph::trainer::{evaluate, train_loop};

#[derive(Parser)]
#[command(name = "slotgraph", version, about = "Joint intent detection and slot filling over dependency graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `model.ckpt` and `history.jsonl`.
    Train(TrainArgs),
    /// Score a checkpoint on a split; prints a JSON metrics object.
    Eval(EvalArgs),
    /// Tag raw sentences: one `intent<TAB>tags` line per input line.
    Predict(PredictArgs),
    /// Finite-difference check of every gradient group.
    Gradcheck(GradcheckArgs),
    /// Extract the HEAD column of a CoNLL-U file as a `.dep` file.
    ConvertConllu(ConvertArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (atis, snips, toy), applied before the config file.
    #[arg(long)]
    profile: Option<String>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Split directory with seq.in, seq.out and label.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Model selection split; defaults to the training split.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Optional split scored with the selected model after training.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Parses for --train (default `<train>/seq.dep`).
    #[arg(long)]
    train_dep: Option<PathBuf>,
    #[arg(long)]
    dev_dep: Option<PathBuf>,
    #[arg(long)]
    test_dep: Option<PathBuf>,
    /// Label descriptions (`label<TAB>text`), on top of `<train>/descriptions.tsv`.
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[arg(long)]
    no_slot_label_attn: bool,
    #[arg(long)]
    no_intent_label_attn: bool,
    #[arg(long)]
    no_dep_encoder: bool,
    /// Treat dangling or type-switching I- tags as span starts.
    #[arg(long)]
    lenient: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split directory.
    #[arg(long)]
    data: PathBuf,
    /// Parses (default `<data>/seq.dep`).
    #[arg(long)]
    dep: Option<PathBuf>,
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Whitespace-tokenized sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Parses aligned with --input (default `seq.dep` next to it).
    #[arg(long)]
    dep: Option<PathBuf>,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature width for every module (even, at most 8).
    #[arg(long, default_value_t = 8)]
    dim: usize,
}

#[derive(Args)]
struct ConvertArgs {
    input: PathBuf,
    /// Output `.dep` file (default standard output).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn tag_mode(lenient: bool) -> TagMode {
    if lenient {
        TagMode::Lenient
    } else {
        TagMode::Strict
    }
}

fn dep_path(explicit: Option<&PathBuf>, dir: &Path) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| dir.join("seq.dep"))
}

fn load_parses_for(path: &Path, data: &Dataset) -> Result<Vec<DepParse>> {
    load_parses(path, data).with_context(|| format!("reading parses from {}", path.display()))
}

fn load_examples(model: &Model, dir: &Path, dep: &Path, mode: TagMode) -> Result<Vec<Example>> {
    let (data, _) = load_split(dir, Some(model.labels()), mode)
        .with_context(|| format!("loading split {}", dir.display()))?;
    let parses = load_parses_for(dep, &data)?;
    Ok(model.prepare_dataset(&data, &parses)?)
}

fn run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(p) = &args.profile {
        config.apply_profile(p)?;
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for o in &args.overrides {
        config.set_pair(o)?;
    }
    let paths = [
        (&args.train, &mut config.train_dir),
        (&args.dev, &mut config.dev_dir),
        (&args.test, &mut config.test_dir),
        (&args.train_dep, &mut config.train_dep),
        (&args.dev_dep, &mut config.dev_dep),
        (&args.test_dep, &mut config.test_dep),
        (&args.descriptions, &mut config.descriptions),
        (&args.out, &mut config.output),
    ];
    for (arg, slot) in paths {
        if arg.is_some() {
            slot.clone_from(arg);
        }
    }
    let ab = &mut config.model.ablations;
    ab.no_slot_label_attn |= args.no_slot_label_attn;
    ab.no_intent_label_attn |= args.no_intent_label_attn;
    ab.no_dep_encoder |= args.no_dep_encoder;
    config.apply_env()?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = run_config(&args)?;
    let mode = tag_mode(args.lenient);
    let Some(train_dir) = config.train_dir.clone() else {
        bail!("no training split: pass --train or set train_dir");
    };
    let out_dir = config.output.clone().unwrap_or_else(|| PathBuf::from("run"));

    let (train_data, mut labels): (Dataset, LabelVocab) =
        load_split(&train_dir, None, mode).with_context(|| format!("loading split {}", train_dir.display()))?;
    if let Some(path) = &config.descriptions {
        labels.load_descriptions(path)?;
    }
    let train_parses = load_parses_for(&dep_path(config.train_dep.as_ref(), &train_dir), &train_data)?;
    let words = build_word_vocab(&train_data, &labels);
    let model = Model::new(config.model.clone(), labels, words)?;
    let train = model.prepare_dataset(&train_data, &train_parses)?;
    let dev = match &config.dev_dir {
        Some(dir) => load_examples(&model, dir, &dep_path(config.dev_dep.as_ref(), dir), mode)?,
        None => {
            log::warn!("no dev split given; selecting the model on the training split");
            train.clone()
        }
    };
    let test = match &config.test_dir {
        Some(dir) => Some(load_examples(&model, dir, &dep_path(config.test_dep.as_ref(), dir), mode)?),
        None => None,
    };
    log::info!(
        "{} train / {} dev sentences, {} trainable tensors",
        train.len(),
        dev.len(),
        model.store.trainable_count()
    );

    let outcome = train_loop(model, &train, &dev, &config.train)?;

    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ckpt = out_dir.join("model.ckpt");
    checkpoint::save(&outcome.best, &ckpt)?;
    let mut history = String::new();
    for record in &outcome.history {
        history.push_str(&record.to_json());
        history.push('\n');
    }
    let hist_path = out_dir.join("history.jsonl");
    fs::write(&hist_path, history).with_context(|| format!("writing {}", hist_path.display()))?;
    let cfg_path = out_dir.join("config.txt");
    fs::write(&cfg_path, config.to_text()).with_context(|| format!("writing {}", cfg_path.display()))?;
    log::info!("best epoch {}; wrote {}", outcome.best_epoch, ckpt.display());

    if let Some(test) = test {
        println!("{}", evaluate(&outcome.best, &test)?.to_json());
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let dep = dep_path(args.dep.as_ref(), &args.data);
    let examples = load_examples(&model, &args.data, &dep, tag_mode(args.lenient))?;
    println!("{}", evaluate(&model, &examples)?.to_json());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let dep = args
        .dep
        .clone()
        .unwrap_or_else(|| args.input.with_file_name("seq.dep"));
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let dep_text = fs::read_to_string(&dep).with_context(|| format!("reading parses from {}", dep.display()))?;
    let sentences: Vec<&str> = text.lines().collect();
    let parses: Vec<&str> = dep_text.lines().collect();
    if sentences.len() != parses.len() {
        bail!(
            "{}: {} parse lines for {} sentences in {}",
            dep.display(),
            parses.len(),
            sentences.len(),
            args.input.display()
        );
    }
    let mut out = String::new();
    for (i, (line, dep_line)) in sentences.iter().zip(&parses).enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let parse = parse_line(dep_line, i + 1).with_context(|| format!("in {}", dep.display()))?;
        let pred = model
            .predict_tokens(&tokens, &parse)
            .with_context(|| format!("{}:{}", args.input.display(), i + 1))?;
        let labels = model.labels();
        let tags = typed_tags(&pred.spans, tokens.len(), |&t| labels.slot_types()[t].clone())?;
        out.push_str(&format!("{}\t{}\n", labels.intents()[pred.intent], tags.join(" ")));
    }
    match &args.out {
        Some(path) => fs::write(path, out).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let config = GradCheckConfig {
        seed: args.seed,
        dim: args.dim,
        ..GradCheckConfig::default()
    };
    let results = run_all(&config)?;
    println!("{:<16} {:>8} {:>14}  {:<6} worst entry", "group", "checked", "worst rel err", "status");
    for r in &results {
        println!(
            "{:<16} {:>8} {:>14.3e}  {:<6} {}",
            r.name,
            r.checked,
            r.worst_rel_err,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst_at
        );
    }
    Ok(results.iter().all(|r| r.passed))
}

fn cmd_convert(args: ConvertArgs) -> Result<()> {
    let file = fs::File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let heads = read_conllu_heads(BufReader::new(file)).with_context(|| format!("in {}", args.input.display()))?;
    let text = format_dep(&heads);
    match &args.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Predict(a) => cmd_predict(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ConvertConllu(a) => cmd_convert(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
