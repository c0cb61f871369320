//! `convqa`: preprocess SQuAD data, train and run the convolutional span
//! extraction models, score and ensemble their predictions.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use convqa::attention::export_attention_heatmap;
use convqa::eval::{ensemble_select, evaluate};
use convqa::model::{preset_names, reference_figures, Model, ModelConfig};
use convqa::span::{
    parse_extended_predictions, parse_predictions, write_extended_predictions, write_predictions, SpanPrediction,
};
use convqa::text::{load_examples, load_squad, write_cache, BatchConfig, QAExample, Vocab};
use convqa::training::{scaling_report, train, BenchConfig, TrainConfig, TrainOutputs};

#[derive(Parser)]
#[command(name = "convqa", version, about = "Convolutional reading-comprehension models")]
struct Cli {
    /// Directory holding train.json / dev.json, used when --data or --dev is omitted.
    #[arg(long, global = true, env = "CONVQA_DATA_DIR")]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize and align a SQuAD file into a line-delimited cache.
    Preprocess(PreprocessArgs),
    /// Train a model and save its best checkpoint.
    Train(TrainArgs),
    /// Write predictions for a dataset from a checkpoint.
    Predict(PredictArgs),
    /// Score predictions against gold answers.
    Eval(EvalArgs),
    /// Combine prediction files by per-question confidence.
    Ensemble(EnsembleArgs),
    /// Measure inference throughput at context lengths C and 2C.
    Bench(BenchArgs),
    /// Export context-to-question attention weights for one question.
    AttnExport(AttnExportArgs),
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct ModelArgs {
    /// Built-in architecture preset.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Architecture config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// SQuAD JSON input.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cache output.
    #[arg(long)]
    out: PathBuf,
    /// GloVe file to filter down to the tokens of --data.
    #[arg(long, requires = "glove_out")]
    glove: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    glove_dim: usize,
    /// Where the filtered GloVe vectors are written.
    #[arg(long, requires = "glove")]
    glove_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training data: SQuAD JSON or a preprocess cache.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Development data used for checkpoint selection.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Pretrained vectors; without them embeddings are random.
    #[arg(long)]
    glove: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    eval_interval: usize,
    #[arg(long, default_value_t = 500)]
    eval_examples: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 400)]
    max_context_len: usize,
    #[arg(long, default_value_t = 30)]
    max_question_len: usize,
    /// Best checkpoint output.
    #[arg(long, default_value = "convqa.ckpt")]
    checkpoint: PathBuf,
    /// Line-delimited JSON metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Predictions as {id: answer}.
    #[arg(long)]
    out: PathBuf,
    /// Predictions with token spans and confidences, for ensembling.
    #[arg(long)]
    confidences: Option<PathBuf>,
    /// Override the checkpoint's decoding rule: naive or constrained.
    #[arg(long)]
    decode: Option<String>,
    /// Override the longest constrained span, or `off`.
    #[arg(long)]
    max_span_len: Option<String>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 400)]
    max_context_len: usize,
    #[arg(long, default_value_t = 30)]
    max_question_len: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions, either format.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Name shown in the summary table.
    #[arg(long, default_value = "model")]
    name: String,
    /// Per-question scores as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Prediction files written with --confidences.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write {id: answer} instead of the extended format.
    #[arg(long)]
    answers_only: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 400)]
    context_len: usize,
    #[arg(long, default_value_t = 30)]
    question_len: usize,
    #[arg(long, default_value_t = 8)]
    examples: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Vocabulary size of the random embedding table.
    #[arg(long, default_value_t = 1000)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttnExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    example_id: String,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Optional grayscale PNG rendering.
    #[arg(long)]
    png: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    max_context_len: usize,
    #[arg(long, default_value_t = 30)]
    max_question_len: usize,
}

enum Failure {
    Usage(String),
    Run(convqa::Error),
}

impl From<convqa::Error> for Failure {
    fn from(e: convqa::Error) -> Self {
        match e {
            convqa::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Run(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[usage]: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> CliResult {
    let dir = cli.data_dir.as_deref();
    match cli.command {
        Command::Preprocess(a) => preprocess(a, dir),
        Command::Train(a) => train_cmd(a, dir),
        Command::Predict(a) => predict(a, dir),
        Command::Eval(a) => eval(a, dir),
        Command::Ensemble(a) => ensemble_cmd(a),
        Command::Bench(a) => bench(a),
        Command::AttnExport(a) => attn_export(a, dir),
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

/// `explicit`, else `file` inside the data directory.
fn data_path(explicit: Option<PathBuf>, dir: Option<&Path>, file: &str, flag: &str) -> CliResult<PathBuf> {
    let path = match (explicit, dir) {
        (Some(p), _) => p,
        (None, Some(d)) => d.join(file),
        (None, None) => return Err(Failure::Usage(format!("{flag} is required when CONVQA_DATA_DIR is unset"))),
    };
    existing(&path)?;
    Ok(path)
}

fn existing(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn model_config(args: &ModelArgs) -> CliResult<ModelConfig> {
    let mut cfg = match (&args.preset, &args.config) {
        (_, Some(path)) => {
            existing(path)?;
            ModelConfig::load(path)?
        }
        (Some(name), None) => ModelConfig::preset(name)?,
        (None, None) => return Err(Failure::Usage("one of --preset or --config is required".into())),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn preprocess(a: PreprocessArgs, dir: Option<&Path>) -> CliResult {
    let data = data_path(a.data, dir, "train.json", "--data")?;
    let (examples, stats) = load_squad(&data)?;
    let mut w = create(&a.out)?;
    write_cache(&mut w, &examples)?;
    w.flush()?;
    println!(
        "{} questions, {} examples, {} answers not aligned to token boundaries",
        stats.questions,
        examples.len(),
        stats.unaligned
    );
    if let (Some(glove), Some(out)) = (a.glove, a.glove_out) {
        existing(&glove)?;
        let keep = data_tokens(&[&examples]);
        let vocab = Vocab::load_glove_filtered(&glove, a.glove_dim, Some(&keep))?;
        let mut w = create(&out)?;
        for (i, token) in vocab.tokens().iter().enumerate().skip(2) {
            let row = vocab.embeddings().row(i);
            let values: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{token} {}", values.join(" "))?;
        }
        w.flush()?;
        println!("kept {} of {} data tokens with vectors", vocab.len() - 2, keep.len());
    }
    Ok(())
}

fn data_tokens(sets: &[&[QAExample]]) -> HashSet<String> {
    sets.iter()
        .flat_map(|s| s.iter())
        .flat_map(|e| e.context_tokens.iter().chain(&e.question_tokens))
        .cloned()
        .collect()
}

fn train_cmd(a: TrainArgs, dir: Option<&Path>) -> CliResult {
    let config = model_config(&a.model)?;
    let train_path = data_path(a.data, dir, "train.json", "--data")?;
    let dev_path = match (a.dev, dir) {
        (Some(p), _) => Some(p),
        (None, Some(d)) if d.join("dev.json").is_file() => Some(d.join("dev.json")),
        _ => None,
    };
    if let Some(p) = &dev_path {
        existing(p)?;
    }
    let train_set = load_examples(&train_path)?;
    let dev_set = dev_path.as_ref().map(load_examples).transpose()?;
    let mut sets: Vec<&[QAExample]> = vec![&train_set];
    if let Some(d) = &dev_set {
        sets.push(d);
    }
    let tokens = data_tokens(&sets);
    let vocab = match &a.glove {
        Some(path) => {
            existing(path)?;
            Vocab::load_glove_filtered(path, config.embedding_dim, Some(&tokens))?
        }
        None => {
            let mut sorted: Vec<String> = tokens.into_iter().collect();
            sorted.sort();
            Vocab::random(sorted, config.embedding_dim, a.seed)
        }
    };
    let mut model = Model::build(&config, vocab, a.seed)?;
    log::info!(
        "{}: {} trainable parameters, vocabulary of {}",
        config.name,
        model.count_parameters(),
        model.vocab().len()
    );
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_steps: a.steps,
        eval_interval: a.eval_interval,
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
        seed: a.seed,
        max_context_len: a.max_context_len,
        max_question_len: a.max_question_len,
        eval_examples: a.eval_examples,
        ..TrainConfig::default()
    };
    let mut metrics = a.metrics.as_deref().map(create).transpose()?;
    let report = train(
        &mut model,
        &train_set,
        dev_set.as_deref(),
        &cfg,
        TrainOutputs {
            metrics: metrics.as_mut().map(|w| w as &mut dyn Write),
            checkpoint: Some(&a.checkpoint),
        },
    )?;
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    print!("{}", report.summary_table());
    println!("checkpoint: {}", a.checkpoint.display());
    Ok(())
}

fn predict(a: PredictArgs, dir: Option<&Path>) -> CliResult {
    existing(&a.checkpoint)?;
    let data = data_path(a.data, dir, "dev.json", "--data")?;
    let mut model = Model::load(&a.checkpoint)?;
    if a.decode.is_some() || a.max_span_len.is_some() {
        let mut cfg = model.config().clone();
        if let Some(d) = &a.decode {
            cfg.set("decode", d)?;
        }
        if let Some(m) = &a.max_span_len {
            cfg.set("max_span_len", m)?;
        }
        model.set_decode(cfg.decode, cfg.max_span_len)?;
    }
    let examples = load_examples(&data)?;
    let batch = BatchConfig {
        batch_size: a.batch_size,
        max_context_len: a.max_context_len,
        max_question_len: a.max_question_len,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let chunk = a.batch_size.max(1);
    let parts: Vec<BTreeMap<String, SpanPrediction>> = pool.install(|| {
        examples
            .par_chunks(chunk)
            .map(|c| model.predict(c, batch))
            .collect::<convqa::Result<_>>()
    })?;
    let predictions: BTreeMap<String, SpanPrediction> = parts.into_iter().flatten().collect();
    let answers: BTreeMap<String, String> = predictions
        .iter()
        .map(|(id, p)| (id.clone(), p.answer_text.clone()))
        .collect();
    let mut w = create(&a.out)?;
    write_predictions(&mut w, &answers)?;
    w.flush()?;
    if let Some(path) = &a.confidences {
        let mut w = create(path)?;
        write_extended_predictions(&mut w, &predictions)?;
        w.flush()?;
    }
    let reversed = predictions.values().filter(|p| p.end < p.start).count();
    println!(
        "{} predictions, {} with end before start ({:.4})",
        predictions.len(),
        reversed,
        reversed as f64 / predictions.len().max(1) as f64
    );
    Ok(())
}

fn eval(a: EvalArgs, dir: Option<&Path>) -> CliResult {
    existing(&a.predictions)?;
    let data = data_path(a.data, dir, "dev.json", "--data")?;
    let text = fs::read_to_string(&a.predictions)?;
    let predictions = parse_predictions(&text, &a.predictions.display().to_string())?;
    let examples = load_examples(&data)?;
    let scored: Vec<QAExample> = examples.into_iter().filter(|e| !e.answer_texts.is_empty()).collect();
    let report = evaluate(&predictions, &scored)?;
    println!("EM {:.4}, F1 {:.4}", report.em, report.f1);
    print!("{}", report.summary_table(&a.name));
    if let Some(path) = &a.report {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report).map_err(convqa::Error::from)?;
        w.flush()?;
    }
    Ok(())
}

fn ensemble_cmd(a: EnsembleArgs) -> CliResult {
    let mut members = Vec::with_capacity(a.inputs.len());
    for path in &a.inputs {
        existing(path)?;
        let text = fs::read_to_string(path)?;
        members.push(parse_extended_predictions(&text, &path.display().to_string())?);
    }
    let chosen = ensemble_select(&members)?;
    let mut w = create(&a.out)?;
    if a.answers_only {
        let answers = chosen.into_iter().map(|(id, p)| (id, p.answer_text)).collect();
        write_predictions(&mut w, &answers)?;
    } else {
        write_extended_predictions(&mut w, &chosen)?;
    }
    w.flush()?;
    println!("combined {} members", members.len());
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult {
    let config = model_config(&a.model)?;
    let tokens = (0..a.vocab).map(|i| format!("t{i}"));
    let vocab = Vocab::random(tokens, config.embedding_dim, a.seed);
    let model = Model::build(&config, vocab, a.seed)?;
    let cfg = BenchConfig {
        context_len: a.context_len,
        question_len: a.question_len,
        examples: a.examples,
        repeats: a.repeats,
        seed: a.seed,
    };
    let report = scaling_report(&model, &cfg)?;
    println!("{}: {} trainable parameters", config.name, model.count_parameters());
    print!("{}", report.table());
    if let Some(r) = reference_figures(&config.name) {
        println!(
            "reference: F1 {:.1}, {} parameters, {:.0} training examples/s on a GPU",
            r.f1, r.params, r.eps
        );
    }
    Ok(())
}

fn attn_export(a: AttnExportArgs, dir: Option<&Path>) -> CliResult {
    existing(&a.checkpoint)?;
    let data = data_path(a.data, dir, "dev.json", "--data")?;
    let model = Model::load(&a.checkpoint)?;
    let examples = load_examples(&data)?;
    let example = examples
        .iter()
        .find(|e| e.id == a.example_id)
        .ok_or_else(|| Failure::Usage(format!("no example with id {:?} in {}", a.example_id, data.display())))?;
    let batch = BatchConfig {
        batch_size: 1,
        max_context_len: a.max_context_len,
        max_question_len: a.max_question_len,
    };
    let heatmap = model.attention_heatmap(example, batch)?;
    export_attention_heatmap(&heatmap, &a.out, a.png.as_deref())?;
    println!(
        "{} x {} weights written to {}",
        heatmap.context_tokens.len(),
        heatmap.question_tokens.len(),
        a.out.display()
    );
    Ok(())
}
