//! The `afpnet` command: dataset deduplication, training, evaluation,
//! prediction, attribution reports and scaling benchmarks.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 when the data or a model
//! artifact is rejected.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use afpnet::bench::{count_flops, measure_scaling, CostModel, ScalingReport};
use afpnet::eval::{compute_metrics, project_features};
use afpnet::explain::{attribute, render_report, ReportFormat, DEFAULT_DEPTH};
use afpnet::ingest::{dedup_with_report, load_manifest_filtered, split_corpus, write_manifest};
use afpnet::train::{encode_corpus, run_trials, score_all};
use afpnet::{checkpoint, Detector, ModelConfig, TrainConfig, VulnType};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] afpnet::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "afpnet", version, about = "Smart-contract vulnerability detection", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collapse contracts whose normalized sources coincide.
    Dedup(DedupArgs),
    /// Split a corpus, train one model per trial and record metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled manifest.
    Evaluate(EvaluateArgs),
    /// Classify one source file.
    Predict(PredictArgs),
    /// Render the snippets behind a prediction as markdown or HTML.
    Explain(ExplainArgs),
    /// Time forward passes over growing input lengths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vuln_type: Option<VulnType>,
    /// Output directory for `manifest.jsonl` and `dedup_report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vuln_type: Option<VulnType>,
    /// Model configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training configuration JSON.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub class_weight: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    /// Print per-epoch test metrics to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vuln_type: Option<VulnType>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a 2-D projection of the classifier inputs (id, x, y, label).
    #[arg(long)]
    pub emit_pca: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Print the highest-ranked snippets.
    #[arg(long)]
    pub attribution: bool,
    /// Print the token stream with vocabulary ids.
    #[arg(long)]
    pub dump_tokens: bool,
    /// Also write the prediction as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "html")]
    pub format: ReportFormat,
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    pub depth: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    /// Run the convolution banks in parallel instead of on one thread.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

struct Run {
    subcommand: &'static str,
    started_at: String,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    config: serde_json::Value,
}

impl Run {
    fn start(subcommand: &'static str) -> Self {
        Run {
            subcommand,
            started_at: chrono::Utc::now().to_rfc3339(),
            seed: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: serde_json::Value::Null,
        }
    }

    fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.into(), path.display().to_string());
    }

    fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.into(), path.display().to_string());
    }

    fn finish(self, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at: self.started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            config: self.config,
        };
        write_json(path, &manifest)
    }
}

/// Pretty JSON with keys sorted at every level.
pub fn to_sorted_json<S: Serialize>(value: &S) -> Result<String> {
    let value = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, to_sorted_json(value)?).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// `out.json` -> `out.run.json`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("run.json")
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Dedup(a) => dedup(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Explain(a) => explain(a),
        Command::Bench(a) => bench(a),
    }
}

fn dedup(a: DedupArgs) -> Result<()> {
    let mut run = Run::start("dedup");
    run.input("manifest", &a.manifest);
    let corpus = load_manifest_filtered(&a.manifest, a.vuln_type)?;
    let (kept, report) = dedup_with_report(&corpus)?;
    create_dir(&a.out)?;
    let manifest = a.out.join("manifest.jsonl");
    let report_path = a.out.join("dedup_report.json");
    write_manifest(&kept, &manifest)?;
    write_json(&report_path, &report)?;
    run.output("manifest", &manifest);
    run.output("report", &report_path);
    run.config = serde_json::json!({ "vuln_type": a.vuln_type });
    run.finish(&a.out.join("run_manifest.json"))?;
    println!(
        "kept {} of {} contracts ({} duplicate groups)",
        report.output_count,
        report.input_count,
        report.groups.len()
    );
    Ok(())
}

fn train_configs(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let model = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    let mut t = match &a.train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.trials {
        t.trials = v;
    }
    if let Some(v) = a.clip_norm {
        t.clip_norm = Some(v);
    }
    if let Some(v) = a.class_weight {
        t.class_weight = v;
    }
    if let Some(v) = a.train_fraction {
        t.train_fraction = v;
    }
    if let Some(v) = a.min_freq {
        t.min_freq = v;
    }
    model.validate()?;
    t.validate()?;
    Ok((model, t))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run = Run::start("train");
    run.input("manifest", &a.manifest);
    if let Some(p) = &a.config {
        run.input("config", p);
    }
    if let Some(p) = &a.train_config {
        run.input("train_config", p);
    }
    let (model_config, train_config) = train_configs(&a)?;
    run.seed = Some(train_config.seed);
    run.config = serde_json::json!({
        "model": model_config,
        "train": train_config,
        "vuln_type": a.vuln_type,
    });

    let corpus = load_manifest_filtered(&a.manifest, a.vuln_type)?;
    let (train_split, test_split) = split_corpus(&corpus, train_config.train_fraction, train_config.seed)?;
    create_dir(&a.out)?;
    let train_manifest = a.out.join("train_manifest.jsonl");
    let test_manifest = a.out.join("test_manifest.jsonl");
    write_manifest(&train_split, &train_manifest)?;
    write_manifest(&test_split, &test_manifest)?;
    run.output("train_manifest", &train_manifest);
    run.output("test_manifest", &test_manifest);

    let verbose = a.verbose;
    let mut trial_outputs = Vec::new();
    let summary = run_trials::<f32, CliError>(&train_split, &test_split, &model_config, &train_config, |trial, outcome| {
        let dir = a.out.join(format!("trial{trial}"));
        create_dir(&dir)?;
        checkpoint::save(&outcome.detector, dir.join("model.ckpt"))?;
        outcome.detector.vocab.save(dir.join("vocab.json"))?;
        let mut history = outcome.history.clone();
        history.checkpoint = Some("model.ckpt".into());
        write_json(&dir.join("history.json"), &history)?;
        write_json(&dir.join("metrics.json"), &history.final_metrics)?;
        if verbose {
            for e in &history.epochs {
                eprintln!(
                    "trial {trial} epoch {} loss {:.6} test F1 {:.4}",
                    e.epoch, e.train_loss, e.test.f1
                );
            }
        }
        trial_outputs.push(dir);
        Ok(())
    })?;
    for (i, dir) in trial_outputs.iter().enumerate() {
        run.output(&format!("trial{i}"), dir);
    }
    let summary_path = a.out.join("summary.json");
    write_json(&summary_path, &summary)?;
    run.output("summary", &summary_path);
    run.finish(&a.out.join("run_manifest.json"))?;
    println!(
        "{} trial(s): mean precision {:.2}% recall {:.2}% F1 {:.2}%",
        summary.trials.len(),
        summary.mean_precision_pct,
        summary.mean_recall_pct,
        summary.mean_f1_pct
    );
    Ok(())
}

fn load_detector(path: &Path) -> Result<Detector<f32>> {
    Ok(checkpoint::load::<f32>(path)?)
}

#[derive(Debug, Serialize)]
struct PcaRow<'a> {
    id: &'a str,
    x: f64,
    y: f64,
    label: u8,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut run = Run::start("evaluate");
    run.input("checkpoint", &a.checkpoint);
    run.input("manifest", &a.manifest);
    let detector = load_detector(&a.checkpoint)?;
    let corpus = load_manifest_filtered(&a.manifest, a.vuln_type)?;
    if corpus.is_empty() {
        return Err(afpnet::Error::Corpus("manifest holds no contracts".into()).into());
    }
    let encoded = encode_corpus(&corpus, &detector.vocab)?;
    let scored = score_all(&detector.model, &encoded)?;
    let decisions: Vec<u8> = scored.iter().map(|s| s.decision).collect();
    let labels = corpus.labels();
    let metrics = compute_metrics(&decisions, &labels)?;
    ensure_parent(&a.out)?;
    write_json(&a.out, &metrics)?;
    run.output("metrics", &a.out);

    if let Some(pca_path) = &a.emit_pca {
        let features: Vec<Vec<f64>> = scored.into_iter().map(|s| s.features).collect();
        let projection = project_features(&features, 2)?;
        ensure_parent(pca_path)?;
        let csv_err = |source| CliError::Csv {
            path: pca_path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(pca_path).map_err(csv_err)?;
        for ((c, xy), &label) in corpus.iter().zip(&projection.coords).zip(&labels) {
            w.serialize(PcaRow {
                id: &c.id,
                x: xy[0],
                y: xy[1],
                label,
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| io_err(pca_path)(e))?;
        if projection.degenerate {
            eprintln!("warning: all feature vectors coincide; projection is all zeros");
        }
        run.output("pca", pca_path);
    }
    run.config = serde_json::json!({ "model": detector.config(), "vuln_type": a.vuln_type });
    run.finish(&sidecar(&a.out))?;
    println!(
        "precision {:.2}% recall {:.2}% F1 {:.2}% on {} contracts",
        metrics.precision_pct,
        metrics.recall_pct,
        metrics.f1_pct,
        metrics.total()
    );
    Ok(())
}

fn read_source(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn predict(a: PredictArgs) -> Result<()> {
    let detector = load_detector(&a.checkpoint)?;
    let source = read_source(&a.input)?;
    if a.dump_tokens {
        let (tokens, ids) = detector.encode_source(&source)?;
        for (i, (t, id)) in tokens.tokens().iter().zip(&ids).enumerate() {
            println!("{i}\t{id}\t{}\t{}..{}", t.text, t.span.start, t.span.end);
        }
    }
    let prediction = if a.attribution {
        detector.predict_with_attribution(&source)?
    } else {
        detector.predict_source(&source)?
    };
    println!("probability {:.6}", prediction.probability);
    println!("decision {} (threshold {})", prediction.decision, prediction.threshold);
    if a.attribution {
        let report = attribute(&detector, &source, 10)?;
        println!("top snippets:");
        for (i, s) in report.snippets.iter().enumerate() {
            let text = s.text.split_whitespace().collect::<Vec<_>>().join(" ");
            println!("{:>3}. {:.6}  bytes {}..{}  {text}", i + 1, s.value, s.start, s.end);
        }
    }
    if let Some(out) = &a.out {
        let mut run = Run::start("predict");
        run.input("checkpoint", &a.checkpoint);
        run.input("input", &a.input);
        ensure_parent(out)?;
        write_json(out, &prediction)?;
        run.output("prediction", out);
        run.config = serde_json::json!({ "model": detector.config(), "attribution": a.attribution });
        run.finish(&sidecar(out))?;
    }
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let mut run = Run::start("explain");
    run.input("checkpoint", &a.checkpoint);
    run.input("input", &a.input);
    let detector = load_detector(&a.checkpoint)?;
    let source = read_source(&a.input)?;
    let report = attribute(&detector, &source, a.depth)?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, render_report(&report, a.format)).map_err(io_err(&a.out))?;
    run.output("report", &a.out);
    run.config = serde_json::json!({ "format": a.format, "depth": a.depth });
    run.finish(&sidecar(&a.out))?;
    println!("wrote {} snippets to {}", report.snippets.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchOutput {
    scaling: ScalingReport,
    cost_models: Vec<CostModel>,
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut run = Run::start("bench");
    run.input("checkpoint", &a.checkpoint);
    run.seed = Some(a.seed);
    let detector = load_detector(&a.checkpoint)?;
    let model = &detector.model;
    let cost_models = a
        .lengths
        .iter()
        .map(|&n| count_flops(model.config(), n))
        .collect::<afpnet::Result<Vec<_>>>()?;
    let scaling = if a.parallel {
        measure_scaling(model, &a.lengths, a.repeats, true, a.seed)?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        pool.install(|| measure_scaling(model, &a.lengths, a.repeats, false, a.seed))?
    };
    ensure_parent(&a.out)?;
    for t in &scaling.timings {
        println!(
            "n={:>6}  median {:.6}s  (min {:.6}s, max {:.6}s)",
            t.n, t.median_secs, t.min_secs, t.max_secs
        );
    }
    write_json(&a.out, &BenchOutput { scaling, cost_models })?;
    run.output("bench", &a.out);
    run.config = serde_json::json!({
        "lengths": a.lengths,
        "repeats": a.repeats,
        "parallel": a.parallel,
        "model": model.config(),
    });
    run.finish(&sidecar(&a.out))?;
    Ok(())
}
