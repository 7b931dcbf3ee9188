//! `layerlens` command-line driver.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use layerlens::adversarial::{build_binary, build_multiclass, verify, AdversarialSpec};
use layerlens::analysis::{
    emit_heatmap, pearson_r, rank_confusion, wilcoxon_signed_rank, zscore_variance,
    HeatmapMatrix, DEFAULT_BAND,
};
use layerlens::metrics::{evaluate_accuracy, score_all, MetricKind, RelevanceReport, ScoreOptions};
use layerlens::model::{ModelConfig, PassCounter};
use layerlens::pruning::{prune, Amount, PruneConfig, Strategy};
use layerlens::tasks::{generate, Baseline, CalibrationDataset, TaskKind, TaskSpec};
use layerlens::trainer::{heal, train, TrainConfig};
use layerlens::Model;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "layerlens", version, about = "Layer relevance scoring and pruning for toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and test splits of a synthetic task.
    Generate(GenerateArgs),
    /// Train a model on a synthetic task.
    Train(TrainArgs),
    /// Score every block of a model with one relevance metric.
    Score(ScoreArgs),
    /// Remove blocks by a metric, optionally healing afterwards.
    Prune(PruneArgs),
    /// Build and certify the cosine-adversarial model.
    Adversarial(AdversarialArgs),
    /// Statistics and heatmaps over relevance reports.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Serialize)]
struct TaskArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 9)]
    max_len: usize,
    /// Modulus for modsum, key count for lookup.
    #[arg(long, default_value_t = 4)]
    symbols: usize,
    #[arg(long, default_value_t = 256)]
    n_train: usize,
    #[arg(long, default_value_t = 64)]
    n_test: usize,
}

impl TaskArgs {
    fn spec(&self, seed: u64) -> TaskSpec {
        TaskSpec::new(self.task, self.min_len, self.max_len, self.symbols, seed)
    }
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Defaults to 4 × d_model.
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    no_layernorm: bool,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Global gradient-norm clip; 0 disables it.
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    /// Keep a checkpoint every N optimizer steps (0: first and last only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Train on next-token loss at every position.
    #[arg(long)]
    all_tokens: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum BaselineArg {
    /// One over each instance's option count.
    Uniform,
    /// Sum of squared label frequencies.
    Marginal,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Uniform => Baseline::UniformOptions,
            BaselineArg::Marginal => Baseline::LabelMarginal,
        }
    }
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metric: MetricKind,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long, value_enum, default_value_t = BaselineArg::Uniform)]
    baseline: BaselineArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration set used for scoring and healing.
    #[arg(long)]
    data: PathBuf,
    /// Held-out set; its accuracies go into summary.json.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    metric: MetricKind,
    #[arg(long, default_value = "iterative")]
    strategy: Strategy,
    /// Fraction of blocks to remove, floored.
    #[arg(long, conflicts_with = "remove", required_unless_present = "remove")]
    ratio: Option<f64>,
    /// Exact number of blocks to remove.
    #[arg(long)]
    remove: Option<usize>,
    /// Original block indices that are never removed.
    #[arg(long, value_delimiter = ',')]
    protect: Vec<usize>,
    #[arg(long, value_enum, default_value_t = BaselineArg::Uniform)]
    baseline: BaselineArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fine-tune the pruned model for this many epochs.
    #[arg(long, default_value_t = 0)]
    heal_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    heal_lr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AdversarialArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Number of calibration instances.
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// Keep the plain mirror mapping for odd class counts.
    #[arg(long)]
    no_relabel_odd: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Correlation,
    Confusion,
    Variance,
    Wilcoxon,
    Heatmap,
}

#[derive(Args, Serialize)]
struct AnalyzeArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Paired reports: true scores for correlation and confusion, the second
    /// metric for wilcoxon.
    #[arg(long, num_args = 1..)]
    against: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BAND)]
    band: usize,
    #[arg(long, default_value = "relevance")]
    title: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("LAYERLENS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow!("LAYERLENS_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Prune(a) => cmd_prune(&a),
        Command::Adversarial(a) => cmd_adversarial(&a),
        Command::Analyze(a) => cmd_analyze(&a),
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(m: &mut Manifest, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    m.output(&path);
    Ok(())
}

fn load_model(m: &mut Manifest, path: &Path) -> Result<Model> {
    m.input(path)?;
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_data(m: &mut Manifest, path: &Path) -> Result<CalibrationDataset> {
    m.input(path)?;
    CalibrationDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn save_data(m: &mut Manifest, d: &CalibrationDataset, path: PathBuf) -> Result<()> {
    d.save(&path)?;
    m.output(&path);
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut m = Manifest::new("generate", a, Some(a.seed))?;
    let (train_set, test_set) = generate(&a.task.spec(a.seed), a.task.n_train, a.task.n_test)?;
    out_dir(&a.out)?;
    save_data(&mut m, &train_set, a.out.join("train.jsonl"))?;
    save_data(&mut m, &test_set, a.out.join("test.jsonl"))?;
    m.write(&a.out)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut m = Manifest::new("train", a, Some(a.seed))?;
    let spec = a.task.spec(a.seed);
    let (train_set, test_set) = generate(&spec, a.task.n_train, a.task.n_test)?;
    let mut config = ModelConfig::new(
        a.layers,
        a.d_model,
        a.heads,
        a.d_ff.unwrap_or(4 * a.d_model),
        spec.vocab_size(),
        a.task.max_len,
    );
    config.use_layernorm = !a.no_layernorm;
    let hyper = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        grad_clip: a.grad_clip,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        all_tokens: a.all_tokens,
        ..TrainConfig::default()
    };
    let (model, series) = train::<f64>(config, &train_set, &hyper)?;
    let test_acc = evaluate_accuracy(&model, &test_set, &PassCounter::new())?;

    out_dir(&a.out)?;
    save_data(&mut m, &train_set, a.out.join("train.jsonl"))?;
    save_data(&mut m, &test_set, a.out.join("test.jsonl"))?;
    let model_path = a.out.join("model.json");
    model.save(&model_path)?;
    m.output(&model_path);
    let ckpt = a.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt)?;
    series.save(&ckpt)?;
    m.output(&ckpt);
    let summary = serde_json::json!({
        "train_accuracy": series.checkpoints.last().map(|c| c.train_accuracy),
        "test_accuracy": test_acc,
        "steps": series.losses.len(),
    });
    write(&mut m, a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    m.write(&a.out)?;
    println!("test accuracy {test_acc:.4}");
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let mut m = Manifest::new("score", a, Some(a.seed))?;
    let model = load_model(&mut m, &a.model)?;
    let data = load_data(&mut m, &a.data)?;
    let opts = ScoreOptions { baseline: a.baseline.into(), seed: a.seed };
    let report = score_all(&model, &data, a.metric, &opts)?;
    out_dir(&a.out)?;
    let path = a.out.join(match a.format {
        Format::Csv => "report.csv",
        Format::Json => "report.json",
    });
    report.save(&path)?;
    m.output(&path);
    m.write(&a.out)?;
    for (o, s) in report.origin.iter().zip(&report.scores) {
        println!("layer {o}\t{s}");
    }
    Ok(())
}

fn cmd_prune(a: &PruneArgs) -> Result<()> {
    let mut m = Manifest::new("prune", a, Some(a.seed))?;
    let model = load_model(&mut m, &a.model)?;
    let data = load_data(&mut m, &a.data)?;
    let test = a.test_data.as_deref().map(|p| load_data(&mut m, p)).transpose()?;
    let amount = match (a.ratio, a.remove) {
        (Some(r), _) => Amount::Ratio(r),
        (None, Some(k)) => Amount::Layers(k),
        (None, None) => bail!("one of --ratio or --remove is required"),
    };
    let mut config = PruneConfig::new(a.metric, a.strategy, amount);
    config.protect = a.protect.clone();
    config.seed = a.seed;
    config.baseline = a.baseline.into();
    let (pruned, trace) = prune(&model, &data, &config)?;

    out_dir(&a.out)?;
    let pruned_path = a.out.join("pruned.json");
    pruned.save(&pruned_path)?;
    m.output(&pruned_path);
    write(&mut m, a.out.join("trace.jsonl"), trace.to_jsonl())?;
    let (csv, svg) = (a.out.join("heatmap.csv"), a.out.join("heatmap.svg"));
    emit_heatmap(&trace.heatmap(), &csv, Some(&svg))?;
    m.output(&csv);
    m.output(&svg);

    let counter = PassCounter::new();
    let test_acc = |mdl: &Model| test.as_ref().map(|t| evaluate_accuracy(mdl, t, &counter)).transpose();
    let mut summary = serde_json::json!({
        "removed": trace.removed(),
        "initial_accuracy": trace.initial_accuracy,
        "pruned_accuracy": trace.final_accuracy(),
        "initial_test_accuracy": test_acc(&model)?,
        "pruned_test_accuracy": test_acc(&pruned)?,
    });
    if a.heal_epochs > 0 {
        let hyper = TrainConfig {
            epochs: a.heal_epochs,
            learning_rate: a.heal_lr,
            seed: a.seed,
            ..TrainConfig::default()
        };
        let (healed, curve) = heal(&pruned, &data, &hyper)?;
        let healed_path = a.out.join("healed.json");
        healed.save(&healed_path)?;
        m.output(&healed_path);
        let mut rows = String::from("# layerlens-healing/1\nepoch,accuracy\n");
        for (e, acc) in curve.iter().enumerate() {
            rows.push_str(&format!("{e},{acc}\n"));
        }
        write(&mut m, a.out.join("healing.csv"), rows)?;
        summary["healed_accuracy"] = curve.iter().cloned().fold(f64::MIN, f64::max).into();
        summary["healed_test_accuracy"] = test_acc(&healed)?.into();
    }
    write(&mut m, a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    m.write(&a.out)?;
    println!("removed {:?}, accuracy {:.4}", trace.removed(), trace.final_accuracy());
    Ok(())
}

fn cmd_adversarial(a: &AdversarialArgs) -> Result<()> {
    let mut m = Manifest::new("adversarial", a, Some(a.seed))?;
    let mut spec = AdversarialSpec::new(a.epsilon, a.delta, a.classes);
    spec.relabel_odd = !a.no_relabel_odd;
    spec.validate()?;
    spec.m()?;
    let (model, data) = if a.classes == 2 {
        let task = TaskSpec::new(TaskKind::Parity, 1, 16, 0, a.seed);
        build_binary(&generate(&task, a.n, 1)?.0, &spec)?
    } else {
        let task = TaskSpec::new(TaskKind::Modsum, 1, 12, a.classes, a.seed);
        build_multiclass(&generate(&task, a.n, 1)?.0, &spec)?
    };
    let cert = verify(&model, &data, &spec)?;

    out_dir(&a.out)?;
    let model_path = a.out.join("model.json");
    model.save(&model_path)?;
    m.output(&model_path);
    save_data(&mut m, &data, a.out.join("data.jsonl"))?;
    write(&mut m, a.out.join("certificate.json"), cert.to_json() + "\n")?;
    m.write(&a.out)?;
    if !cert.passed {
        bail!("certificate failed: {}", cert.failed().join(", "));
    }
    println!("certificate passed: M = {}, scores {:?}", cert.m, cert.scores);
    Ok(())
}

fn load_reports(m: &mut Manifest, paths: &[PathBuf]) -> Result<Vec<RelevanceReport>> {
    paths
        .iter()
        .map(|p| {
            m.input(p)?;
            RelevanceReport::load(p).with_context(|| format!("loading report {}", p.display()))
        })
        .collect()
}

fn paired(a: &AnalyzeArgs, n: usize) -> Result<()> {
    if a.against.len() != n {
        bail!("--against needs one report per --reports entry ({n}), got {}", a.against.len());
    }
    Ok(())
}

fn scores(reports: &[RelevanceReport]) -> Vec<Vec<f64>> {
    reports.iter().map(|r| r.scores.clone()).collect()
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let mut m = Manifest::new("analyze", a, None)?;
    let reports = load_reports(&mut m, &a.reports)?;
    let against = load_reports(&mut m, &a.against)?;
    out_dir(&a.out)?;
    match a.mode {
        Mode::Correlation => {
            paired(a, reports.len())?;
            let mut rows = String::from("# layerlens-correlation/1\nreport,against,r\n");
            let mut rs = Vec::new();
            for ((x, y), (px, py)) in reports.iter().zip(&against).zip(a.reports.iter().zip(&a.against)) {
                let r = pearson_r(&x.scores, &y.scores)?;
                rows.push_str(&format!("{},{},{r}\n", px.display(), py.display()));
                rs.push(r);
            }
            write(&mut m, a.out.join("correlation.csv"), rows)?;
            println!("mean r {:.4}", rs.iter().sum::<f64>() / rs.len() as f64);
        }
        Mode::Confusion => {
            paired(a, reports.len())?;
            let c = rank_confusion(&scores(&against), &scores(&reports), a.band)?;
            let doc = serde_json::json!({ "format": "layerlens-confusion/1", "confusion": c });
            write(&mut m, a.out.join("confusion.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
            println!("misranked {:.4} (near {:.4}, far {:.4})", c.off_diagonal_rate, c.near_band_rate, c.far_rate);
        }
        Mode::Variance => {
            let v = zscore_variance(&scores(&reports))?;
            let doc = serde_json::json!({ "format": "layerlens-variance/1", "variance": v });
            write(&mut m, a.out.join("variance.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
            println!("mean variance {:.4}, sd {:.4}", v.mean, v.sd);
        }
        Mode::Wilcoxon => {
            if against.is_empty() {
                bail!("wilcoxon compares two report sets; pass the second with --against");
            }
            let va = zscore_variance(&scores(&reports))?;
            let vb = zscore_variance(&scores(&against))?;
            let w = wilcoxon_signed_rank(&va.per_layer, &vb.per_layer)?;
            let doc = serde_json::json!({
                "format": "layerlens-wilcoxon/1",
                "variance_reports": va.per_layer,
                "variance_against": vb.per_layer,
                "test": w,
            });
            write(&mut m, a.out.join("wilcoxon.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
            println!("W = {}, p = {:.4}", w.w, w.p);
        }
        Mode::Heatmap => {
            let labels = a
                .reports
                .iter()
                .map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into()))
                .collect();
            let h = HeatmapMatrix::from_reports(&a.title, labels, &reports)?;
            let (csv, svg) = (a.out.join("heatmap.csv"), a.out.join("heatmap.svg"));
            emit_heatmap(&h, &csv, Some(&svg))?;
            m.output(&csv);
            m.output(&svg);
        }
    }
    m.write(&a.out)?;
    Ok(())
}
