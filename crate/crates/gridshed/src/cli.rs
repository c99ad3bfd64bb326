//! Command-line front end. Flags may also come from a TOML file given with
//! `--config`; flags on the command line win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{CommandFactory, Parser, Subcommand};
use gridshed_core::dataset::ResamplePlan;
use gridshed_core::gats::ModelConfig;
use gridshed_core::microgrid::GenerationConfig;
use gridshed_core::train::TrainConfig;

use crate::formats::{self, AnyRecord};
use crate::parallel::Jobs;
use crate::pipeline::{self, GenerateOptions, LabelOptions};

pub const TRAIN_SEED: u64 = 123;
pub const TEST_SEED: u64 = 321;

#[derive(Debug, Parser)]
#[command(name = "gridshed", version, about = "Microgrid vulnerability assessment pipeline")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file with flag values; top-level keys apply to every stage that
    /// accepts them, `[stage]` tables to that stage only.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to the available cores).
    #[arg(long, global = true, env = "GRIDSHED_JOBS", value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate random radial microgrids as JSON Lines.
    Generate(GenerateArgs),
    /// Label microgrids with Monte Carlo expected load shedding rates.
    Label(LabelArgs),
    /// Rebalance a labeled dataset toward a flat label distribution.
    Resample(ResampleArgs),
    /// Train a model on a labeled dataset.
    Train(TrainArgs),
    /// Predict the shedding rate of every instance in a file.
    Assess(AssessArgs),
    /// Per-bus attention weights next to single-bus vulnerabilities.
    Explain(ExplainArgs),
    /// Compare a model against labels and the mean baseline.
    Evaluate(EvaluateArgs),
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1)"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn nonnegative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be nonnegative"))
    }
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 33, value_parser = clap::value_parser!(u64).range(2..))]
    pub buses: u64,
    #[arg(long, default_value_t = TRAIN_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.15, value_parser = probability)]
    pub generator_fraction: f64,
    #[arg(long, default_value_t = 1.2, value_parser = positive)]
    pub capacity_ratio: f64,
    /// Draw reactive loads from [-10, 0] instead of [-0.1, 0].
    #[arg(long)]
    pub paper_literal_q: bool,
}

#[derive(Debug, clap::Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_scenarios: u64,
    #[arg(long, default_value_t = TRAIN_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01, value_parser = probability)]
    pub p_min: f64,
    #[arg(long, default_value_t = 0.2, value_parser = probability)]
    pub p_max: f64,
}

#[derive(Debug, clap::Args)]
pub struct ResampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
    #[arg(long, default_value_t = 4000, value_parser = clap::value_parser!(u64).range(1..))]
    pub draws: u64,
    #[arg(long, default_value_t = TRAIN_SEED)]
    pub seed: u64,
    /// Write label CDFs before and after resampling.
    #[arg(long)]
    pub cdf_csv: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model_out: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 1e-4, value_parser = nonnegative)]
    pub lr: f64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub hidden: u64,
    #[arg(long, default_value_t = TRAIN_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1, value_parser = fraction)]
    pub validation_fraction: f64,
    /// Per-step loss curve as CSV (epoch, step, loss).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Training report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct AssessArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Predictions as CSV (instance, prediction).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Inference is deterministic; accepted so every stage takes a seed.
    #[arg(long, default_value_t = TEST_SEED)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Explain only this instance (0-based); all instances otherwise.
    #[arg(long)]
    pub index: Option<usize>,
    /// JSON output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot data as CSV (instance, id, attention_weight, node_vulnerability).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Inference is deterministic; accepted so every stage takes a seed.
    #[arg(long, default_value_t = TEST_SEED)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled test instances.
    #[arg(long)]
    pub test: PathBuf,
    /// In-size labeled test set for cross-size comparison.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Baseline prediction; defaults to the training-label mean stored with the model.
    #[arg(long)]
    pub baseline_mean: Option<f64>,
    /// Metrics report as JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Prediction-vs-label scatter data as CSV.
    #[arg(long)]
    pub scatter_csv: Option<PathBuf>,
    /// Inference is deterministic; accepted so every stage takes a seed.
    #[arg(long, default_value_t = TEST_SEED)]
    pub seed: u64,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn toml_flag(key: &str, value: &toml::Value) -> anyhow::Result<Vec<OsString>> {
    let flag = format!("--{}", key.replace('_', "-"));
    let text = match value {
        toml::Value::Boolean(true) => return Ok(vec![flag.into()]),
        toml::Value::Boolean(false) => return Ok(Vec::new()),
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        other => bail!("config key `{key}`: unsupported value {other}"),
    };
    Ok(vec![flag.into(), text.into()])
}

/// Inserts flags from the config file right after the subcommand name so
/// that later command-line flags override them.
fn merge_config(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let cmd = Cli::command();
    let names: Vec<&str> = cmd.get_subcommands().map(|c| c.get_name()).collect();
    let Some(pos) = args.iter().position(|a| names.iter().any(|n| a.to_str() == Some(n))) else {
        return Ok(args);
    };
    let sub_name = args[pos].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&sub_name).expect("listed subcommand");
    let accepts = |key: &str| {
        let long = key.replace('_', "-");
        sub.get_arguments().chain(cmd.get_arguments()).any(|a| a.get_long() == Some(long.as_str()))
    };

    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    let mut injected = Vec::new();
    for (key, value) in &table {
        if key == "config" || value.is_table() {
            continue;
        }
        if accepts(key) {
            injected.extend(toml_flag(key, value)?);
        }
    }
    if let Some(stage) = table.get(&sub_name) {
        let stage = stage.as_table().with_context(|| format!("config key `{sub_name}` must be a table"))?;
        for (key, value) in stage {
            if !accepts(key) {
                bail!("config [{sub_name}]: unknown key `{key}`");
            }
            injected.extend(toml_flag(key, value)?);
        }
    }
    let mut merged = args[..=pos].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&args[pos + 1..]);
    Ok(merged)
}

fn jobs_from(cli_jobs: Option<u32>) -> anyhow::Result<Jobs> {
    let n = match cli_jobs {
        Some(n) => n as usize,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Jobs::new(n).context("starting worker threads")
}

fn read_records(path: &Path) -> anyhow::Result<Vec<AnyRecord>> {
    let records: Vec<AnyRecord> = formats::read_jsonl(path)?;
    if records.is_empty() {
        bail!("{}: no records", path.display());
    }
    Ok(records)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let jobs = jobs_from(cli.jobs)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Label(a) => cmd_label(a, &jobs),
        Command::Resample(a) => cmd_resample(a),
        Command::Train(a) => cmd_train(a, &jobs),
        Command::Assess(a) => cmd_assess(a, &jobs),
        Command::Explain(a) => cmd_explain(a, &jobs),
        Command::Evaluate(a) => cmd_evaluate(a, &jobs),
    }
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let opts = GenerateOptions {
        n_instances: a.n as usize,
        base: GenerationConfig {
            n_buses: a.buses as usize,
            generator_fraction: a.generator_fraction,
            capacity_ratio: a.capacity_ratio,
            seed: a.seed,
            ..GenerationConfig::default()
        },
        literal_q: a.paper_literal_q,
    };
    let grids = pipeline::generate(&opts)?;
    formats::write_jsonl(&a.out, &grids)?;
    println!("wrote {} microgrids ({} buses) to {}", grids.len(), a.buses, a.out.display());
    Ok(())
}

fn cmd_label(a: LabelArgs, jobs: &Jobs) -> anyhow::Result<()> {
    if a.p_min > a.p_max {
        bail!("--p-min {} exceeds --p-max {}", a.p_min, a.p_max);
    }
    let records = read_records(&a.input)?;
    let grids = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.microgrid()
                .cloned()
                .with_context(|| format!("{}: record {} is not a microgrid", a.input.display(), i + 1))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let opts = LabelOptions { n_scenarios: a.n_scenarios as usize, seed: a.seed, p_min: a.p_min, p_max: a.p_max };
    let labeled = pipeline::label(&grids, &opts, jobs)?;
    formats::write_jsonl(&a.out, &labeled)?;
    let mean_se = labeled.iter().map(|l| l.std_error).sum::<f64>() / labeled.len() as f64;
    println!(
        "labeled {} instances with {} scenarios each (mean std_error {mean_se:.4}) to {}",
        labeled.len(),
        a.n_scenarios,
        a.out.display()
    );
    Ok(())
}

fn cmd_resample(a: ResampleArgs) -> anyhow::Result<()> {
    let records = pipeline::labeled_records(&read_records(&a.input)?)?;
    let plan = ResamplePlan { n_bins: a.bins as usize, n_draws: a.draws as usize, seed: a.seed };
    let outcome = pipeline::resample_stage(&records, &plan)?;
    formats::write_dataset(&a.out, &outcome.records)?;
    if let Some(csv) = &a.cdf_csv {
        let rows =
            outcome.cdf_rows(&records).into_iter().map(|(s, x, c)| vec![s.to_string(), x.to_string(), c.to_string()]);
        formats::write_csv(csv, &["series", "label", "cdf"], rows)?;
    }
    println!(
        "resampled {} -> {} records; KS distance to uniform {:.4} -> {:.4}",
        records.len(),
        outcome.records.len(),
        outcome.ks_before,
        outcome.ks_after
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, jobs: &Jobs) -> anyhow::Result<()> {
    let records = pipeline::labeled_records(&read_records(&a.data)?)?;
    let cfg = TrainConfig {
        epochs: a.epochs as usize,
        learning_rate: a.lr,
        batch_size: a.batch_size as usize,
        seed: a.seed,
        validation_fraction: a.validation_fraction,
    };
    let outcome = pipeline::train_stage(&records, &ModelConfig::with_hidden(a.hidden as usize), &cfg, jobs)?;
    formats::save_model(&a.model_out, &outcome.model, Some(outcome.train_label_mean))?;
    if let Some(csv) = &a.loss_csv {
        let rows =
            outcome.report.steps.iter().map(|p| vec![p.epoch.to_string(), p.step.to_string(), p.loss.to_string()]);
        formats::write_csv(csv, &["epoch", "step", "loss"], rows)?;
    }
    if let Some(path) = &a.report {
        formats::write_json(path, &outcome.report)?;
    }
    let last = outcome.report.epoch_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained on {} records ({} validation) for {} epochs; final training loss {last:.6}; model written to {}",
        outcome.report.n_train,
        outcome.report.n_validation,
        a.epochs,
        a.model_out.display()
    );
    Ok(())
}

fn cmd_assess(a: AssessArgs, jobs: &Jobs) -> anyhow::Result<()> {
    let model = formats::load_model(&a.model)?;
    let records = read_records(&a.input)?;
    let result = pipeline::assess(&model, &records, jobs)?;
    println!("instance,prediction");
    for (i, y) in result.predictions.iter().enumerate() {
        println!("{i},{y}");
    }
    if let Some(out) = &a.out {
        let rows = result.predictions.iter().enumerate().map(|(i, y)| vec![i.to_string(), y.to_string()]);
        formats::write_csv(out, &["instance", "prediction"], rows)?;
    }
    println!("# assessed {} instances, wall time {:.6} s", result.predictions.len(), result.wall_time);
    Ok(())
}

fn cmd_explain(a: ExplainArgs, jobs: &Jobs) -> anyhow::Result<()> {
    let model = formats::load_model(&a.model)?;
    let records = read_records(&a.input)?;
    let indices: Vec<usize> = match a.index {
        Some(i) if i >= records.len() => bail!("--index {i} out of range ({} instances)", records.len()),
        Some(i) => vec![i],
        None => (0..records.len()).collect(),
    };
    let explanations = indices
        .iter()
        .map(|&i| {
            let mg =
                records[i].microgrid().with_context(|| format!("record {} carries no bus data to explain", i + 1))?;
            Ok(pipeline::explain(&model, mg, i, jobs)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    match &a.out {
        Some(path) => formats::write_json(path, &explanations)?,
        None => println!("{}", serde_json::to_string_pretty(&explanations)?),
    }
    if let Some(csv) = &a.csv {
        let rows = explanations.iter().flat_map(|e| {
            e.buses.iter().map(move |b| {
                vec![
                    e.instance.to_string(),
                    b.id.to_string(),
                    b.attention_weight.to_string(),
                    b.node_vulnerability.to_string(),
                ]
            })
        });
        formats::write_csv(csv, &["instance", "id", "attention_weight", "node_vulnerability"], rows)?;
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, jobs: &Jobs) -> anyhow::Result<()> {
    let artifact = formats::load_model_artifact(&a.model)?;
    let stored_mean = artifact.train_label_mean;
    let model = artifact.into_model(&a.model)?;
    let Some(baseline_mean) = a.baseline_mean.or(stored_mean) else {
        bail!("model has no stored training-label mean; pass --baseline-mean");
    };
    let test = pipeline::evaluate(&model, &read_records(&a.test)?, baseline_mean, jobs)?;
    let reference = a
        .reference
        .as_deref()
        .map(|p| -> anyhow::Result<_> { Ok(pipeline::evaluate(&model, &read_records(p)?, baseline_mean, jobs)?) })
        .transpose()?;
    if let Some(csv) = &a.scatter_csv {
        let rows = test
            .labels
            .iter()
            .zip(&test.predictions)
            .enumerate()
            .map(|(i, (y, p))| vec![i.to_string(), y.to_string(), p.to_string()]);
        formats::write_csv(csv, &["instance", "label", "prediction"], rows)?;
    }
    let report = pipeline::evaluate_report(test, reference);
    match &a.out {
        Some(path) => {
            formats::write_json(path, &report)?;
            println!(
                "model mse {:.6} mae {:.6}; baseline mse {:.6}",
                report.test.model.mse, report.test.model.mae, report.test.baseline.mse
            );
            if let Some(d) = report.mse_degradation {
                println!("mse relative to reference set: {d:.3}x");
            }
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
