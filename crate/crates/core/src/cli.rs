//! `structcfn` command line: train, cross-validate, explain, synthetic validation, stability.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baseline::mlp_param_count;
use crate::datakit::{load_csv, synth_generate, Dataset, SynthMode, SynthSpec};
use crate::document::{write_atomic, AnyModel, ModelDocument};
use crate::error::{Error, Result};
use crate::experiments::{
    cross_validate, fit, fit_baseline, metric_name, run_stability, run_synthetic, standardize_all,
};
use crate::gradengine::hex_string;
use crate::interpret::{dependency_matrix, extract_symbolic, gate_physics, linspace, DEFAULT_EDGE_THRESHOLD};
use crate::structnet::{param_count, ModelConfig, Task, Variant};
use crate::training::evaluate_rows;

#[derive(Debug, Parser)]
#[command(
    name = "structcfn",
    version,
    about = "Interpretable tabular models with masked dependency nodes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on a CSV and write its model document.
    Train(TrainCmd),
    /// k-fold cross-validation, optionally against the MLP baseline.
    Cv(CvCmd),
    /// Dependency matrix, gate mix and symbolic laws of a trained model.
    Explain(ExplainCmd),
    /// Recovery of known interactions on generated data.
    Synth(SynthCmd),
    /// Top-k agreement of dependency matrices across seeds.
    Stability(StabilityCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    #[value(alias = "regression")]
    Reg,
    #[value(alias = "binary", alias = "classification")]
    Bin,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Reg => Task::Regression,
            TaskArg::Bin => Task::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Basic,
    Extended,
}

impl From<ModeArg> for SynthMode {
    fn from(m: ModeArg) -> SynthMode {
        match m {
            ModeArg::Basic => SynthMode::Basic,
            ModeArg::Extended => SynthMode::Extended,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Headered CSV file.
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the target column.
    #[arg(long)]
    pub target: String,
    #[arg(long, value_enum)]
    pub task: TaskArg,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Ablation variant.
    #[arg(long, default_value = "differentiable_adaptive", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Sparsity penalty on node projections.
    #[arg(long, default_value_t = ModelConfig::DEFAULT_L1)]
    pub l1: f64,
    /// Polynomial degree.
    #[arg(long, default_value_t = ModelConfig::DEFAULT_DEGREE)]
    pub degree: usize,
    /// Committee size (one linear head plus basis heads).
    #[arg(long, default_value_t = ModelConfig::DEFAULT_HEADS)]
    pub heads: usize,
    /// Mini-batch size; defaults to 64 below 5,000 rows and 512 otherwise.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

impl ModelArgs {
    pub fn config(&self, n_features: usize, task: Task) -> ModelConfig {
        let mut c = ModelConfig::new(n_features, task)
            .with_variant(self.variant)
            .with_heads(self.heads);
        c.seed = self.seed;
        c.epochs = self.epochs;
        c.patience = self.patience;
        c.lr = self.lr;
        c.l1 = self.l1;
        c.degree = self.degree;
        c.batch_size = self.batch_size;
        c
    }
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Train the MLP baseline instead.
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Model document path.
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Report path.
    #[arg(long, default_value = "cv_report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainCmd {
    /// Model document written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Target node and driver feature, as indices or names: `i,j`.
    #[arg(long)]
    pub pair: Option<String>,
    /// Minimum matrix entry drawn as a graph edge.
    #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
    pub threshold: f64,
    /// Evaluation grid for symbolic laws: points on [-grid_range, grid_range].
    #[arg(long, default_value_t = 101)]
    pub grid_points: usize,
    #[arg(long, default_value_t = 3.0)]
    pub grid_range: f64,
}

#[derive(Debug, Args)]
pub struct SynthCmd {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Number of seeds; runs use seeds first_seed, first_seed+1, ...
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Rows per generated dataset.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "synth_summary.json")]
    pub out: PathBuf,
    /// Also write each seed's model document here.
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StabilityCmd {
    /// Number of seeds (first_seed, first_seed+1, ...).
    #[arg(long, default_value_t = 10, conflicts_with = "seed_list")]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Explicit comma-separated seeds, e.g. `4,4` or `1,5,9`.
    #[arg(long, value_delimiter = ',')]
    pub seed_list: Option<Vec<u64>>,
    #[arg(long, default_value_t = 3)]
    pub topk: usize,
    /// CSV dataset; otherwise a generated manifold is used.
    #[arg(long, requires_all = ["target", "task"], conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Generated manifold used when no CSV is given.
    #[arg(long, value_enum, default_value = "basic")]
    pub synth: ModeArg,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Seed of the generated dataset (model seeds vary, the data does not).
    #[arg(long, default_value_t = ModelConfig::DEFAULT_SEED)]
    pub data_seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "stability_report.json")]
    pub out: PathBuf,
}

/// Record of one invocation: what went in, what came out, and their checksums.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hex_string(&Sha256::digest(&bytes)),
        })
    }
}

struct Run {
    command: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, config: &impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        Ok(Self {
            command,
            config: serde_json::to_value(config)?,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn write(&mut self, path: &Path, contents: &[u8]) -> Result<()> {
        write_atomic(path, contents)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    /// Writes the manifest to `path` and returns it.
    fn finish(self, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            schema_version: 1,
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.to_string(),
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

fn sibling(primary: &Path, suffix: &str) -> PathBuf {
    let stem = primary.file_stem().unwrap_or_default().to_string_lossy();
    primary.with_file_name(format!("{stem}{suffix}"))
}

fn load(data: &DataArgs) -> Result<Dataset> {
    load_csv(&data.data, &data.target, data.task.into())
}

fn cmd_train(cmd: &TrainCmd) -> Result<()> {
    let raw = load(&cmd.data)?;
    let data = standardize_all(&raw)?;
    let config = cmd.model.config(raw.n_features(), raw.task());
    let metric = metric_name(raw.task());
    let mut run = Run::new("train", &config, vec![config.seed])?;
    run.inputs.push(cmd.data.data.clone());
    let (doc, report) = match cmd.baseline {
        None => {
            let (model, report) = fit(&data, &config)?;
            let counts = param_count(&config)?;
            println!(
                "trained {} on {} rows x {} features ({:?})",
                config.variant().map_or("custom", |v| v.name()),
                data.n_rows(),
                data.n_features(),
                data.task()
            );
            println!("params: exact {} (formula {})", counts.exact, counts.formula);
            (
                ModelDocument::from_cfn(&model, raw.feature_names(), raw.target_name(), data.standardization()),
                report,
            )
        }
        Some(BaselineArg::Mlp) => {
            let (model, report) = fit_baseline(&data, &config)?;
            println!(
                "trained mlp baseline on {} rows x {} features",
                data.n_rows(),
                data.n_features()
            );
            println!("params: exact {}", mlp_param_count(data.n_features()));
            let doc = ModelDocument::from_mlp(
                &model,
                &config,
                raw.feature_names(),
                raw.target_name(),
                data.standardization(),
            );
            (doc, report)
        }
    };
    let (train_loss, val_loss) = report.epoch_losses[report.best_epoch];
    println!(
        "epochs: {} (best {}{}), train {metric} {train_loss:.6}, validation {metric} {val_loss:.6}",
        report.epoch_losses.len(),
        report.best_epoch + 1,
        if report.stopped_early { ", stopped early" } else { "" }
    );
    let model = doc.to_model()?;
    let all: Vec<usize> = (0..data.n_rows()).collect();
    let full = match &model {
        AnyModel::Cfn(m) => evaluate_rows(m, &data, &all)?,
        AnyModel::Mlp(m) => evaluate_rows(m, &data, &all)?,
    };
    println!("all rows {metric}: {full:.6}");
    run.write(&cmd.out, doc.to_json()?.as_bytes())?;
    let report_path = sibling(&cmd.out, ".train_report.json");
    run.write_json(&report_path, &report)?;
    run.finish(&manifest_path(&cmd.out))?;
    println!("wrote {} and {}", cmd.out.display(), report_path.display());
    Ok(())
}

fn cmd_cv(cmd: &CvCmd) -> Result<()> {
    let raw = load(&cmd.data)?;
    let config = cmd.model.config(raw.n_features(), raw.task());
    let mut run = Run::new("cv", &config, vec![config.seed])?;
    run.inputs.push(cmd.data.data.clone());
    let result = cross_validate(&raw, &config, cmd.folds, cmd.baseline.is_some())?;
    println!(
        "{} {}-fold {}: {:.4} ± {:.4}",
        result.variant, result.folds, result.metric, result.model.mean, result.model.sd
    );
    if let (Some(b), Some(t)) = (&result.baseline_summary, &result.ttest) {
        println!("mlp {}: {:.4} ± {:.4}", result.metric, b.mean, b.sd);
        println!(
            "paired t = {:.4}, p = {:.4} (Bonferroni threshold {:.4}: {})",
            t.t,
            t.p,
            result.bonferroni_threshold,
            if t.p < result.bonferroni_threshold {
                "significant"
            } else {
                "not significant"
            }
        );
    }
    println!("noise level xi = {:.4}", result.noise_level_xi);
    run.write_json(&cmd.out, &result)?;
    run.finish(&manifest_path(&cmd.out))?;
    println!("wrote {}", cmd.out.display());
    Ok(())
}

fn resolve_feature(token: &str, names: &[String]) -> Result<usize> {
    let token = token.trim();
    if let Ok(k) = token.parse::<usize>() {
        if k < names.len() {
            return Ok(k);
        }
        return Err(Error::Argument(format!(
            "feature index {k} out of range (0..{})",
            names.len()
        )));
    }
    names
        .iter()
        .position(|n| n == token)
        .ok_or_else(|| Error::Argument(format!("unknown feature '{token}'")))
}

fn cmd_explain(cmd: &ExplainCmd) -> Result<()> {
    let doc = ModelDocument::load(&cmd.model)?;
    let model = doc.to_cfn()?;
    let names = doc.feature_names.clone();
    let pair = match &cmd.pair {
        Some(p) => {
            let parts: Vec<&str> = p.split(',').collect();
            if parts.len() != 2 {
                return Err(Error::Argument(format!("--pair expects 'i,j', got '{p}'")));
            }
            let (i, j) = (resolve_feature(parts[0], &names)?, resolve_feature(parts[1], &names)?);
            if i == j {
                return Err(Error::Argument(format!(
                    "--pair {i},{j}: a node never reads its own feature"
                )));
            }
            Some((i, j))
        }
        None => None,
    };
    std::fs::create_dir_all(&cmd.out_dir)?;
    let mut run = Run::new(
        "explain",
        &serde_json::json!({
            "threshold": cmd.threshold,
            "pair": pair,
            "grid_points": cmd.grid_points,
            "grid_range": cmd.grid_range,
        }),
        vec![doc.config.seed],
    )?;
    run.inputs.push(cmd.model.clone());
    let schema = dependency_matrix(&model).with_feature_names(names.clone());
    run.write(&cmd.out_dir.join("dependency_matrix.csv"), schema.to_csv().as_bytes())?;
    run.write(
        &cmd.out_dir.join("dependency_matrix.dot"),
        schema.to_dot(cmd.threshold).as_bytes(),
    )?;
    if !schema.zero_rows.is_empty() {
        println!("rows with all-zero projections: {:?}", schema.zero_rows);
    }
    println!("top couplings:");
    for (i, j) in schema.top_k(3.min(schema.n() * (schema.n() - 1)))? {
        println!("  {} <- {}: {:.4}", names[i], names[j], schema.m[i][j]);
    }
    match gate_physics(&model) {
        Ok(mut gates) => {
            gates.feature_names = names.clone();
            println!("mean gate mix: sigmoid {:.4}, tanh {:.4}", gates.mean[0], gates.mean[1]);
            run.write(&cmd.out_dir.join("gate_physics.csv"), gates.to_csv().as_bytes())?;
        }
        Err(e) => println!("gate physics skipped: {e}"),
    }
    if let Some((i, j)) = pair {
        let grid = linspace(-cmd.grid_range, cmd.grid_range, cmd.grid_points);
        let law = extract_symbolic(&model, i, j, &grid, &names)?;
        println!("z_{} ≈ {}", law.target_name, law.expression);
        println!("max round-trip error: {:e}", law.max_roundtrip_error);
        run.write(&cmd.out_dir.join(format!("law_{i}_{j}.txt")), law.to_text().as_bytes())?;
    }
    run.finish(&cmd.out_dir.join("explain.manifest.json"))?;
    println!("wrote {}", cmd.out_dir.display());
    Ok(())
}

fn seed_range(first: u64, count: u64) -> Result<Vec<u64>> {
    if count == 0 {
        return Err(Error::Argument("--seeds must be at least 1".into()));
    }
    Ok((first..first + count).collect())
}

fn cmd_synth(cmd: &SynthCmd) -> Result<()> {
    let seeds = seed_range(cmd.first_seed, cmd.seeds)?;
    let mode: SynthMode = cmd.mode.into();
    let n_features = SynthSpec::new(mode, 1, 0).n_features;
    let config = cmd.model.config(n_features, Task::Regression);
    let mut run = Run::new(
        "synth",
        &serde_json::json!({ "mode": mode, "n": cmd.n, "model": &config }),
        seeds.clone(),
    )?;
    let (summary, models) = run_synthetic(mode, cmd.n, &seeds, &config)?;
    for r in &summary.runs {
        let detail = match &r.extended {
            Some(e) => format!(
                "recovered {}/{} pairs, min recovered {:.4}, noise false positives {:?}",
                e.recovered.len(),
                e.pair_scores.len(),
                e.min_recovered_score,
                e.false_positives
            ),
            None => format!(
                "pair scores {:?}",
                r.recovery
                    .pair_scores
                    .iter()
                    .map(|s| format!("{s:.4}"))
                    .collect::<Vec<_>>()
            ),
        };
        println!(
            "seed {}: {} ({detail}; max noise coupling {:.4})",
            r.seed,
            if r.success { "recovered" } else { "not recovered" },
            r.recovery.max_noise_score
        );
    }
    println!("relational recovery success rate: {:.3}", summary.success_rate);
    if let Some(dir) = &cmd.models_dir {
        std::fs::create_dir_all(dir)?;
        for (model, seed) in models.iter().zip(&seeds) {
            let names: Vec<String> = (0..n_features).map(|k| format!("x{k}")).collect();
            let doc = ModelDocument::from_cfn(model, &names, "y", None);
            run.write(
                &dir.join(format!("synth_{}_{seed}.json", mode_name(mode))),
                doc.to_json()?.as_bytes(),
            )?;
        }
    }
    run.write_json(&cmd.out, &summary)?;
    run.finish(&manifest_path(&cmd.out))?;
    println!("wrote {}", cmd.out.display());
    Ok(())
}

fn mode_name(mode: SynthMode) -> &'static str {
    match mode {
        SynthMode::Basic => "basic",
        SynthMode::Extended => "extended",
    }
}

fn cmd_stability(cmd: &StabilityCmd) -> Result<()> {
    let seeds = match &cmd.seed_list {
        Some(list) => list.clone(),
        None => seed_range(cmd.first_seed, cmd.seeds)?,
    };
    let mut inputs = Vec::new();
    let data = match &cmd.data {
        Some(path) => {
            inputs.push(path.clone());
            let target = cmd.target.as_deref().expect("clap enforces --target with --data");
            let task = cmd.task.expect("clap enforces --task with --data").into();
            standardize_all(&load_csv(path, target, task)?)?
        }
        None => standardize_all(&synth_generate(&SynthSpec::new(
            cmd.synth.into(),
            cmd.n,
            cmd.data_seed,
        ))?)?,
    };
    let config = cmd.model.config(data.n_features(), data.task());
    let mut run = Run::new(
        "stability",
        &serde_json::json!({ "topk": cmd.topk, "data_seed": cmd.data.is_none().then_some(cmd.data_seed), "model": &config }),
        seeds.clone(),
    )?;
    run.inputs = inputs;
    let report = run_stability(&data, &config, &seeds, cmd.topk)?;
    for (seed, set) in seeds.iter().zip(&report.top_k_sets) {
        let named: Vec<String> = set
            .iter()
            .map(|&(i, j)| format!("{}<-{}", data.feature_names()[i], data.feature_names()[j]))
            .collect();
        println!("seed {seed}: {}", named.join(", "));
    }
    println!("top-{} consistency: {:.4}", cmd.topk, report.consistency);
    run.write_json(&cmd.out, &report)?;
    run.finish(&manifest_path(&cmd.out))?;
    println!("wrote {}", cmd.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Cv(c) => cmd_cv(c),
        Command::Explain(c) => cmd_explain(c),
        Command::Synth(c) => cmd_synth(c),
        Command::Stability(c) => cmd_stability(c),
    }
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
