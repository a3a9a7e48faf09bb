//! Command-line front end.
//!
//! Every option can also come from a `--config` file of `key = value` lines
//! (keys are the long flag names, `-` or `_` both accepted). A flag given on
//! the command line wins over the file, which wins over the built-in default.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::braingraph::{
    build_dataset, generate_synthetic_variant, graph_view_values, BrainGraph, CorticalTable,
    Hemisphere, MetricPair, SyntheticVariant, CORTICAL_THICKNESS, MEAN_CURVATURE,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::denoiser::ModelConfig;
use crate::diff::AdamWConfig;
use crate::error::{Error, ErrorClass};
use crate::evalmetrics::{subject_rng, EvalReport};
use crate::sampler::{SampleTrace, Sampler};
use crate::schedule::{
    cosine_schedule, DiffusionMode, ScheduleConfig, DEFAULT_COSINE_OFFSET, DEFAULT_K, DEFAULT_STEPS,
};
use crate::trainer::{evaluate_trained, kfold_split, run_fold, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "grenol",
    version,
    about = "Source-guided graph diffusion for brain graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Write a synthetic cortical table.
    GenData(GenDataArgs),
    /// Cross-validated training; one checkpoint per fold.
    Train(TrainArgs),
    /// Predict the target graph of one subject.
    Sample(SampleArgs),
    /// Score a checkpoint on held-out or cross-cohort subjects.
    Evaluate(EvaluateArgs),
    /// Write the noise schedule as CSV.
    DumpSchedule(DumpScheduleArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `standard` or `constant-target`.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Debug, Args, Default)]
struct ScheduleArgs {
    #[arg(long = "T")]
    steps: Option<usize>,
    #[arg(long)]
    k: Option<f64>,
    /// `paper` or `standard`.
    #[arg(long)]
    mode: Option<DiffusionMode>,
    #[arg(long)]
    cosine_offset: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    hemisphere: Option<Hemisphere>,
    #[arg(long)]
    source_metric: Option<String>,
    #[arg(long)]
    target_metric: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Subjects per batch, or `full` for the whole fold.
    #[arg(long)]
    batch_size: Option<String>,
    /// Early-stop patience in epochs, or `off`.
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    conv_layers: Option<usize>,
    #[arg(long)]
    conv_dim: Option<usize>,
    #[arg(long)]
    fc_layers: Option<usize>,
    #[arg(long)]
    fc_dim: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every intermediate state of the reverse chain.
    #[arg(long)]
    trace: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cohort the checkpoint was trained on, when different from `--data`.
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write each predicted adjacency under `predictions/`.
    #[arg(long)]
    dump_predictions: bool,
}

#[derive(Debug, Args)]
struct DumpScheduleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure inside the CLI layer: either a library error or a usage problem
/// detected while resolving options.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(e) => match e.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numeric => EXIT_NUMERIC,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected `key = value`", i + 1))?;
        let key = normalize_key(k.trim());
        if key.is_empty() {
            return Err(format!("config line {}: empty key", i + 1));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn normalize_key(k: &str) -> String {
    let k = k.replace('-', "_");
    if k == "steps" {
        "T".into()
    } else {
        k
    }
}

/// Resolved option source for one subcommand.
struct Settings {
    file: BTreeMap<String, String>,
    echo: Vec<(String, String)>,
}

impl Settings {
    fn load(path: Option<&Path>, allowed: &[&str]) -> CliResult<Self> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_config_text(&text)
                    .map_err(|m| CliError::Usage(format!("{}: {m}", p.display())))?
            }
        };
        for key in file.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("unknown config key `{key}`")));
            }
        }
        Ok(Settings {
            file,
            echo: Vec::new(),
        })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))),
        }
    }

    /// Flag, then file, then `default`; the result is recorded for the echo.
    fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + std::fmt::Display,
        T::Err: std::fmt::Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.echo.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    fn require<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T: FromStr + std::fmt::Display,
        T::Err: std::fmt::Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.file_value(key)?.ok_or_else(|| {
                CliError::Usage(format!(
                    "missing required option --{}",
                    key.replace('_', "-")
                ))
            })?,
        };
        self.echo.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> CliResult<PathBuf> {
        let s = self.require::<String>(key, flag.map(|p| p.to_string_lossy().into_owned()))?;
        Ok(PathBuf::from(s))
    }

    fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> CliResult<Option<PathBuf>> {
        let v = match flag {
            Some(p) => Some(p),
            None => self.file_value::<String>(key)?.map(PathBuf::from),
        };
        if let Some(p) = &v {
            self.echo
                .push((key.to_string(), p.to_string_lossy().into_owned()));
        }
        Ok(v)
    }

    fn echo_text(&self, command: &str) -> String {
        let mut s = format!("# grenol {command}\n");
        for (k, v) in &self.echo {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// `full`/`off`-style optional numbers.
fn optional_count(key: &str, value: &str, none_word: &str) -> CliResult<Option<usize>> {
    if value == none_word {
        return Ok(None);
    }
    value.parse().map(Some).map_err(|_| {
        CliError::Usage(format!(
            "{key}: expected a number or `{none_word}`, got `{value}`"
        ))
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

/// Echo file path for single-file outputs.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".echo");
    PathBuf::from(s)
}

const SCHEDULE_KEYS: [&str; 4] = ["T", "k", "mode", "cosine_offset"];

fn schedule_config(s: &mut Settings, a: ScheduleArgs) -> CliResult<ScheduleConfig> {
    Ok(ScheduleConfig {
        steps: s.get("T", a.steps, DEFAULT_STEPS)?,
        k: s.get("k", a.k, DEFAULT_K)?,
        mode: s.get("mode", a.mode, DiffusionMode::default())?,
        offset: s.get("cosine_offset", a.cosine_offset, DEFAULT_COSINE_OFFSET)?,
    })
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut s = Settings::load(a.config.as_deref(), &["subjects", "seed", "out", "variant"])?;
    let subjects = s.require("subjects", a.subjects)?;
    let seed = s.get("seed", a.seed, 0)?;
    let out = s.path("out", a.out)?;
    let variant_name = s.get("variant", a.variant, "standard".to_string())?;
    let variant = match variant_name.as_str() {
        "standard" => SyntheticVariant::Standard,
        "constant-target" | "constant_target" => SyntheticVariant::ConstantTarget,
        other => return Err(CliError::Usage(format!("unknown variant `{other}`"))),
    };
    let table = generate_synthetic_variant(subjects, seed, variant)?;
    table.save(&out)?;
    write_text(&sidecar(&out), &s.echo_text("gen-data"))
}

fn dump_schedule(a: DumpScheduleArgs) -> CliResult<()> {
    let mut allowed = SCHEDULE_KEYS.to_vec();
    allowed.push("out");
    let mut s = Settings::load(a.config.as_deref(), &allowed)?;
    let cfg = schedule_config(&mut s, a.schedule)?;
    let out = s.path("out", a.out)?;
    cosine_schedule(cfg)?.write_csv(&out)?;
    write_text(&sidecar(&out), &s.echo_text("dump-schedule"))
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut allowed = vec![
        "data",
        "hemisphere",
        "source_metric",
        "target_metric",
        "folds",
        "epochs",
        "lr",
        "weight_decay",
        "batch_size",
        "patience",
        "seed",
        "conv_layers",
        "conv_dim",
        "fc_layers",
        "fc_dim",
        "out",
    ];
    allowed.extend(SCHEDULE_KEYS);
    let mut s = Settings::load(a.config.as_deref(), &allowed)?;
    let data = s.path("data", a.data)?;
    let hemisphere = s.get("hemisphere", a.hemisphere, Hemisphere::Lh)?;
    let metrics = MetricPair {
        source: s.get("source_metric", a.source_metric, MEAN_CURVATURE.to_string())?,
        target: s.get(
            "target_metric",
            a.target_metric,
            CORTICAL_THICKNESS.to_string(),
        )?,
    };
    let defaults = TrainConfig::default();
    let folds = s.get("folds", a.folds, defaults.folds)?;
    let epochs = s.get("epochs", a.epochs, defaults.epochs)?;
    let lr = s.get("lr", a.lr, defaults.optimizer.lr)?;
    let weight_decay = s.get(
        "weight_decay",
        a.weight_decay,
        defaults.optimizer.weight_decay,
    )?;
    let batch_size = s.get("batch_size", a.batch_size, "full".to_string())?;
    let batch_size = optional_count("batch_size", &batch_size, "full")?;
    let patience = s.get("patience", a.patience, "off".to_string())?;
    let patience = optional_count("patience", &patience, "off")?;
    let seed = s.get("seed", a.seed, defaults.seed)?;
    let schedule = schedule_config(&mut s, a.schedule)?;
    let md = ModelConfig::default();
    let fc_dim = s.get("fc_dim", a.fc_dim, md.fc_dim)?;
    let model = ModelConfig {
        conv_layers: s.get("conv_layers", a.conv_layers, md.conv_layers)?,
        conv_dim: s.get("conv_dim", a.conv_dim, md.conv_dim)?,
        fc_layers: s.get("fc_layers", a.fc_layers, md.fc_layers)?,
        fc_dim,
        pe_dim: fc_dim,
        ..md
    };
    let out = s.path("out", a.out)?;

    let cfg = TrainConfig {
        epochs,
        optimizer: AdamWConfig {
            lr,
            weight_decay,
            ..AdamWConfig::default()
        },
        batch_size,
        folds,
        seed,
        schedule,
        patience,
    };
    cfg.validate()?;
    model.validate()?;
    let table = CorticalTable::load(&data)?;
    let splits = kfold_split(&table.subjects(hemisphere), folds, seed)?;

    create_dir(&out)?;
    let echo = s.echo_text("train");
    write_text(&out.join("config.echo"), &echo)?;
    let mut report = EvalReport {
        config_echo: echo.clone(),
        ..Default::default()
    };
    for (i, split) in splits.iter().enumerate() {
        let outcome = run_fold(&table, hemisphere, &metrics, split, i, &cfg, &model)?;
        let dir = out.join(format!("fold-{i}"));
        create_dir(&dir)?;
        save_checkpoint(&outcome.model, dir.join("checkpoint.grnl"))?;
        outcome
            .train_report
            .write_csv(dir.join("train_report.csv"))?;
        eprintln!(
            "fold {i}: final loss {:.6}, mean frobenius {:.6} (baseline {:.6})",
            outcome
                .train_report
                .losses()
                .last()
                .copied()
                .unwrap_or(f64::NAN),
            outcome.evaluation.report.mean_frobenius(),
            outcome.evaluation.report.mean_baseline_frobenius()
        );
        report.extend(outcome.evaluation.report);
    }
    report.write_csv(out.join("eval_report.csv"))?;
    write_text(&out.join("eval_summary.txt"), &report.summary_text())
}

fn source_graph(
    table: &CorticalTable,
    subject: &str,
    hemisphere: Hemisphere,
    metric: &str,
    scaler: &crate::braingraph::FeatureScaler,
) -> CliResult<BrainGraph> {
    if !table.has_metric(metric) {
        return Err(Error::UnknownMetric(metric.to_string()).into());
    }
    let group = table.group(subject, hemisphere)?;
    Ok(BrainGraph::from_raw(
        subject,
        hemisphere,
        metric,
        graph_view_values(group, metric)?,
        scaler,
    )?)
}

fn sample(a: SampleArgs) -> CliResult<()> {
    let mut s = Settings::load(
        a.config.as_deref(),
        &["checkpoint", "data", "subject", "seed", "out", "trace"],
    )?;
    let ckpt = s.path("checkpoint", a.checkpoint)?;
    let data = s.path("data", a.data)?;
    let subject: String = s.require("subject", a.subject)?;
    let seed = s.get("seed", a.seed, 0)?;
    let out = s.path("out", a.out)?;
    let trace_on = s.get("trace", a.trace.then_some(true), false)?;

    let model = load_checkpoint(&ckpt, None)?;
    let table = CorticalTable::load(&data)?;
    let src = source_graph(
        &table,
        &subject,
        model.hemisphere,
        &model.metrics.source,
        &model.scaler,
    )?;
    let schedule = cosine_schedule(model.schedule)?;
    let sampler = Sampler::new(
        &model.params,
        &model.model,
        &schedule,
        Some(&model.scaler),
        &model.metrics.target,
    );
    let mut rng = subject_rng(seed, 0);
    let mut trace = SampleTrace::default();
    let pred = sampler.sample_target(&src, &mut rng, trace_on.then_some(&mut trace))?;

    create_dir(&out)?;
    write_text(&out.join("config.echo"), &s.echo_text("sample"))?;
    pred.adjacency
        .write_csv(out.join("predicted_adjacency.csv"))?;
    pred.write_nodes_csv(out.join("predicted_nodes.csv"))?;
    if trace_on {
        trace.write_csv(out.join("trace.csv"))?;
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut s = Settings::load(
        a.config.as_deref(),
        &[
            "checkpoint",
            "data",
            "train_data",
            "seed",
            "out",
            "dump_predictions",
        ],
    )?;
    let ckpt = s.path("checkpoint", a.checkpoint)?;
    let data = s.path("data", a.data)?;
    let train_data = s.optional_path("train_data", a.train_data)?;
    let seed = s.get("seed", a.seed, 0)?;
    let out = s.path("out", a.out)?;
    let dump = s.get(
        "dump_predictions",
        a.dump_predictions.then_some(true),
        false,
    )?;

    let model = load_checkpoint(&ckpt, None)?;
    let test_table = CorticalTable::load(&data)?;
    let cross_cohort = train_data.as_deref().is_some_and(|g| !same_file(g, &data));
    let train_table = match (&train_data, cross_cohort) {
        (Some(g), true) => CorticalTable::load(g)?,
        _ => test_table.clone(),
    };
    let hemi = model.hemisphere;
    let test_subjects: Vec<String> = if cross_cohort {
        test_table.subjects(hemi)
    } else {
        test_table
            .subjects(hemi)
            .into_iter()
            .filter(|id| !model.train_subjects.contains(id))
            .collect()
    };
    if test_subjects.is_empty() {
        return Err(Error::InvalidArgument(
            "no held-out subjects to evaluate (every subject was used for training)".into(),
        )
        .into());
    }
    // Cross-cohort subjects are scaled with the training cohort's scaler.
    let train_pairs = build_dataset(
        &train_table,
        hemi,
        &model.train_subjects,
        &model.metrics,
        &model.scaler,
    )?;
    let test_pairs = build_dataset(
        &test_table,
        hemi,
        &test_subjects,
        &model.metrics,
        &model.scaler,
    )?;
    let evaluation = evaluate_trained(&model, &train_pairs, &test_pairs, seed, 0)?;
    let mut report = evaluation.report;
    report.cross_cohort = cross_cohort;
    report.config_echo = s.echo_text("evaluate");

    create_dir(&out)?;
    write_text(&out.join("config.echo"), &report.config_echo)?;
    report.write_csv(out.join("eval_report.csv"))?;
    write_text(&out.join("eval_summary.txt"), &report.summary_text())?;
    if dump {
        let dir = out.join("predictions");
        create_dir(&dir)?;
        for p in &evaluation.predictions {
            p.adjacency
                .write_csv(dir.join(format!("{}_{}_adjacency.csv", p.subject_id, p.hemisphere)))?;
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if args.len() <= 1 {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        eprintln!("{}", cmd.render_help());
        return EXIT_USAGE;
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::DumpSchedule(a) => dump_schedule(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
