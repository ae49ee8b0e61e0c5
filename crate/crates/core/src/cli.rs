//! `qfix` command line: `run`, `sweep`, `verify`, `fit`.
//!
//! Exit codes: 0 success, 1 failed verification or runtime error, 2 invalid
//! configuration or input, 3 training divergence (a dump file is written).

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::AgentConfig;
use crate::envs::EnvConfig;
use crate::error::Error;
use crate::joint;
use crate::mixers::{Fault, MixerCheckpoint, MixerKind, MixerSpec};
use crate::par::{self, Exec};
use crate::training::{train_run, MetricRecord, RunOptions, RunSummary, TrainConfig};
use crate::verification::suites::{run_suite, Suite, SuiteOptions, SuiteReport};
use crate::verification::{fit_target_table, FitOptions, FitReport, JointValueTable};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.json";
pub const FIT_REPORT_FILE: &str = "fit_report.json";

#[derive(Parser, Debug)]
#[command(name = "qfix", version, about = "Value decomposition lab: training runs, property suites and table fits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train every seed of one experiment config.
    Run(RunArgs),
    /// Train one base config under several mixers.
    Sweep(RunArgs),
    /// Run property suites and write report.json.
    Verify(VerifyArgs),
    /// Fit a mixer to a joint-value table.
    Fit(FitArgs),
}

#[derive(clap::Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for seeds (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(clap::Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-check instance count override.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct FitArgs {
    /// Target file: `{"values": nested arrays, "utilities": [[...], ...]}`.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "qplusfix_sum")]
    pub mixer: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Diverged { dump: PathBuf, message: String },
    Failed(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Failed(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Diverged { dump, message } => write!(f, "{message} (dump: {})", dump.display()),
            CliError::Failed(m) => write!(f, "verification failed: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::NotIgm { .. } | Error::Json(_) | Error::JointSpaceTooLarge(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// The environment, either inline or as `{"file": "path"}` relative to the
/// config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    File { file: PathBuf },
    Inline(Value),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSource,
    pub mixer: MixerSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub agents: AgentConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
}

fn default_eval_interval() -> u64 {
    RunOptions::default().eval_interval
}

fn default_eval_episodes() -> usize {
    RunOptions::default().eval_episodes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub mixers: Vec<MixerSpec>,
}

/// Parses JSON into `T`, naming the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            CliError::Config(format!("{what}: {}", e.inner()))
        } else {
            CliError::Config(format!("{what}: field `{path}`: {}", e.inner()))
        }
    })
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("field `seeds`: must not be empty".into()));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(CliError::Config("field `seeds`: seeds must be distinct".into()));
        }
        if self.eval_interval == 0 {
            return Err(CliError::Config("field `eval_interval`: must be positive".into()));
        }
        self.mixer.validate().map_err(|e| CliError::Config(format!("field `mixer`: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("field `train`: {e}")))?;
        Ok(())
    }

    /// Resolves the environment, reading a referenced file relative to
    /// `base_dir`.
    pub fn env_config(&self, base_dir: &Path) -> CliResult<EnvConfig> {
        match &self.env {
            EnvSource::File { file } => {
                let path = base_dir.join(file);
                parse_json(&read(&path)?, &format!("env file {}", path.display()))
            }
            EnvSource::Inline(v) => parse_json(&v.to_string(), "field `env`"),
        }
    }

    fn run_options(&self) -> RunOptions {
        RunOptions {
            master_seed: self.master_seed,
            eval_interval: self.eval_interval,
            eval_episodes: self.eval_episodes,
        }
    }
}

/// Refuses to touch existing outputs unless `force` is set.
fn prepare_outputs(dir: &Path, files: &[&str], force: bool) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let existing: Vec<&str> = files.iter().copied().filter(|f| dir.join(f).exists()).collect();
    if !existing.is_empty() && !force {
        return Err(CliError::Config(format!(
            "{} already contains {}; pass --force to overwrite",
            dir.display(),
            existing.join(", ")
        )));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

struct SeedOutcome {
    records: Vec<MetricRecord>,
    summary: RunSummary,
    checkpoint: MixerCheckpoint,
}

fn checkpoint_name(seed: u64) -> String {
    format!("mixer_seed{seed}.json")
}

fn divergence_name(seed: u64) -> String {
    format!("divergence_seed{seed}.json")
}

/// Trains every seed and writes the outputs for one experiment.
fn run_experiment_dir(cfg: &ExperimentConfig, env: &EnvConfig, out: &Path, workers: usize, force: bool) -> CliResult<Vec<RunSummary>> {
    let mut files = vec![METRICS_FILE.to_owned(), SUMMARY_FILE.to_owned()];
    files.extend(cfg.seeds.iter().map(|&s| checkpoint_name(s)));
    let files: Vec<&str> = files.iter().map(String::as_str).collect();
    prepare_outputs(out, &files, force)?;
    env.build()?;

    let opts = cfg.run_options();
    let outcomes = par::with_workers(workers, || {
        par::map_slice(&cfg.seeds, Exec::Parallel, |&seed| {
            let mut records = Vec::new();
            let mut sink = |r: &MetricRecord| {
                records.push(r.clone());
                Ok(())
            };
            let (summary, learner) = train_run(env, &cfg.mixer, &cfg.agents, &cfg.train, &opts, seed, &mut sink)?;
            Ok(SeedOutcome {
                records,
                summary,
                checkpoint: MixerCheckpoint::capture(&learner.mixer, &learner.params),
            })
        })
    });

    let mut metrics = Vec::new();
    let mut summaries = Vec::new();
    for (outcome, &seed) in outcomes.into_iter().zip(&cfg.seeds) {
        match outcome {
            Ok(o) => {
                for r in &o.records {
                    serde_json::to_writer(&mut metrics, r).map_err(Error::from)?;
                    metrics.push(b'\n');
                }
                write_file(&out.join(checkpoint_name(seed)), o.checkpoint.to_json()?.as_bytes())?;
                summaries.push(o.summary);
            }
            Err(Error::Diverged { step, seed, detail }) => {
                let dump = out.join(divergence_name(seed));
                let body = serde_json::json!({"step": step, "seed": seed, "detail": detail});
                write_file(&dump, body.to_string().as_bytes())?;
                return Err(CliError::Diverged {
                    dump,
                    message: format!("training diverged at step {step} (seed {seed})"),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_file(&out.join(METRICS_FILE), &metrics)?;
    write_file(&out.join(SUMMARY_FILE), &summary_csv(&summaries, None)?)?;
    Ok(summaries)
}

const SUMMARY_HEADER: [&str; 7] = [
    "seed",
    "steps",
    "updates",
    "final_return_mean",
    "final_return_std",
    "greedy_joint_action",
    "final_td_loss",
];

fn summary_row(s: &RunSummary) -> Vec<String> {
    let ja: Vec<String> = s.greedy_joint_action.iter().map(usize::to_string).collect();
    vec![
        s.seed.to_string(),
        s.steps.to_string(),
        s.updates.to_string(),
        s.final_return_mean.to_string(),
        s.final_return_std.to_string(),
        ja.join(" "),
        s.final_td_loss.map_or_else(String::new, |l| l.to_string()),
    ]
}

/// `summary.csv` contents; `labelled` prefixes a `mixer` column.
fn summary_csv(rows: &[RunSummary], labelled: Option<&[String]>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
    let mut header: Vec<&str> = Vec::new();
    if labelled.is_some() {
        header.push("mixer");
    }
    header.extend(SUMMARY_HEADER);
    w.write_record(&header).map_err(csv_err)?;
    for (i, s) in rows.iter().enumerate() {
        let mut row = Vec::new();
        if let Some(labels) = labelled {
            row.push(labels[i].clone());
        }
        row.extend(summary_row(s));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn output_dir(out: &Option<PathBuf>, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    out.clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `output_dir`".into()))
}

pub fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let cfg: ExperimentConfig = parse_json(&read(&args.config)?, "config")?;
    cfg.validate()?;
    let env = cfg.env_config(&config_dir(&args.config))?;
    let out = output_dir(&args.out, &cfg)?;
    let summaries = run_experiment_dir(&cfg, &env, &out, args.workers, args.force)?;
    for s in &summaries {
        println!(
            "seed {}: return {:.3} ± {:.3}, greedy {:?}",
            s.seed, s.final_return_mean, s.final_return_std, s.greedy_joint_action
        );
    }
    Ok(())
}

/// Directory name for the `i`-th mixer of a sweep.
pub fn sweep_label(i: usize, spec: &MixerSpec) -> String {
    format!("{i:02}_{}_{}", spec.kind.name(), spec.conditioning.name())
}

pub fn cmd_sweep(args: &RunArgs) -> CliResult<()> {
    let sweep: SweepConfig = parse_json(&read(&args.config)?, "sweep config")?;
    if sweep.mixers.is_empty() {
        return Err(CliError::Config("field `mixers`: must not be empty".into()));
    }
    sweep.base.validate()?;
    for (i, m) in sweep.mixers.iter().enumerate() {
        m.validate().map_err(|e| CliError::Config(format!("field `mixers[{i}]`: {e}")))?;
    }
    let env = sweep.base.env_config(&config_dir(&args.config))?;
    let out = output_dir(&args.out, &sweep.base)?;
    prepare_outputs(&out, &[SUMMARY_FILE], args.force)?;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, spec) in sweep.mixers.iter().enumerate() {
        let label = sweep_label(i, spec);
        let cfg = ExperimentConfig {
            mixer: spec.clone(),
            ..sweep.base.clone()
        };
        let summaries = run_experiment_dir(&cfg, &env, &out.join(&label), args.workers, args.force)?;
        for s in summaries {
            println!("{label} seed {}: return {:.3}", s.seed, s.final_return_mean);
            labels.push(label.clone());
            rows.push(s);
        }
    }
    write_file(&out.join(SUMMARY_FILE), &summary_csv(&rows, Some(&labels))?)
}

pub fn parse_fault(name: &str) -> CliResult<Fault> {
    match name {
        "qmix-sign-flip" => Ok(Fault::NegateMonotonicWeights),
        other => Err(CliError::Config(format!("unknown fault `{other}`"))),
    }
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<SuiteReport> {
    let suite = Suite::parse(&args.suite).ok_or_else(|| {
        CliError::Config(format!(
            "unknown suite `{}` (expected igm, stateful, detach, grad, completeness or all)",
            args.suite
        ))
    })?;
    let fault = args.inject_fault.as_deref().map(parse_fault).transpose()?;
    if let Some(out) = &args.out {
        prepare_outputs(out, &[REPORT_FILE], args.force)?;
    }
    let opts = SuiteOptions {
        master_seed: args.seed,
        exec: Exec::Parallel,
        fault,
        instances: args.instances,
    };
    let report = par::with_workers(args.workers, || run_suite(suite, &opts))?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    if let Some(out) = &args.out {
        write_file(&out.join(REPORT_FILE), json.as_bytes())?;
    }
    for c in &report.checks {
        println!("{:<40} {:>6} instances {:>4} failures", c.check_name, c.instances, c.failures);
    }
    println!("{}: {} instances, {} failures", report.check_name, report.instances, report.failures);
    if report.passed() {
        Ok(report)
    } else {
        let first = report.witnesses.first().map(Value::to_string).unwrap_or_default();
        Err(CliError::Failed(format!("{} failures; first witness: {first}", report.failures)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    /// Nested arrays, one nesting level per agent.
    pub values: Value,
    pub utilities: Vec<Vec<f64>>,
}

fn flatten_nested(v: &Value, depth: usize, counts: &[usize], out: &mut Vec<f64>) -> CliResult<()> {
    if depth == counts.len() {
        let x = v
            .as_f64()
            .ok_or_else(|| CliError::Config(format!("field `values`: expected a number, got {v}")))?;
        out.push(x);
        return Ok(());
    }
    let arr = v
        .as_array()
        .filter(|a| a.len() == counts[depth])
        .ok_or_else(|| CliError::Config(format!("field `values`: level {depth} must be an array of length {}", counts[depth])))?;
    for x in arr {
        flatten_nested(x, depth + 1, counts, out)?;
    }
    Ok(())
}

impl TargetFile {
    pub fn table(&self) -> CliResult<JointValueTable> {
        let counts: Vec<usize> = self.utilities.iter().map(Vec::len).collect();
        let size = joint::joint_space_size(&counts);
        if size > joint::MAX_JOINT_ACTIONS {
            return Err(Error::JointSpaceTooLarge(size).into());
        }
        let mut values = Vec::with_capacity(size);
        flatten_nested(&self.values, 0, &counts, &mut values)?;
        Ok(JointValueTable::new(values, self.utilities.clone())?)
    }
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<FitReport> {
    let target: TargetFile = parse_json(&read(&args.config)?, "target")?;
    let table = target.table()?;
    let kind = MixerKind::parse(&args.mixer).ok_or_else(|| CliError::Config(format!("unknown mixer kind `{}`", args.mixer)))?;
    if let Some(out) = &args.out {
        prepare_outputs(out, &[FIT_REPORT_FILE], args.force)?;
    }
    let opts = FitOptions {
        steps: args.steps,
        lr: args.lr,
        seed: args.seed,
        ..FitOptions::default()
    };
    let (report, _, _) = fit_target_table(&MixerSpec::new(kind), &table, &opts)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{json}");
    if let Some(out) = &args.out {
        write_file(&out.join(FIT_REPORT_FILE), json.as_bytes())?;
    }
    Ok(report)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a).map(|_| ()),
        Command::Fit(a) => cmd_fit(a).map(|_| ()),
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
