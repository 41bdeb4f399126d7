//! Command-line front end. `run` parses arguments, validates the experiment
//! configuration before touching the filesystem, then dispatches.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchConfig};
use crate::error::Error;
use crate::ewc::important_fraction;
use crate::gradcheck;
use crate::metrics::{parse_formats, EvalReport, Format, OverheadContext};
use crate::model::ModelConfig;
use crate::tasks::{generate_suite, Corpus, Split, SuiteConfig, TaskSuite};
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::trainer::{Phase, Strategy, TrainPlan, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Largest relative gradient error `grad-check` accepts.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn invalid<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Invalid(msg.into()))
}

/// Turns a library error raised while checking inputs into a validation error.
fn check<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Invalid(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Number of consecutive seeds starting at the experiment seed.
    pub seeds: usize,
    pub strategies: Vec<Strategy>,
    pub joint_baseline: bool,
    pub threshold: f64,
    pub split: Split,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self { seeds: 3, strategies: b.strategies, joint_baseline: b.joint_baseline, threshold: b.threshold, split: b.split }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything one invocation needs, loadable from a TOML file. Command-line
/// flags override file values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub strategy: Option<Strategy>,
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub bench: BenchSection,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> crate::Result<Self> {
        toml::from_str(text).map_err(|e| Error::Argument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.bench_config().validate()?;
        if self.bench.seeds == 0 {
            return Err(Error::Argument("bench needs at least one seed".into()));
        }
        if self.bench.strategies.is_empty() {
            return Err(Error::Argument("bench needs at least one strategy".into()));
        }
        Ok(())
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            suite: self.suite.clone(),
            model: self.model.clone(),
            plan: TrainPlan { seed: self.seed, ..self.plan.clone() },
            strategies: self.bench.strategies.clone(),
            joint_baseline: self.bench.joint_baseline,
            threshold: self.bench.threshold,
            split: self.bench.split,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "clwf", version, about = "Continual learning with weight factorization and EWC on synthetic task suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for all randomness; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded task suite and write every split.
    GenTasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a fresh model on the first task group.
    TrainInitial {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume an interrupted initial run from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Training steps; overrides the configured initial budget.
        #[arg(long)]
        steps: Option<u64>,
        /// Save a resumable checkpoint after this many steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Learn a new task group under one strategy, or resume an interrupted one.
    Continue {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        /// Comma-separated task ids; defaults to the next unseen group.
        #[arg(long, value_delimiter = ',')]
        new_tasks: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Steps per iteration; overrides the configured budget.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Error rates of every registered task.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Strategy label for the rows; defaults to the last phase.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv,json")]
        formats: String,
    },
    /// Merge report files, print group averages and optionally re-emit.
    Report {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv,json")]
        formats: String,
    },
    /// Fraction of shared parameters whose accumulated Fisher value reaches a threshold.
    FisherStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        threshold: f64,
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        normalize: bool,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Full strategy comparison over several seeds.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of consecutive seeds, starting at --seed.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
        strategies: Option<Vec<Strategy>>,
        #[arg(long)]
        initial_steps: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "csv,json")]
        formats: String,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("CLWF_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(CliError::Invalid(msg)) => {
            eprintln!("error: {msg}");
            EXIT_INVALID
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => check(ExperimentConfig::load(p))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.plan.seed = cfg.seed;
    check(cfg.validate())?;
    Ok(cfg)
}

fn require(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    match flag.or_else(|| file.clone()) {
        Some(p) => Ok(p),
        None => invalid(format!("--{name} is required")),
    }
}

fn formats(s: &str) -> CliResult<Vec<Format>> {
    check(parse_formats(s))
}

fn dispatch(command: Command) -> CliResult<i32> {
    match command {
        Command::GenTasks { common, out } => {
            let cfg = load_config(&common)?;
            let out = require(out, &cfg.paths.out, "out")?;
            let suite = generate_suite(&cfg.suite, cfg.seed)?;
            suite.write_dir(&out)?;
            println!("wrote {} tasks in {} groups to {}", suite.tasks.len(), suite.n_groups(), out.display());
            Ok(EXIT_OK)
        }
        Command::TrainInitial { common, data, out, ckpt, steps, stop_after } => {
            let cfg = load_config(&common)?;
            let data = require(data, &cfg.paths.data, "data")?;
            let out = require(out, &cfg.paths.out, "out")?;
            let mut plan = cfg.plan.clone();
            if let Some(s) = steps {
                plan.initial_steps = s;
            }
            check(plan.validate())?;
            let corpus = Corpus::load_dir(&data)?;
            let state = match ckpt {
                Some(dir) => {
                    let (state, saved) = load_checkpoint(&dir)?;
                    match state.active.as_ref().map(|a| a.phase) {
                        Some(Phase::Initial) => {}
                        _ => return invalid(format!("{} holds no interrupted initial run", dir.display())),
                    }
                    let plan = resume_plan(saved, &common, &cfg);
                    return drive(state, &corpus, &plan, stop_after, &out);
                }
                None => {
                    check_compatible(&corpus.suite, &cfg.model)?;
                    let mut state = TrainState::new(cfg.model.clone(), &plan)?;
                    state.begin_iteration(Phase::Initial, &corpus.suite.group_ids(0), plan.initial_steps, &plan)?;
                    state
                }
            };
            drive(state, &corpus, &plan, stop_after, &out)
        }
        Command::Continue { common, ckpt, data, strategy, new_tasks, out, steps, stop_after } => {
            let cfg = load_config(&common)?;
            let ckpt = require(ckpt, &cfg.paths.ckpt, "ckpt")?;
            let data = require(data, &cfg.paths.data, "data")?;
            let out = require(out, &cfg.paths.out, "out")?;
            let strategy = strategy.or(cfg.strategy);
            let corpus = Corpus::load_dir(&data)?;
            let (mut state, saved) = load_checkpoint(&ckpt)?;
            let mut plan = resume_plan(saved, &common, &cfg);
            if let Some(active) = &state.active {
                if let (Some(s), Phase::Continual(running)) = (strategy, active.phase) {
                    if s != running {
                        return invalid(format!("checkpoint is mid-iteration under {}, not {}", running.as_str(), s.as_str()));
                    }
                }
                if let Some(ids) = &new_tasks {
                    if *ids != active.tasks {
                        return invalid("checkpoint is mid-iteration on a different task list");
                    }
                }
                log::info!("resuming {} at step {} of {}", active.phase.label(), active.step, active.total_steps);
                return drive(state, &corpus, &plan, stop_after, &out);
            }
            let Some(strategy) = strategy else {
                return invalid("--strategy is required to start a new iteration");
            };
            if let Some(s) = steps {
                plan.steps_per_iteration = s;
            }
            check(plan.validate())?;
            let tasks = match new_tasks {
                Some(ids) => {
                    for id in &ids {
                        check(corpus.suite.task(id).map(|_| ()))?;
                    }
                    ids
                }
                None => next_group(&corpus.suite, &state)?,
            };
            check(state.begin_iteration(Phase::Continual(strategy), &tasks, plan.steps_per_iteration, &plan))?;
            drive(state, &corpus, &plan, stop_after, &out)
        }
        Command::Evaluate { common, ckpt, data, split, label, out, formats: fmt } => {
            let cfg = load_config(&common)?;
            let ckpt = require(ckpt, &cfg.paths.ckpt, "ckpt")?;
            let data = require(data, &cfg.paths.data, "data")?;
            let fmt = formats(&fmt)?;
            let corpus = Corpus::load_dir(&data)?;
            let (state, _) = load_checkpoint(&ckpt)?;
            let iteration = if state.active.is_some() { state.iteration } else { state.iteration.saturating_sub(1) };
            let label = label.unwrap_or_else(|| {
                let phase = state.active.as_ref().map(|a| a.phase).or_else(|| state.history.last().map(|h| h.phase));
                phase.map_or("initial", Phase::label).to_string()
            });
            let mut report = EvalReport { overhead: Some(OverheadContext::for_model(&state.model)?), ..Default::default() };
            for task in state.model.tasks() {
                let Ok(spec) = corpus.suite.task(task) else {
                    log::warn!("task {task} is not in {}", data.display());
                    continue;
                };
                report.record(&state.model, &[(corpus.get(task, split)?, spec.group)], iteration, &label)?;
            }
            for r in &report.rows {
                println!("{}\tgroup {}\t{}\t{:.4}", r.task_id, r.group, r.split, r.error_rate);
            }
            print!("{}", report.render(split));
            if let Some(out) = out {
                report.emit(&out, &fmt)?;
            }
            Ok(EXIT_OK)
        }
        Command::Report { inputs, split, out, formats: fmt } => {
            let fmt = formats(&fmt)?;
            let mut merged = EvalReport::default();
            for path in &inputs {
                let part = read_report(path)?;
                for row in part.rows {
                    merged.push(row)?;
                }
                merged.importance.extend(part.importance);
                if merged.overhead.is_none() {
                    merged.overhead = part.overhead;
                }
            }
            print!("{}", merged.render(split));
            if let Some(out) = out {
                merged.emit(&out, &fmt)?;
            }
            Ok(EXIT_OK)
        }
        Command::FisherStats { ckpt, threshold, normalize } => {
            if !(threshold >= 0.0) {
                return invalid(format!("--threshold must be ≥ 0, got {threshold}"));
            }
            let (state, _) = load_checkpoint(&ckpt)?;
            let ewc = state.ewc.as_ref().ok_or_else(|| Error::State("checkpoint has no consolidated Fisher".into()))?;
            let fraction = important_fraction(&ewc.fisher_sum, threshold, normalize)?;
            let stats = serde_json::json!({
                "iterations": ewc.iteration_count,
                "n_params": ewc.fisher_sum.len(),
                "n_samples": ewc.fisher_sum.n_samples,
                "max": ewc.fisher_sum.max(),
                "threshold": threshold,
                "normalize": normalize,
                "fraction": fraction,
            });
            println!("{}", serde_json::to_string_pretty(&stats).expect("plain values serialize"));
            Ok(EXIT_OK)
        }
        Command::GradCheck { seed, count } => {
            if count == 0 {
                return invalid("--count must be ≥ 1");
            }
            let (mut base, mut attn): (Option<gradcheck::GradCheck>, Option<gradcheck::GradCheck>) = (None, None);
            for s in seed..seed + count {
                let b = gradcheck::full_check(s)?;
                let a = gradcheck::attention_check(s)?;
                base = Some(match base {
                    None => b,
                    Some(w) => w.merge(b),
                });
                attn = Some(match attn {
                    None => a,
                    Some(w) => w.merge(a),
                });
            }
            let (base, attn) = (base.expect("count ≥ 1"), attn.expect("count ≥ 1"));
            println!("max relative error {:.3e} ({} coordinates, worst in {})", base.max_rel_error, base.coords, base.worst);
            println!("attention model    {:.3e} ({} coordinates, worst in {})", attn.max_rel_error, attn.coords, attn.worst);
            let pass = base.max_rel_error <= GRAD_CHECK_TOLERANCE && attn.max_rel_error <= GRAD_CHECK_TOLERANCE;
            Ok(if pass { EXIT_OK } else { EXIT_RUNTIME })
        }
        Command::Bench { common, out, seeds, strategies, initial_steps, steps, formats: fmt } => {
            let mut cfg = load_config(&common)?;
            let out = require(out, &cfg.paths.out, "out")?;
            if let Some(n) = seeds {
                cfg.bench.seeds = n;
            }
            if let Some(s) = strategies {
                cfg.bench.strategies = s;
            }
            if let Some(s) = initial_steps {
                cfg.plan.initial_steps = s;
            }
            if let Some(s) = steps {
                cfg.plan.steps_per_iteration = s;
            }
            check(cfg.validate())?;
            let fmt = formats(&fmt)?;
            let bc = cfg.bench_config();
            let mut outcomes = Vec::new();
            for seed in cfg.seed..cfg.seed + cfg.bench.seeds as u64 {
                let o = bench::run_seed(&bc, seed)?;
                o.report.emit(&out.join(format!("seed-{seed}")), &fmt)?;
                println!("seed {seed}");
                print!("{}", o.report.render(bc.split));
                outcomes.push(o);
            }
            let summary = bench::summarize(&outcomes, bc.split)?;
            let path = out.join("summary.json");
            let text = serde_json::to_string_pretty(&summary).expect("plain values serialize");
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            for s in &summary.strategies {
                println!(
                    "{:<12} old-group degradation {:+.1}%  new-group error {:.2}%",
                    s.strategy,
                    100.0 * s.mean_old_group_degradation,
                    100.0 * s.mean_new_group_error
                );
            }
            if let Some(j) = summary.mean_joint_new_group_error {
                println!("{:<12} new-group error {:.2}%", bench::JOINT, 100.0 * j);
            }
            Ok(EXIT_OK)
        }
    }
}

fn check_compatible(suite: &TaskSuite, model: &ModelConfig) -> CliResult<()> {
    if suite.config.d_in != model.d_in || suite.config.n_classes != model.n_classes {
        return invalid(format!(
            "data has {}-dim frames and {} classes but the model expects {} and {}",
            suite.config.d_in, suite.config.n_classes, model.d_in, model.n_classes
        ));
    }
    Ok(())
}

/// The checkpoint's plan, replaced by the config file's when one is given;
/// an explicit --seed always wins.
fn resume_plan(saved: TrainPlan, common: &Common, cfg: &ExperimentConfig) -> TrainPlan {
    let mut plan = if common.config.is_some() { cfg.plan.clone() } else { saved };
    if let Some(seed) = common.seed {
        plan.seed = seed;
    }
    plan
}

/// First group with a task the model has not seen yet.
fn next_group(suite: &TaskSuite, state: &TrainState) -> CliResult<Vec<String>> {
    for g in 0..suite.n_groups() {
        let ids = suite.group_ids(g);
        if ids.iter().any(|t| !state.model.has_task(t)) {
            return Ok(ids);
        }
    }
    invalid("every task group has already been learned")
}

/// Runs the active iteration to the end, or for at most `stop_after` steps,
/// and saves the result to `out`.
fn drive(mut state: TrainState, corpus: &Corpus, plan: &TrainPlan, stop_after: Option<u64>, out: &Path) -> CliResult<i32> {
    let active = state.active.as_ref().ok_or_else(|| Error::State("no iteration to run".into()))?;
    let remaining = active.total_steps - active.step;
    let budget = stop_after.map_or(remaining, |n| n.min(remaining));
    for _ in 0..budget {
        state.step(corpus, plan)?;
    }
    let done = state.active.as_ref().is_some_and(|a| a.step == a.total_steps);
    if done {
        state.finish_iteration(corpus, plan)?;
        println!("iteration {} complete ({} global steps)", state.iteration - 1, state.global_step);
    } else {
        let a = state.active.as_ref().expect("still active");
        println!("stopped at step {} of {}; resume with `continue --ckpt {}`", a.step, a.total_steps, out.display());
    }
    save_checkpoint(&state, plan, out)?;
    Ok(EXIT_OK)
}

fn read_report(path: &Path) -> crate::Result<EvalReport> {
    if path.is_dir() {
        return read_report(&path.join("report.json"));
    }
    if path.extension().is_some_and(|e| e == "csv") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return Ok(EvalReport { rows: EvalReport::from_csv(&text)?, ..Default::default() });
    }
    EvalReport::load_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_toml("seed = 3\n[plan]\npeak_lr = 0.002\n").is_ok());
        assert!(ExperimentConfig::from_toml("sed = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[plan]\nlr = 1.0\n").is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = ExperimentConfig { seed: 9, strategy: Some(Strategy::WfEwc), ..Default::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["clwf", "frobnicate"]), EXIT_INVALID);
        assert_eq!(run(["clwf", "grad-check", "--bogus"]), EXIT_INVALID);
        assert_eq!(run(["clwf", "continue", "--strategy", "sgd"]), EXIT_INVALID);
        assert_eq!(run(["clwf", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_required_path_is_invalid() {
        assert_eq!(run(["clwf", "gen-tasks", "--seed", "1"]), EXIT_INVALID);
    }
}
