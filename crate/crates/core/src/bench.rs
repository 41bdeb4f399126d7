//! End-to-end strategy comparison: one initial model per seed, every
//! strategy continued from it over the remaining groups, and a joint
//! baseline trained on all groups with the same step budget.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewc::important_fraction;
use crate::metrics::{EvalReport, ImportancePoint, OverheadContext};
use crate::model::ModelConfig;
use crate::tasks::{generate_suite, Corpus, Dataset, Split, SuiteConfig};
use crate::trainer::{continual_step, train_initial, train_joint, Strategy, TrainPlan, TrainState};

/// Label used for the joint-training baseline in reports.
pub const JOINT: &str = "joint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub strategies: Vec<Strategy>,
    pub joint_baseline: bool,
    pub threshold: f64,
    pub split: Split,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::default(),
            model: ModelConfig::default(),
            plan: TrainPlan::default(),
            strategies: Strategy::ALL.to_vec(),
            joint_baseline: true,
            threshold: 0.25,
            split: Split::Test,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        self.model.validate()?;
        self.plan.validate()?;
        if self.suite.d_in != self.model.d_in || self.suite.n_classes != self.model.n_classes {
            return Err(Error::Argument(format!(
                "suite emits {}-dim frames with {} classes but the model expects {} and {}",
                self.suite.d_in, self.suite.n_classes, self.model.d_in, self.model.n_classes
            )));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Argument(format!("importance threshold must be ≥ 0, got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: EvalReport,
    pub initial: TrainState,
    /// Final state of each strategy after the last group.
    pub finals: BTreeMap<Strategy, TrainState>,
    pub joint: Option<TrainState>,
}

fn eval_sets<'a>(corpus: &'a Corpus, split: Split) -> Result<Vec<(&'a Dataset, usize)>> {
    corpus
        .suite
        .tasks
        .iter()
        .map(|t| Ok((corpus.get(&t.task_id, split)?, t.group)))
        .collect()
}

fn record_importance(report: &mut EvalReport, state: &TrainState, strategy: &str, iteration: usize, tau: f64) -> Result<()> {
    let ewc = state.ewc.as_ref().ok_or_else(|| Error::State("no consolidated Fisher".into()))?;
    for normalize in [true, false] {
        report.importance.push(ImportancePoint {
            strategy: strategy.to_string(),
            iteration,
            threshold: tau,
            normalize,
            fraction: important_fraction(&ewc.fisher_sum, tau, normalize)?,
        });
    }
    Ok(())
}

/// Runs the full comparison for one seed. The suite and the plan are both
/// seeded with `seed`.
pub fn run_seed(cfg: &BenchConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let mut plan = cfg.plan.clone();
    plan.seed = seed;
    let suite = generate_suite(&cfg.suite, seed)?;
    let corpus = Corpus::generate(suite)?;
    let sets = eval_sets(&corpus, cfg.split)?;
    let n_groups = corpus.suite.n_groups();

    log::info!("seed {seed}: initial training on {:?}", corpus.suite.group_ids(0));
    let initial = train_initial(&corpus, &corpus.suite.group_ids(0), &cfg.model, &plan)?;
    let mut report = EvalReport { overhead: Some(OverheadContext::for_model(&initial.model)?), ..Default::default() };

    let mut finals = BTreeMap::new();
    for &strategy in &cfg.strategies {
        let label = strategy.as_str();
        report.record(&initial.model, &sets, 0, label)?;
        record_importance(&mut report, &initial, label, 0, cfg.threshold)?;
        let mut state = initial.clone();
        for group in 1..n_groups {
            log::info!("seed {seed}: {label} on group {group}");
            continual_step(&mut state, &corpus, &corpus.suite.group_ids(group), strategy, &plan)?;
            report.record(&state.model, &sets, group, label)?;
            record_importance(&mut report, &state, label, group, cfg.threshold)?;
        }
        finals.insert(strategy, state);
    }

    let joint = if cfg.joint_baseline {
        let all: Vec<String> = corpus.suite.tasks.iter().map(|t| t.task_id.clone()).collect();
        log::info!("seed {seed}: joint baseline on {} tasks", all.len());
        let state = train_joint(&corpus, &all, n_groups - 1, &cfg.model, &plan)?;
        report.record(&state.model, &sets, n_groups - 1, JOINT)?;
        Some(state)
    } else {
        None
    };
    Ok(SeedOutcome { seed, report, initial, finals, joint })
}

/// Mean-over-seeds statistics for each strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    /// Relative change of the group-0 average error over each continual
    /// iteration, per seed.
    pub old_group_degradation: Vec<f64>,
    pub mean_old_group_degradation: f64,
    /// Error of the last group right after it was learned, per seed.
    pub new_group_error: Vec<f64>,
    pub mean_new_group_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategySummary>,
    /// Joint-baseline error on the last group, per seed.
    pub joint_new_group_error: Vec<f64>,
    pub mean_joint_new_group_error: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Summarizes the group-0 degradation from iteration 0 to the final
/// iteration and the last group's error, averaged over seeds.
pub fn summarize(outcomes: &[SeedOutcome], split: Split) -> Result<BenchSummary> {
    if outcomes.is_empty() {
        return Err(Error::Argument("no seeds to summarize".into()));
    }
    let strategies = outcomes[0].finals.keys().copied().collect::<Vec<_>>();
    let mut out = Vec::new();
    let mut joint = Vec::new();
    for &s in &strategies {
        let (mut deg, mut new) = (Vec::new(), Vec::new());
        for o in outcomes {
            let last = o.finals[&s].iteration - 1;
            let old = o.report.group_average(s.as_str(), 0, 0, split)?;
            let now = o.report.group_average(s.as_str(), last, 0, split)?;
            deg.push(crate::metrics::degradation(old, now)?);
            new.push(o.report.group_average(s.as_str(), last, last, split)?);
        }
        out.push(StrategySummary {
            strategy: s.as_str().to_string(),
            mean_old_group_degradation: mean(&deg),
            old_group_degradation: deg,
            mean_new_group_error: mean(&new),
            new_group_error: new,
        });
    }
    for o in outcomes {
        if o.joint.is_some() {
            let g = o.report.rows.iter().filter(|r| r.strategy == JOINT).map(|r| r.group).max().unwrap_or(0);
            joint.push(o.report.group_average(JOINT, g, g, split)?);
        }
    }
    Ok(BenchSummary {
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        strategies: out,
        mean_joint_new_group_error: (!joint.is_empty()).then(|| mean(&joint)),
        joint_new_group_error: joint,
    })
}

impl BenchSummary {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|x| x.strategy == s.as_str())
    }
}
