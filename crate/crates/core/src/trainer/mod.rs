//! Initial training, continual iterations under the five strategies, and the
//! joint-training baseline.
//!
//! An iteration is driven in three phases so it can be checkpointed and
//! resumed at any step: [`TrainState::begin_iteration`] registers tasks,
//! [`TrainState::step`] runs one optimizer step, and
//! [`TrainState::finish_iteration`] averages checkpoints and consolidates
//! the Fisher information. Every random draw is a pure function of the plan
//! seed, the iteration index and the step, so an interrupted run reproduces
//! the uninterrupted one.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewc::{ewc_penalty, estimate_fisher, EwcSchedule, EwcState, FisherDiagonal, FisherEstimator};
use crate::metrics::evaluate;
use crate::model::{ModelConfig, ToyEncoderClassifier};
use crate::params::{ParamMap, Parameterized};
use crate::seed;
use crate::tasks::{epoch_order, Corpus, Split};

pub use checkpoint::{average_checkpoints, checkpoint_hash, load_checkpoint, save_checkpoint};
pub use optim::{adam_update, clip_gradients, lr_schedule, AdamConfig, AdamState, Moments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    #[serde(rename = "ewc")]
    EwcOnly,
    WfFrozen,
    WfFinetune,
    WfEwc,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Vanilla, Strategy::EwcOnly, Strategy::WfFrozen, Strategy::WfFinetune, Strategy::WfEwc];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::EwcOnly => "ewc",
            Strategy::WfFrozen => "wf_frozen",
            Strategy::WfFinetune => "wf_finetune",
            Strategy::WfEwc => "wf_ewc",
        }
    }

    /// New tasks get their own trainable factors.
    pub fn uses_factors(self) -> bool {
        matches!(self, Strategy::WfFrozen | Strategy::WfFinetune | Strategy::WfEwc)
    }

    pub fn uses_ewc(self) -> bool {
        matches!(self, Strategy::EwcOnly | Strategy::WfEwc)
    }

    pub fn trains_shared(self) -> bool {
        self != Strategy::WfFrozen
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "ewc" | "ewc_only" => Ok(Strategy::EwcOnly),
            "wf_frozen" => Ok(Strategy::WfFrozen),
            "wf_finetune" => Ok(Strategy::WfFinetune),
            "wf_ewc" => Ok(Strategy::WfEwc),
            other => Err(Error::Argument(format!(
                "unknown strategy `{other}` (expected vanilla, ewc, wf_frozen, wf_finetune or wf_ewc)"
            ))),
        }
    }
}

/// What an iteration trains: every registered task jointly (the initial
/// stage and the joint baseline) or a group of new tasks under a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Continual(Strategy),
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Initial => "initial",
            Phase::Continual(s) => s.as_str(),
        }
    }
}

/// Which snapshot the EWC penalty pulls toward after each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Move the anchor to the parameters reached at the end of every iteration.
    #[default]
    Refresh,
    /// Keep the anchor taken after the initial stage.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub initial_steps: u64,
    pub steps_per_iteration: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub grad_clip_norm: f64,
    pub adam: AdamConfig,
    pub ewc: EwcSchedule,
    pub fisher_estimator: FisherEstimator,
    /// Training samples per task used for each Fisher estimate.
    pub fisher_samples_per_task: usize,
    pub anchor_mode: AnchorMode,
    /// Dev scoring interval; every scored snapshot is a checkpoint candidate.
    pub checkpoint_every: u64,
    /// How many of the best-scoring checkpoints are averaged at the end of an
    /// iteration.
    pub average_last_n: usize,
    /// Standard deviation of new factor vectors.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            initial_steps: 20_000,
            steps_per_iteration: 3_000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 400,
            grad_clip_norm: 4.0,
            adam: AdamConfig::default(),
            ewc: EwcSchedule::default(),
            fisher_estimator: FisherEstimator::Variance,
            fisher_samples_per_task: 500,
            anchor_mode: AnchorMode::Refresh,
            checkpoint_every: 250,
            average_last_n: 10,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if self.initial_steps == 0 || self.steps_per_iteration == 0 {
            return bad("step budgets must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return bad(format!("peak_lr must be > 0, got {}", self.peak_lr));
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be ≥ 1".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be > 0, got {}", self.grad_clip_norm));
        }
        if self.fisher_samples_per_task == 0 {
            return bad("fisher_samples_per_task must be ≥ 1".into());
        }
        if self.checkpoint_every == 0 || self.average_last_n == 0 {
            return bad("checkpoint_every and average_last_n must be ≥ 1".into());
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return bad(format!("init_scale must be ≥ 0, got {}", self.init_scale));
        }
        self.adam.validate()?;
        self.ewc.validate()
    }

    pub fn ewc_lambda(&self, step: u64) -> f64 {
        self.ewc.lambda(step)
    }
}

/// A dev-scored snapshot of the parameters trained in the current iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub step: u64,
    pub score: f64,
    pub params: ParamMap,
}

/// An iteration in progress.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveIteration {
    pub phase: Phase,
    /// Tasks whose data this iteration trains on, in round-robin order.
    pub tasks: Vec<String>,
    pub total_steps: u64,
    /// Steps completed so far.
    pub step: u64,
    /// Best-scoring snapshots so far, best first.
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub tasks: Vec<String>,
    pub steps: u64,
    /// Steps of the checkpoints that were averaged, best first.
    pub averaged_steps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub task: String,
    pub loss: f64,
    pub penalty: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ToyEncoderClassifier,
    pub adam: AdamState,
    pub ewc: Option<EwcState>,
    /// Index of the next iteration; the initial stage is iteration 0.
    pub iteration: usize,
    /// Optimizer steps taken over the whole run.
    pub global_step: u64,
    pub history: Vec<IterationRecord>,
    pub active: Option<ActiveIteration>,
}

const TAG_MODEL: u64 = 0x6d6f_6465_6c;
const TAG_FACTORS: u64 = 0x6661_6374;
const TAG_BATCH: u64 = 0x6261_7463_68;
const TAG_DROPOUT: u64 = 0x6472_6f70;

impl TrainState {
    /// A freshly initialized model with no tasks.
    pub fn new(model_cfg: ModelConfig, plan: &TrainPlan) -> Result<Self> {
        plan.validate()?;
        let model = ToyEncoderClassifier::new(model_cfg, &mut seed::rng(plan.seed, &[TAG_MODEL]))?;
        Ok(Self::from_model(model))
    }

    pub fn from_model(model: ToyEncoderClassifier) -> Self {
        Self {
            model,
            adam: AdamState::default(),
            ewc: None,
            iteration: 0,
            global_step: 0,
            history: Vec::new(),
            active: None,
        }
    }

    /// Registers `tasks` and opens an iteration. In the initial phase every
    /// listed task is new and trained with its factors; in a continual phase
    /// the listed tasks are the new group.
    pub fn begin_iteration(&mut self, phase: Phase, tasks: &[String], steps: u64, plan: &TrainPlan) -> Result<()> {
        plan.validate()?;
        if self.active.is_some() {
            return Err(Error::State("an iteration is already in progress".into()));
        }
        if tasks.is_empty() {
            return Err(Error::Argument("an iteration needs at least one task".into()));
        }
        if steps == 0 {
            return Err(Error::Argument("an iteration needs at least one step".into()));
        }
        let mut seen = BTreeSet::new();
        for t in tasks {
            if self.model.has_task(t) || !seen.insert(t) {
                return Err(Error::DuplicateTask(t.clone()));
            }
        }
        if let Phase::Continual(strategy) = phase {
            if strategy.uses_ewc() && self.ewc.is_none() {
                return Err(Error::State(format!("strategy {strategy} needs consolidated EWC state")));
            }
        }
        let init_scale = match phase {
            Phase::Continual(s) if !s.uses_factors() => 0.0,
            _ => plan.init_scale,
        };
        for t in tasks {
            let mut rng = seed::rng(plan.seed, &[TAG_FACTORS, seed::tag(t)]);
            self.model.add_language(t, init_scale, &mut rng)?;
        }
        self.adam = AdamState::default();
        self.active = Some(ActiveIteration {
            phase,
            tasks: tasks.to_vec(),
            total_steps: steps,
            step: 0,
            candidates: Vec::new(),
        });
        Ok(())
    }

    fn active(&self) -> Result<&ActiveIteration> {
        self.active.as_ref().ok_or_else(|| Error::State("no iteration in progress".into()))
    }

    /// Names the active iteration may update.
    pub fn trainable_names(&self) -> Result<BTreeSet<String>> {
        let active = self.active()?;
        let mut names = BTreeSet::new();
        let (shared, factors) = match active.phase {
            Phase::Initial => (true, true),
            Phase::Continual(s) => (s.trains_shared(), s.uses_factors()),
        };
        if shared {
            names.extend(self.model.shared_param_names());
        }
        if factors {
            for t in &active.tasks {
                names.extend(self.model.task_param_names(t));
            }
        }
        Ok(names)
    }

    fn penalized(&self) -> Result<Option<&EwcState>> {
        Ok(match self.active()?.phase {
            Phase::Continual(s) if s.uses_ewc() => self.ewc.as_ref(),
            _ => None,
        })
    }

    /// Task and batch indices used at 1-based step `step` of the current
    /// iteration.
    pub fn batch_plan(&self, corpus: &Corpus, step: u64, plan: &TrainPlan) -> Result<(String, Vec<usize>)> {
        let active = self.active()?;
        let n_tasks = active.tasks.len() as u64;
        let task = &active.tasks[((step - 1) % n_tasks) as usize];
        let visit = (step - 1) / n_tasks;
        let n = corpus.get(task, Split::Train)?.len();
        let per_epoch = n.div_ceil(plan.batch_size) as u64;
        let (epoch, within) = (visit / per_epoch, (visit % per_epoch) as usize);
        let order = epoch_order(
            n,
            seed::derive_seed(plan.seed, &[TAG_BATCH, self.iteration as u64, seed::tag(task), epoch]),
        );
        let start = within * plan.batch_size;
        let end = (start + plan.batch_size).min(n);
        Ok((task.clone(), order[start..end].to_vec()))
    }

    /// Runs one optimizer step of the active iteration.
    pub fn step(&mut self, corpus: &Corpus, plan: &TrainPlan) -> Result<StepInfo> {
        let active = self.active()?;
        if active.step >= active.total_steps {
            return Err(Error::State("iteration budget exhausted; finish the iteration".into()));
        }
        let step = active.step + 1;
        let (task, indices) = self.batch_plan(corpus, step, plan)?;
        let batch = corpus.get(&task, Split::Train)?.batch(&indices)?;
        let trainable = self.trainable_names()?;

        let mut dropout_rng = seed::rng(plan.seed, &[TAG_DROPOUT, self.iteration as u64, step]);
        let (loss, grads) = self.model.loss_and_grads(&batch, &task, Some(&mut dropout_rng))?;
        let mut grads: ParamMap = grads.into_iter().filter(|(n, _)| trainable.contains(n)).collect();

        let mut penalty = 0.0;
        if let Some(ewc) = self.penalized()? {
            let lambda = plan.ewc_lambda(step - 1);
            let mut current = ParamMap::new();
            self.model.visit_params(&mut |name, t| {
                if ewc.fisher_sum.values.contains_key(name) {
                    current.insert(name.to_string(), t.clone());
                }
            });
            let p = ewc_penalty(&current, &ewc.fisher_sum, &ewc.anchor, lambda)?;
            penalty = p.loss;
            for (name, g) in p.grads {
                if !trainable.contains(&name) {
                    continue;
                }
                let total = grads.entry(name).or_insert_with(|| crate::tensor::Tensor::zeros(g.shape()));
                total.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }

        let grad_norm = clip_gradients(&mut grads, plan.grad_clip_norm)?;
        let lr = lr_schedule(step, plan.peak_lr, plan.warmup_steps);
        let mut err = None;
        let adam = &mut self.adam;
        self.model.visit_params_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            if let Some(g) = grads.get(name) {
                if let Err(e) = optim::adam_step(name, p, g, adam, lr, &plan.adam) {
                    err = Some(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }

        self.global_step += 1;
        let active = self.active.as_mut().expect("checked above");
        active.step = step;
        if step % plan.checkpoint_every == 0 || step == active.total_steps {
            self.score_candidate(corpus, plan, &trainable)?;
        }
        Ok(StepInfo { step, task, loss, penalty, grad_norm, lr })
    }

    fn score_candidate(&mut self, corpus: &Corpus, plan: &TrainPlan, trainable: &BTreeSet<String>) -> Result<()> {
        let active = self.active()?;
        let mut acc = 0.0;
        for t in &active.tasks {
            acc += 1.0 - evaluate(&self.model, corpus.get(t, Split::Dev)?, t)?;
        }
        let score = acc / active.tasks.len() as f64;
        let mut params = ParamMap::new();
        self.model.visit_params(&mut |name, t| {
            if trainable.contains(name) {
                params.insert(name.to_string(), t.clone());
            }
        });
        let step = active.step;
        let active = self.active.as_mut().expect("checked above");
        active.candidates.push(Candidate { step, score, params });
        // Best score first; later steps win ties.
        active
            .candidates
            .sort_by(|a, b| b.score.total_cmp(&a.score).then(b.step.cmp(&a.step)));
        active.candidates.truncate(plan.average_last_n);
        Ok(())
    }

    /// Runs the remaining steps of the active iteration.
    pub fn run_to_end(&mut self, corpus: &Corpus, plan: &TrainPlan) -> Result<()> {
        let active = self.active()?;
        let remaining = active.total_steps - active.step;
        for _ in 0..remaining {
            let info = self.step(corpus, plan)?;
            if info.step % 1000 == 0 {
                log::debug!(
                    "iteration {} step {} task {} loss {:.4} penalty {:.3e} lr {:.2e}",
                    self.iteration, info.step, info.task, info.loss, info.penalty, info.lr
                );
            }
        }
        Ok(())
    }

    /// Averages the best checkpoints, estimates the Fisher information on the
    /// iteration's training data, consolidates it and closes the iteration.
    pub fn finish_iteration(&mut self, corpus: &Corpus, plan: &TrainPlan) -> Result<FisherDiagonal> {
        let active = self.active()?.clone();
        if active.step != active.total_steps {
            return Err(Error::State(format!(
                "iteration stopped at step {} of {}",
                active.step, active.total_steps
            )));
        }
        let snapshots: Vec<ParamMap> = active.candidates.iter().map(|c| c.params.clone()).collect();
        let scores: Vec<f64> = active.candidates.iter().map(|c| c.score).collect();
        // Candidates are already ranked, so plain averaging keeps that order.
        let averaged = average_checkpoints(&snapshots, snapshots.len(), &scores)?;
        self.model.load_params(&averaged)?;

        let fisher = self.estimate_fisher(corpus, &active.tasks, plan)?;
        let anchor = self.shared_snapshot();
        match &mut self.ewc {
            None => self.ewc = Some(EwcState::new(fisher.clone(), anchor, plan.ewc)?),
            Some(state) => {
                let new_anchor = (plan.anchor_mode == AnchorMode::Refresh).then_some(anchor);
                state.schedule = plan.ewc;
                state.consolidate(&fisher, new_anchor)?;
            }
        }
        self.history.push(IterationRecord {
            iteration: self.iteration,
            phase: active.phase,
            tasks: active.tasks.clone(),
            steps: active.total_steps,
            averaged_steps: active.candidates.iter().map(|c| c.step).collect(),
        });
        self.iteration += 1;
        self.active = None;
        self.adam = AdamState::default();
        Ok(fisher)
    }

    /// Current values of every shared parameter.
    pub fn shared_snapshot(&self) -> ParamMap {
        let names: BTreeSet<String> = self.model.shared_param_names().into_iter().collect();
        let mut out = ParamMap::new();
        self.model.visit_params(&mut |name, t| {
            if names.contains(name) {
                out.insert(name.to_string(), t.clone());
            }
        });
        out
    }

    /// Fisher diagonal of the shared parameters over the first
    /// `fisher_samples_per_task` training samples of each task.
    pub fn estimate_fisher(&self, corpus: &Corpus, tasks: &[String], plan: &TrainPlan) -> Result<FisherDiagonal> {
        let mut items = Vec::new();
        for t in tasks {
            let data = corpus.get(t, Split::Train)?;
            items.extend((0..data.len().min(plan.fisher_samples_per_task)).map(|i| (t.clone(), i)));
        }
        let names = self.model.shared_param_names();
        estimate_fisher(&items, &names, plan.fisher_estimator, |(task, i)| {
            let batch = corpus.get(task, Split::Train)?.batch(&[*i])?;
            Ok(self.model.loss_and_grads(&batch, task, None)?.1)
        })
    }

    /// Strategy the active iteration runs under, if continual.
    pub fn strategy(&self) -> Option<Strategy> {
        match self.active.as_ref()?.phase {
            Phase::Continual(s) => Some(s),
            Phase::Initial => None,
        }
    }
}

/// Trains a fresh model on `tasks` jointly for `plan.initial_steps` and
/// consolidates it. This is iteration 0 of every continual run.
pub fn train_initial(corpus: &Corpus, tasks: &[String], model_cfg: &ModelConfig, plan: &TrainPlan) -> Result<TrainState> {
    let mut state = TrainState::new(model_cfg.clone(), plan)?;
    state.begin_iteration(Phase::Initial, tasks, plan.initial_steps, plan)?;
    state.run_to_end(corpus, plan)?;
    state.finish_iteration(corpus, plan)?;
    Ok(state)
}

/// Adds `new_tasks` and trains them for one iteration under `strategy`.
pub fn continual_step(
    state: &mut TrainState,
    corpus: &Corpus,
    new_tasks: &[String],
    strategy: Strategy,
    plan: &TrainPlan,
) -> Result<FisherDiagonal> {
    state.begin_iteration(Phase::Continual(strategy), new_tasks, plan.steps_per_iteration, plan)?;
    state.run_to_end(corpus, plan)?;
    state.finish_iteration(corpus, plan)
}

/// Baseline that sees every task's data at once, with the same total step
/// budget as the initial stage plus `continual_iterations` iterations.
pub fn train_joint(
    corpus: &Corpus,
    tasks: &[String],
    continual_iterations: usize,
    model_cfg: &ModelConfig,
    plan: &TrainPlan,
) -> Result<TrainState> {
    let steps = plan.initial_steps + continual_iterations as u64 * plan.steps_per_iteration;
    let mut state = TrainState::new(model_cfg.clone(), plan)?;
    state.begin_iteration(Phase::Initial, tasks, steps, plan)?;
    state.run_to_end(corpus, plan)?;
    state.finish_iteration(corpus, plan)?;
    Ok(state)
}
