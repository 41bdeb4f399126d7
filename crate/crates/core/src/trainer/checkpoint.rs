//! Checkpoint averaging and the on-disk checkpoint container.
//!
//! A checkpoint is a directory holding `manifest.json` plus raw
//! little-endian `f32` payloads: `params.bin` (model), and when present
//! `ewc.bin` (Fisher sum and anchor), `adam.bin` (optimizer moments) and
//! `snapshots.bin` (dev-scored candidates of an unfinished iteration). The
//! manifest addresses every tensor by file, byte offset and byte length.
//! Values are rounded to the nearest `f32` on save and widened back on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ActiveIteration, AdamState, Candidate, IterationRecord, Moments, Phase, TrainPlan, TrainState};
use crate::error::{Error, Result};
use crate::ewc::{EwcSchedule, EwcState, FisherDiagonal, FisherEstimator};
use crate::factorized::{FactorRole, FactorSet};
use crate::model::{ModelConfig, ToyEncoderClassifier};
use crate::params::{ParamMap, Parameterized};
use crate::seed;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const FILES: [&str; 4] = ["params.bin", "ewc.bin", "adam.bin", "snapshots.bin"];

/// Element-wise mean of the `n` checkpoints with the highest dev score.
/// Ties go to the later checkpoint (higher index). The mean is taken as an
/// offset from the best checkpoint, so averaging identical checkpoints
/// returns them bit for bit.
pub fn average_checkpoints(checkpoints: &[ParamMap], n: usize, dev_scores: &[f64]) -> Result<ParamMap> {
    if checkpoints.len() != dev_scores.len() {
        return Err(Error::Argument(format!(
            "{} checkpoints but {} scores",
            checkpoints.len(),
            dev_scores.len()
        )));
    }
    if n == 0 || n > checkpoints.len() {
        return Err(Error::Argument(format!("cannot average {n} of {} checkpoints", checkpoints.len())));
    }
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by(|&a, &b| dev_scores[b].total_cmp(&dev_scores[a]).then(b.cmp(&a)));
    let chosen: Vec<&ParamMap> = order[..n].iter().map(|&i| &checkpoints[i]).collect();
    let base = chosen[0];
    let mut out = ParamMap::new();
    for (name, t0) in base {
        let mut acc = vec![0.0; t0.len()];
        for ck in &chosen[1..] {
            let t = ck
                .get(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != t0.shape() {
                return Err(Error::Contract(format!("shape mismatch for {name} across checkpoints")));
            }
            acc.iter_mut().zip(t.data()).zip(t0.data()).for_each(|((a, x), x0)| *a += x - x0);
        }
        let data = acc.iter().zip(t0.data()).map(|(a, x0)| x0 + a / n as f64).collect();
        out.insert(name.clone(), Tensor::new(t0.shape().to_vec(), data)?);
    }
    if chosen.iter().any(|ck| ck.len() != base.len()) {
        return Err(Error::Contract("checkpoints cover different parameters".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset inside `file`.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

/// Random streams are derived from the seed and the position in the run,
/// so this is all that is needed to continue them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub iteration: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcMeta {
    pub estimator: FisherEstimator,
    pub n_samples: usize,
    pub iteration_count: usize,
    pub schedule: EwcSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateMeta {
    pub step: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveMeta {
    pub phase: Phase,
    pub tasks: Vec<String>,
    pub total_steps: u64,
    pub step: u64,
    pub candidates: Vec<CandidateMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub iteration: usize,
    pub step: u64,
    /// Strategy of the iteration in progress, else of the last finished one.
    pub strategy: Option<String>,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub tasks: Vec<String>,
    pub rng: RngState,
    pub history: Vec<IterationRecord>,
    pub active: Option<ActiveMeta>,
    pub ewc: Option<EwcMeta>,
    pub adam_steps: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

struct Writer {
    buffers: BTreeMap<&'static str, Vec<u8>>,
    entries: Vec<TensorEntry>,
}

impl Writer {
    fn push(&mut self, file: &'static str, name: String, t: &Tensor) {
        let buf = self.buffers.entry(file).or_default();
        let offset = buf.len();
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name,
            file: file.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: buf.len() - offset,
        });
    }
}

fn strategy_label(state: &TrainState) -> Option<String> {
    let phase = match &state.active {
        Some(a) => Some(a.phase),
        None => state.history.last().map(|r| r.phase),
    };
    phase.map(|p| p.label().to_string())
}

/// Writes `state` (and the plan that drives it) into `dir`, replacing any
/// checkpoint files already there.
pub fn save_checkpoint(state: &TrainState, plan: &TrainPlan, dir: &Path) -> Result<()> {
    let mut w = Writer { buffers: BTreeMap::new(), entries: Vec::new() };
    state.model.visit_params(&mut |name, t| w.push("params.bin", name.to_string(), t));

    let ewc = state.ewc.as_ref().map(|e| {
        for (name, t) in &e.fisher_sum.values {
            w.push("ewc.bin", format!("ewc/fisher/{name}"), t);
        }
        for (name, t) in &e.anchor {
            w.push("ewc.bin", format!("ewc/anchor/{name}"), t);
        }
        EwcMeta {
            estimator: e.fisher_sum.estimator,
            n_samples: e.fisher_sum.n_samples,
            iteration_count: e.iteration_count,
            schedule: e.schedule,
        }
    });

    let mut adam_steps = BTreeMap::new();
    for (name, m) in &state.adam.moments {
        w.push("adam.bin", format!("adam/m/{name}"), &m.m);
        w.push("adam.bin", format!("adam/v/{name}"), &m.v);
        adam_steps.insert(name.clone(), m.step);
    }

    let active = state.active.as_ref().map(|a| {
        for (i, c) in a.candidates.iter().enumerate() {
            for (name, t) in &c.params {
                w.push("snapshots.bin", format!("snapshot/{i}/{name}"), t);
            }
        }
        ActiveMeta {
            phase: a.phase,
            tasks: a.tasks.clone(),
            total_steps: a.total_steps,
            step: a.step,
            candidates: a.candidates.iter().map(|c| CandidateMeta { step: c.step, score: c.score }).collect(),
        }
    });

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        iteration: state.iteration,
        step: state.global_step,
        strategy: strategy_label(state),
        model: state.model.config().clone(),
        plan: plan.clone(),
        tasks: state.model.tasks().to_vec(),
        rng: RngState {
            seed: plan.seed,
            iteration: state.iteration,
            step: state.active.as_ref().map_or(0, |a| a.step),
        },
        history: state.history.clone(),
        active,
        ewc,
        adam_steps,
        tensors: w.entries,
    };

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for file in FILES {
        let path = dir.join(file);
        match w.buffers.get(file) {
            Some(buf) => fs::write(&path, buf).map_err(|e| Error::io(&path, e))?,
            None if path.exists() => fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
            None => {}
        }
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version { expected: FORMAT_VERSION, found });
    }
    serde_json::from_value(value).map_err(|e| Error::Json { path, source: e })
}

struct Reader {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
    tensors: BTreeMap<String, TensorEntry>,
}

impl Reader {
    fn new(dir: &Path, manifest: &Manifest) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        let mut files = BTreeMap::new();
        for e in &manifest.tensors {
            if !FILES.contains(&e.file.as_str()) || e.dtype != "f32" {
                return Err(format_err(dir, format!("tensor {} has unsupported storage", e.name)));
            }
            let n: usize = e.shape.iter().product();
            if e.length != 4 * n {
                return Err(format_err(dir, format!("tensor {} length disagrees with its shape", e.name)));
            }
            if tensors.insert(e.name.clone(), e.clone()).is_some() {
                return Err(format_err(dir, format!("tensor {} listed twice", e.name)));
            }
            if !files.contains_key(&e.file) {
                let path = dir.join(&e.file);
                files.insert(e.file.clone(), fs::read(&path).map_err(|err| Error::io(&path, err))?);
            }
        }
        for (file, bytes) in &files {
            let used: usize = manifest.tensors.iter().filter(|e| &e.file == file).map(|e| e.length).sum();
            if used != bytes.len() {
                return Err(Error::LengthMismatch { path: dir.join(file), expected: used, found: bytes.len() });
            }
        }
        Ok(Self { dir: dir.to_path_buf(), files, tensors })
    }

    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn get(&self, name: &str) -> Result<Tensor> {
        let e = self
            .tensors
            .get(name)
            .ok_or_else(|| format_err(&self.dir, format!("tensor {name} missing from manifest")))?;
        let bytes = &self.files[&e.file];
        let end = e.offset.checked_add(e.length).filter(|&end| end <= bytes.len()).ok_or_else(|| {
            Error::Truncated { path: self.dir.join(&e.file), expected: e.offset + e.length, found: bytes.len() }
        })?;
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(e.shape.clone(), data)
    }
}

fn format_err(dir: &Path, detail: String) -> Error {
    Error::Format { path: dir.join(MANIFEST), detail }
}

/// Restores a state written by [`save_checkpoint`] together with its plan.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainPlan)> {
    let manifest = read_manifest(dir)?;
    let reader = Reader::new(dir, &manifest)?;

    let mut model = ToyEncoderClassifier::new(manifest.model.clone(), &mut seed::rng(0, &[]))?;
    for task in &manifest.tasks {
        let mut sets = Vec::new();
        for layer in model.factorized_layers() {
            let mut set = FactorSet::zeros(task, layer.d_in(), layer.d_out(), layer.k());
            for role in FactorRole::ALL {
                for i in 0..layer.k() {
                    let name = layer.factor_name(task, role, i);
                    if !reader.has(&name) {
                        return Err(Error::MissingTaskFactors { path: dir.to_path_buf(), task: task.clone() });
                    }
                    let t = reader.get(&name)?;
                    match role {
                        FactorRole::RM => set.r_m[i] = t,
                        FactorRole::VM => set.v_m[i] = t,
                        FactorRole::RB => set.r_b[i] = t,
                        FactorRole::VB => set.v_b[i] = t,
                    }
                }
            }
            sets.push(set);
        }
        model.insert_language(task, sets)?;
    }
    let mut params = ParamMap::new();
    for name in model.param_names() {
        params.insert(name.clone(), reader.get(&name)?);
    }
    model.load_params(&params)?;
    let param_count = params.len();
    let params_listed = manifest.tensors.iter().filter(|e| e.file == "params.bin").count();
    if params_listed != param_count {
        return Err(format_err(dir, "params.bin lists tensors the model does not own".into()));
    }

    let ewc = match &manifest.ewc {
        None => None,
        Some(meta) => {
            let mut fisher = ParamMap::new();
            let mut anchor = ParamMap::new();
            for e in manifest.tensors.iter().filter(|e| e.file == "ewc.bin") {
                if let Some(name) = e.name.strip_prefix("ewc/fisher/") {
                    fisher.insert(name.to_string(), reader.get(&e.name)?);
                } else if let Some(name) = e.name.strip_prefix("ewc/anchor/") {
                    anchor.insert(name.to_string(), reader.get(&e.name)?);
                }
            }
            let fisher = FisherDiagonal { values: fisher, n_samples: meta.n_samples, estimator: meta.estimator };
            let mut state = EwcState::new(fisher, anchor, meta.schedule)?;
            state.iteration_count = meta.iteration_count;
            Some(state)
        }
    };

    let mut adam = AdamState::default();
    for (name, &step) in &manifest.adam_steps {
        let m = reader.get(&format!("adam/m/{name}"))?;
        let v = reader.get(&format!("adam/v/{name}"))?;
        adam.moments.insert(name.clone(), Moments { m, v, step });
    }

    let active = match &manifest.active {
        None => None,
        Some(meta) => {
            let mut candidates = Vec::new();
            for (i, c) in meta.candidates.iter().enumerate() {
                let prefix = format!("snapshot/{i}/");
                let mut params = ParamMap::new();
                for e in manifest.tensors.iter().filter(|e| e.name.starts_with(&prefix)) {
                    params.insert(e.name[prefix.len()..].to_string(), reader.get(&e.name)?);
                }
                candidates.push(Candidate { step: c.step, score: c.score, params });
            }
            Some(ActiveIteration {
                phase: meta.phase,
                tasks: meta.tasks.clone(),
                total_steps: meta.total_steps,
                step: meta.step,
                candidates,
            })
        }
    };

    let names: BTreeSet<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
    debug_assert_eq!(names.len(), manifest.tensors.len());

    let state = TrainState {
        model,
        adam,
        ewc,
        iteration: manifest.iteration,
        global_step: manifest.step,
        history: manifest.history,
        active,
    };
    Ok((state, manifest.plan))
}

/// SHA-256 over the manifest and every payload file, in a fixed order.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for file in std::iter::once(MANIFEST).chain(FILES) {
        let path = dir.join(file);
        if file != MANIFEST && !path.exists() {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update(file.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ck(v: f64) -> ParamMap {
        [("w".to_string(), Tensor::vector(vec![v, -v]).unwrap())].into_iter().collect()
    }

    #[test]
    fn mean_of_two() {
        let avg = average_checkpoints(&[ck(1.0), ck(3.0)], 2, &[0.5, 0.5]).unwrap();
        assert_eq!(avg["w"].data(), &[2.0, -2.0]);
    }

    #[test]
    fn identical_checkpoints_are_exact() {
        let x = 0.1 + 0.2;
        let cks = vec![ck(x); 7];
        let avg = average_checkpoints(&cks, 7, &[0.0; 7]).unwrap();
        assert_eq!(avg["w"].data(), &[x, -x]);
    }

    #[test]
    fn selects_best_scores() {
        let avg = average_checkpoints(&[ck(1.0), ck(10.0), ck(3.0)], 2, &[0.9, 0.8, 0.95]).unwrap();
        assert_eq!(avg["w"].data(), &[2.0, -2.0]);
        // Tie: the later checkpoint wins.
        let avg = average_checkpoints(&[ck(1.0), ck(5.0)], 1, &[0.5, 0.5]).unwrap();
        assert_eq!(avg["w"].data(), &[5.0, -5.0]);
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(average_checkpoints(&[ck(1.0)], 2, &[0.1]).is_err());
        assert!(average_checkpoints(&[ck(1.0)], 1, &[0.1, 0.2]).is_err());
        let other: ParamMap = [("w".to_string(), Tensor::vector(vec![1.0]).unwrap())].into_iter().collect();
        assert!(average_checkpoints(&[ck(1.0), other], 2, &[0.1, 0.2]).is_err());
    }
}
