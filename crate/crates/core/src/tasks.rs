//! Seeded synthetic "languages": classification tasks that share a latent
//! generator but differ by an input rotation and a label permutation.
//!
//! For task `t`, a sample draws `z ~ N(0, I)` and emits `L` frames
//! `Q_t (z + j_l)`, where the per-frame jitter `j_l` is centred across frames.
//! The clean class is `argmax(B · tanh(A · z))` with `z` recovered from the
//! emitted frames, so an oracle holding `(A, B, Q_t, π_t)` reproduces every
//! noise-free label exactly. The emitted label is `π_t(clean)`, flipped to a
//! uniformly chosen other class with probability `noise_rho`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, Batch};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    /// Number of tasks in each continual-learning group; group 0 is the
    /// initial training set.
    pub groups: Vec<usize>,
    pub d_in: usize,
    pub d_latent: usize,
    pub n_classes: usize,
    pub seq_len: usize,
    pub jitter_std: f64,
    /// Scale of the latent pre-activation `A·z`.
    pub latent_gain: f64,
    pub noise_rho: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Per-task training-set sizes that replace `n_train`.
    pub n_train_overrides: BTreeMap<String, usize>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            groups: vec![4, 2, 2, 2],
            d_in: 32,
            d_latent: 4,
            n_classes: 10,
            seq_len: 8,
            jitter_std: 0.1,
            latent_gain: 1.5,
            noise_rho: 0.05,
            n_train: 2000,
            n_dev: 500,
            n_test: 500,
            n_train_overrides: BTreeMap::new(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.contains(&0) {
            return Err(Error::Argument("every group needs at least one task".into()));
        }
        if self.d_in == 0 || self.d_latent == 0 || self.seq_len == 0 {
            return Err(Error::Argument("suite dimensions must be ≥ 1".into()));
        }
        if self.n_classes < 2 || self.n_classes > u16::MAX as usize {
            return Err(Error::Argument(format!("unsupported class count {}", self.n_classes)));
        }
        if !(0.0..0.5).contains(&self.noise_rho) {
            return Err(Error::Argument(format!("noise_rho must lie in [0, 0.5), got {}", self.noise_rho)));
        }
        if !(self.jitter_std >= 0.0) || !(self.latent_gain > 0.0) {
            return Err(Error::Argument("jitter must be ≥ 0 and latent gain > 0".into()));
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(Error::Argument("every split needs at least one sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub seed: u64,
    pub rotation_seed: u64,
    pub label_perm: Vec<usize>,
    pub noise_rho: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub group: usize,
}

impl TaskSpec {
    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Dev => self.n_dev,
            Split::Test => self.n_test,
        }
    }

    pub fn split_seed(&self, split: Split) -> u64 {
        seed::derive_seed(self.seed, &[split.tag()])
    }
}

/// One labelled sequence: `seq_len × d_in` frames in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f32>,
    pub y: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    pub split: Split,
    pub seed: u64,
    pub seq_len: usize,
    pub d_in: usize,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Frames of one sample as an `[L, d_in]` tensor.
    pub fn sequence(&self, i: usize) -> Tensor {
        let data = self.samples[i].x.iter().map(|&v| v as f64).collect();
        Tensor::matrix(self.seq_len, self.d_in, data).expect("finite generated frames")
    }

    /// Stacks the selected samples into a model batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut data = Vec::with_capacity(indices.len() * self.seq_len * self.d_in);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Argument(format!("sample index {i} out of range")))?;
            data.extend(s.x.iter().map(|&v| v as f64));
            labels.push(s.y as usize);
        }
        Batch::new(Tensor::matrix(indices.len() * self.seq_len, self.d_in, data)?, labels, self.seq_len)
    }

    /// Index batches for one epoch: a seeded shuffle cut into runs of
    /// `batch_size`, the last possibly shorter.
    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<impl Iterator<Item = Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be ≥ 1".into()));
        }
        let order = epoch_order(self.len(), epoch_seed);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Ok(chunks.into_iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DatasetHeader {
            task_id: self.task_id.clone(),
            n: self.len(),
            seq_len: self.seq_len,
            d_in: self.d_in,
            n_classes: self.n_classes,
            seed: self.seed,
            split: self.split,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Json { path: path.into(), source: e })?;
        let frame_len = self.seq_len * self.d_in;
        let mut out = Vec::with_capacity(9 + header.len() + self.len() * (frame_len * 4 + 2));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for s in &self.samples {
            if s.x.len() != frame_len {
                return Err(Error::Contract(format!("sample has {} values, expected {frame_len}", s.x.len())));
            }
            for v in &s.x {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &self.samples {
            out.extend_from_slice(&s.y.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let magic_len = DATASET_MAGIC.len();
        if bytes.len() < magic_len || &bytes[..magic_len] != DATASET_MAGIC {
            return Err(Error::BadMagic(path.into()));
        }
        if bytes.len() < magic_len + 4 {
            return Err(Error::Truncated { path: path.into(), expected: magic_len + 4, found: bytes.len() });
        }
        let hlen = u32::from_le_bytes(bytes[magic_len..magic_len + 4].try_into().unwrap()) as usize;
        let body = magic_len + 4 + hlen;
        if bytes.len() < body {
            return Err(Error::Truncated { path: path.into(), expected: body, found: bytes.len() });
        }
        let header: DatasetHeader = serde_json::from_slice(&bytes[magic_len + 4..body])
            .map_err(|e| Error::Format { path: path.into(), detail: format!("bad header: {e}") })?;
        let frame_len = header.seq_len * header.d_in;
        let expected = body + header.n * (frame_len * 4 + 2);
        if bytes.len() < expected {
            return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(Error::LengthMismatch { path: path.into(), expected, found: bytes.len() });
        }
        let features = &bytes[body..body + header.n * frame_len * 4];
        let labels = &bytes[body + header.n * frame_len * 4..];
        let mut samples = Vec::with_capacity(header.n);
        for (i, chunk) in features.chunks_exact(frame_len * 4).enumerate() {
            let x: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format { path: path.into(), detail: format!("non-finite feature in sample {i}") });
            }
            let y = u16::from_le_bytes(labels[2 * i..2 * i + 2].try_into().unwrap());
            if y as usize >= header.n_classes {
                return Err(Error::Format { path: path.into(), detail: format!("label {y} out of range in sample {i}") });
            }
            samples.push(Sample { x, y });
        }
        Ok(Self {
            task_id: header.task_id,
            split: header.split,
            seed: header.seed,
            seq_len: header.seq_len,
            d_in: header.d_in,
            n_classes: header.n_classes,
            samples,
        })
    }
}

pub const DATASET_MAGIC: &[u8; 5] = b"CLWF1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    task_id: String,
    n: usize,
    #[serde(rename = "L")]
    seq_len: usize,
    d_in: usize,
    n_classes: usize,
    seed: u64,
    split: Split,
}

/// Seeded permutation of `0..n`.
pub fn epoch_order(n: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(epoch_seed, &[]));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub master_seed: u64,
    pub shared_seed: u64,
    pub config: SuiteConfig,
    /// Latent map `[d_latent, d_in]`.
    pub a: Tensor,
    /// Class readout `[n_classes, d_latent]`.
    pub b: Tensor,
    pub tasks: Vec<TaskSpec>,
}

/// Builds a fully reproducible suite from `master_seed`.
pub fn generate_suite(config: &SuiteConfig, master_seed: u64) -> Result<TaskSuite> {
    config.validate()?;
    let shared_seed = seed::derive_seed(master_seed, &[0x5348_4152_4544]);
    let mut rng = seed::rng(shared_seed, &[]);
    let a_std = config.latent_gain / (config.d_in as f64).sqrt();
    let a_dist = Normal::new(0.0, a_std).expect("valid std");
    let a = (0..config.d_latent * config.d_in).map(|_| a_dist.sample(&mut rng)).collect();
    let b = (0..config.n_classes * config.d_latent)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    let mut tasks = Vec::new();
    for (group, &count) in config.groups.iter().enumerate() {
        for _ in 0..count {
            let index = tasks.len();
            let task_id = format!("task{index:02}");
            let task_seed = seed::derive_seed(master_seed, &[1, index as u64]);
            let mut trng = seed::rng(task_seed, &[0]);
            let mut label_perm: Vec<usize> = (0..config.n_classes).collect();
            label_perm.shuffle(&mut trng);
            let n_train = config.n_train_overrides.get(&task_id).copied().unwrap_or(config.n_train);
            if n_train == 0 {
                return Err(Error::Argument(format!("{task_id}: training split override is zero")));
            }
            tasks.push(TaskSpec {
                rotation_seed: seed::derive_seed(task_seed, &[2]),
                task_id,
                seed: task_seed,
                label_perm,
                noise_rho: config.noise_rho,
                n_train,
                n_dev: config.n_dev,
                n_test: config.n_test,
                group,
            });
        }
    }
    Ok(TaskSuite {
        master_seed,
        shared_seed,
        config: config.clone(),
        a: Tensor::matrix(config.d_latent, config.d_in, a)?,
        b: Tensor::matrix(config.n_classes, config.d_latent, b)?,
        tasks,
    })
}

impl TaskSuite {
    pub fn n_groups(&self) -> usize {
        self.config.groups.len()
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn group(&self, group: usize) -> Vec<&TaskSpec> {
        self.tasks.iter().filter(|t| t.group == group).collect()
    }

    pub fn group_ids(&self, group: usize) -> Vec<String> {
        self.group(group).into_iter().map(|t| t.task_id.clone()).collect()
    }

    /// Task-specific orthogonal matrix `Q_t` (`[d_in, d_in]`).
    pub fn rotation(&self, task: &TaskSpec) -> Tensor {
        let d = self.config.d_in;
        let mut rng = seed::rng(task.rotation_seed, &[]);
        let gauss: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(d, d, orthonormalize(&gauss, d)).expect("finite rotation")
    }

    /// Generates one split of one task.
    pub fn dataset(&self, task_id: &str, split: Split) -> Result<Dataset> {
        let task = self.task(task_id)?;
        let cfg = &self.config;
        let (d, l) = (cfg.d_in, cfg.seq_len);
        let q = self.rotation(task);
        let split_seed = task.split_seed(split);
        let mut rng = seed::rng(split_seed, &[]);
        let jitter = Normal::new(0.0, cfg.jitter_std.max(0.0)).expect("valid std");
        let n = task.split_size(split);
        let mut samples = Vec::with_capacity(n);
        let mut frame = vec![0.0f64; d];
        for _ in 0..n {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut jit: Vec<f64> = (0..l * d).map(|_| jitter.sample(&mut rng)).collect();
            for j in 0..d {
                let mean = (0..l).map(|f| jit[f * d + j]).sum::<f64>() / l as f64;
                (0..l).for_each(|f| jit[f * d + j] -= mean);
            }
            let mut x = Vec::with_capacity(l * d);
            for f in 0..l {
                for (j, v) in frame.iter_mut().enumerate() {
                    *v = z[j] + jit[f * d + j];
                }
                for row in q.data().chunks(d) {
                    let v: f64 = row.iter().zip(&frame).map(|(a, b)| a * b).sum();
                    x.push(v as f32);
                }
            }
            let clean = self.clean_label(&q, &x);
            let mut y = task.label_perm[clean];
            if rng.random::<f64>() < task.noise_rho {
                let other = rng.random_range(0..cfg.n_classes - 1);
                y = if other >= y { other + 1 } else { other };
            }
            samples.push(Sample { x, y: y as u16 });
        }
        Ok(Dataset {
            task_id: task.task_id.clone(),
            split,
            seed: split_seed,
            seq_len: l,
            d_in: d,
            n_classes: cfg.n_classes,
            samples,
        })
    }

    /// Noise-free class before the task's label permutation.
    fn clean_label(&self, q: &Tensor, x: &[f32]) -> usize {
        let (d, l) = (self.config.d_in, self.config.seq_len);
        let mut mean = vec![0.0f64; d];
        for frame in x.chunks(d) {
            mean.iter_mut().zip(frame).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= l as f64);
        // z = Qᵀ · mean
        let mut z = vec![0.0f64; d];
        for (row, &m) in q.data().chunks(d).zip(&mean) {
            z.iter_mut().zip(row).for_each(|(zj, &qij)| *zj += qij * m);
        }
        let latent: Vec<f64> = self
            .a
            .data()
            .chunks(d)
            .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect();
        let scores: Vec<f64> = self
            .b
            .data()
            .chunks(self.config.d_latent)
            .map(|row| row.iter().zip(&latent).map(|(a, b)| a * b).sum())
            .collect();
        argmax(&scores)
    }

    /// Prediction of the generator-aware oracle for one sample of `task_id`.
    pub fn oracle_predict(&self, task_id: &str, sample: &Sample) -> Result<usize> {
        let task = self.task(task_id)?;
        let q = self.rotation(task);
        Ok(task.label_perm[self.clean_label(&q, &sample.x)])
    }
}

/// Modified Gram-Schmidt on the columns of a square row-major matrix.
fn orthonormalize(m: &[f64], d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| m[i * d + j]).collect()).collect();
    for j in 0..d {
        for p in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let dot: f64 = done[p].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            rest[0].iter_mut().zip(&done[p]).for_each(|(c, q)| *c -= dot * q);
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = vec![0.0; d * d];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * d + j] = *v;
        }
    }
    out
}

/// On-disk description of a generated suite: enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteManifest {
    pub master_seed: u64,
    pub config: SuiteConfig,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn manifest(&self) -> SuiteManifest {
        SuiteManifest { master_seed: self.master_seed, config: self.config.clone(), tasks: self.tasks.clone() }
    }

    /// Regenerates a suite from its manifest and checks the task list agrees.
    pub fn from_manifest(m: &SuiteManifest) -> Result<Self> {
        let suite = generate_suite(&m.config, m.master_seed)?;
        if suite.tasks != m.tasks {
            return Err(Error::Contract("suite manifest does not match its regenerated tasks".into()));
        }
        Ok(suite)
    }

    /// File name used for one split of one task inside a data directory.
    pub fn dataset_file(task_id: &str, split: Split) -> String {
        format!("{task_id}.{split}.clwf")
    }

    /// Writes `suite.json` plus every split of every task into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("suite.json");
        let json = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        for task in &self.tasks {
            for split in Split::ALL {
                self.dataset(&task.task_id, split)?
                    .save(&dir.join(Self::dataset_file(&task.task_id, split)))?;
            }
        }
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Self> {
        let path = dir.join("suite.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: SuiteManifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        Self::from_manifest(&m)
    }
}

/// Every split of every task in a suite, held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub suite: TaskSuite,
    sets: BTreeMap<(String, Split), Dataset>,
}

impl Corpus {
    /// Generates all splits of all tasks.
    pub fn generate(suite: TaskSuite) -> Result<Self> {
        let mut sets = BTreeMap::new();
        for task in &suite.tasks {
            for split in Split::ALL {
                sets.insert((task.task_id.clone(), split), suite.dataset(&task.task_id, split)?);
            }
        }
        Ok(Self { suite, sets })
    }

    /// Reads a directory written by [`TaskSuite::write_dir`].
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let suite = TaskSuite::read_manifest(dir)?;
        let mut sets = BTreeMap::new();
        for task in &suite.tasks {
            for split in Split::ALL {
                let path = dir.join(TaskSuite::dataset_file(&task.task_id, split));
                let data = Dataset::load(&path)?;
                if data.task_id != task.task_id || data.split != split || data.len() != task.split_size(split) {
                    return Err(Error::Format { path, detail: "dataset header does not match the suite".into() });
                }
                sets.insert((task.task_id.clone(), split), data);
            }
        }
        Ok(Self { suite, sets })
    }

    pub fn get(&self, task_id: &str, split: Split) -> Result<&Dataset> {
        self.sets
            .get(&(task_id.to_string(), split))
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }
}
