//! Desk-scale encoder-classifier: a factorized input projection, residual
//! factorized blocks (optionally with self-attention), mean pooling over
//! frames, and a plain softmax head shared by every task.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorized::FactorizedLinear;
use crate::params::{ParamMap, Parameterized};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_classes: usize,
    pub k: usize,
    pub activation: Activation,
    pub use_attention: bool,
    /// Dropout after each block activation; only active when a training RNG
    /// is supplied to the forward pass.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_model: 64,
            n_blocks: 2,
            n_classes: 10,
            k: 4,
            activation: Activation::Tanh,
            use_attention: false,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.k == 0 {
            return Err(Error::Argument("model dimensions and rank must be ≥ 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// A plain dense layer `y = x·Wᵀ + b`, never factorized.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    name: String,
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        let data = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            name: name.to_string(),
            weight: Tensor::matrix(d_out, d_in, data)?,
            bias: Tensor::zeros(&[d_out]),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(format!("{}/weight", self.name), self.weight.clone())?;
        let b = g.param(format!("{}/bias", self.name), self.bias.clone())?;
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        g.add(y, b)
    }
}

/// Residual self-attention sublayer with factorized projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: FactorizedLinear,
    pub k: FactorizedLinear,
    pub v: FactorizedLinear,
    pub o: FactorizedLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attention: Option<Attention>,
    pub ffn: FactorizedLinear,
}

/// A mini-batch of equal-length frame sequences stacked as `[b·seq_len, d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub frames: Tensor,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(frames: Tensor, labels: Vec<usize>, seq_len: usize) -> Result<Self> {
        let rows = frames.dims2().map(|(r, _)| r).unwrap_or(0);
        if labels.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        if seq_len == 0 || rows != labels.len() * seq_len {
            return Err(Error::dim(
                "batch",
                format!("{rows} frame rows for {} sequences of length {seq_len}", labels.len()),
            ));
        }
        Ok(Self { frames, labels, seq_len })
    }

    /// Stacks `[L, d_in]` sequences.
    pub fn from_sequences(seqs: &[(&Tensor, usize)]) -> Result<Self> {
        let Some((first, _)) = seqs.first() else {
            return Err(Error::Argument("empty batch".into()));
        };
        let (l, d) = first
            .dims2()
            .ok_or_else(|| Error::dim("batch", format!("sequence shape {:?}", first.shape())))?;
        let mut data = Vec::with_capacity(seqs.len() * l * d);
        for (x, _) in seqs {
            if x.shape() != [l, d] {
                return Err(Error::dim("batch", format!("sequence shape {:?} vs [{l}, {d}]", x.shape())));
            }
            data.extend_from_slice(x.data());
        }
        let labels = seqs.iter().map(|(_, y)| *y).collect();
        Self::new(Tensor::matrix(seqs.len() * l, d, data)?, labels, l)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderClassifier {
    cfg: ModelConfig,
    input_proj: FactorizedLinear,
    blocks: Vec<Block>,
    output_proj: Linear,
    tasks: Vec<String>,
}

impl ToyEncoderClassifier {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, k) = (cfg.d_model, cfg.k);
        let input_proj = FactorizedLinear::new("input_proj", cfg.d_in, d, k, true, rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let attention = if cfg.use_attention {
                let mut proj = |p: &str| FactorizedLinear::new(format!("block{i}/attn/{p}"), d, d, k, true, rng);
                Some(Attention { q: proj("q")?, k: proj("k")?, v: proj("v")?, o: proj("o")? })
            } else {
                None
            };
            let ffn = FactorizedLinear::new(format!("block{i}/ffn"), d, d, k, true, rng)?;
            blocks.push(Block { attention, ffn });
        }
        let output_proj = Linear::new("output_proj", d, cfg.n_classes, rng)?;
        Ok(Self { cfg, input_proj, blocks, output_proj, tasks: Vec::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Registered tasks, in registration order.
    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn has_task(&self, task: &str) -> bool {
        self.tasks.iter().any(|t| t == task)
    }

    pub fn input_proj(&self) -> &FactorizedLinear {
        &self.input_proj
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn output_proj(&self) -> &Linear {
        &self.output_proj
    }

    pub fn factorized_layers(&self) -> Vec<&FactorizedLinear> {
        let mut out = vec![&self.input_proj];
        for b in &self.blocks {
            if let Some(a) = &b.attention {
                out.extend([&a.q, &a.k, &a.v, &a.o]);
            }
            out.push(&b.ffn);
        }
        out
    }

    fn factorized_layers_mut(&mut self) -> Vec<&mut FactorizedLinear> {
        let mut out = vec![&mut self.input_proj];
        for b in &mut self.blocks {
            if let Some(a) = &mut b.attention {
                out.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.o]);
            }
            out.push(&mut b.ffn);
        }
        out
    }

    /// Gives every factorized layer a fresh factor set for `task`. A duplicate
    /// is rejected before anything is modified.
    pub fn add_language<R: Rng + ?Sized>(&mut self, task: &str, init_scale: f64, rng: &mut R) -> Result<()> {
        if self.has_task(task) {
            return Err(Error::DuplicateTask(task.to_string()));
        }
        if !(init_scale >= 0.0) || !init_scale.is_finite() {
            return Err(Error::Argument(format!("init_scale must be finite and ≥ 0, got {init_scale}")));
        }
        for layer in self.factorized_layers_mut() {
            layer.add_task(task, init_scale, rng)?;
        }
        self.tasks.push(task.to_string());
        Ok(())
    }

    /// Re-registers a task whose factor sets were restored layer by layer.
    pub(crate) fn insert_language(&mut self, task: &str, sets: Vec<crate::factorized::FactorSet>) -> Result<()> {
        if self.has_task(task) {
            return Err(Error::DuplicateTask(task.to_string()));
        }
        let mut layers = self.factorized_layers_mut();
        if sets.len() != layers.len() {
            return Err(Error::Contract(format!("task {task}: {} factor sets for {} layers", sets.len(), layers.len())));
        }
        for (layer, set) in layers.iter_mut().zip(sets) {
            layer.insert_factors(set)?;
        }
        self.tasks.push(task.to_string());
        Ok(())
    }

    fn require_task(&self, task: &str) -> Result<()> {
        if self.has_task(task) {
            Ok(())
        } else {
            Err(Error::UnknownTask(task.to_string()))
        }
    }

    /// Records the forward pass for stacked frames `[b·seq_len, d_in]` and
    /// returns logits `[b, n_classes]`. Dropout is applied only when
    /// `dropout_rng` is given and the configured rate is positive.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        frames: Var,
        seq_len: usize,
        task: &str,
        mut dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        self.require_task(task)?;
        let mut h = self.input_proj.forward(g, frames, task)?;
        for block in &self.blocks {
            if let Some(attn) = &block.attention {
                let q = attn.q.forward(g, h, task)?;
                let k = attn.k.forward(g, h, task)?;
                let v = attn.v.forward(g, h, task)?;
                let a = g.self_attention(q, k, v, seq_len)?;
                let o = attn.o.forward(g, a, task)?;
                h = g.add(h, o)?;
            }
            let pre = block.ffn.forward(g, h, task)?;
            let mut f = match self.cfg.activation {
                Activation::Tanh => g.tanh(pre)?,
                Activation::Relu => g.relu(pre)?,
            };
            if let (Some(rng), true) = (dropout_rng.as_deref_mut(), self.cfg.dropout > 0.0) {
                let shape = g.value(f).shape().to_vec();
                let keep = Bernoulli::new(1.0 - self.cfg.dropout).expect("valid rate");
                let scale = 1.0 / (1.0 - self.cfg.dropout);
                let n: usize = shape.iter().product();
                let mask = (0..n).map(|_| if keep.sample(rng) { scale } else { 0.0 }).collect();
                let mask = g.constant(Tensor::new(shape, mask)?)?;
                f = g.hadamard(f, mask)?;
            }
            h = g.add(h, f)?;
        }
        let pooled = g.mean_pool(h, seq_len)?;
        self.output_proj.forward(g, pooled)
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        match frames.dims2() {
            Some((_, d)) if d == self.cfg.d_in => Ok(()),
            _ => Err(Error::dim(
                "model",
                format!("frames {:?} do not have {} features", frames.shape(), self.cfg.d_in),
            )),
        }
    }

    /// Logits for stacked frames, one row per sequence.
    pub fn logits_batch(&self, frames: &Tensor, seq_len: usize, task: &str) -> Result<Tensor> {
        self.check_frames(frames)?;
        let mut g = Graph::new();
        let x = g.constant(frames.clone())?;
        let out = self.forward_graph(&mut g, x, seq_len, task, None)?;
        Ok(g.value(out).clone())
    }

    /// Logits of a single `[L, d_in]` sequence.
    pub fn forward(&self, x: &Tensor, task: &str) -> Result<Vec<f64>> {
        self.check_frames(x)?;
        let l = x.shape()[0];
        Ok(self.logits_batch(x, l, task)?.into_data())
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &Batch, task: &str) -> Result<f64> {
        self.check_frames(&batch.frames)?;
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, batch, task, None)?;
        Ok(g.value(loss).item().expect("scalar loss"))
    }

    fn loss_graph(
        &self,
        g: &mut Graph,
        batch: &Batch,
        task: &str,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.cfg.n_classes) {
            return Err(Error::Argument(format!("label {bad} out of range for {} classes", self.cfg.n_classes)));
        }
        let x = g.constant(batch.frames.clone())?;
        let logits = self.forward_graph(g, x, batch.seq_len, task, dropout_rng)?;
        g.log_softmax_nll(logits, batch.labels.clone())
    }

    /// Loss and gradients for every parameter the routed task touches: all
    /// shared parameters plus that task's factors.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        task: &str,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(f64, ParamMap)> {
        self.check_frames(&batch.frames)?;
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, batch, task, dropout_rng)?;
        let value = g.value(loss).item().expect("scalar loss");
        Ok((value, g.backward(loss)?.into_named()))
    }

    pub fn predict(&self, x: &Tensor, task: &str) -> Result<usize> {
        Ok(argmax(&self.forward(x, task)?))
    }

    /// Predictions for every sequence of a stacked batch.
    pub fn predict_batch(&self, frames: &Tensor, seq_len: usize, task: &str) -> Result<Vec<usize>> {
        let logits = self.logits_batch(frames, seq_len, task)?;
        Ok(logits.data().chunks(self.cfg.n_classes).map(argmax).collect())
    }

    /// Parameters shared by all tasks: shared weights and biases of every
    /// layer plus the output head.
    pub fn shared_param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for layer in self.factorized_layers() {
            out.extend(layer.shared_param_names());
        }
        out.push("output_proj/weight".into());
        out.push("output_proj/bias".into());
        out
    }

    /// Factor vectors owned by `task` across all layers.
    pub fn task_param_names(&self, task: &str) -> Vec<String> {
        self.factorized_layers()
            .into_iter()
            .flat_map(|l| l.task_param_names(task))
            .collect()
    }

    /// Parameter growth caused by registering one more task.
    pub fn per_task_param_count(&self) -> usize {
        self.factorized_layers()
            .iter()
            .map(|l| 2 * l.k() * (l.d_in() + l.d_out()))
            .sum()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Parameterized for ToyEncoderClassifier {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for layer in self.factorized_layers() {
            layer.visit_params(f);
        }
        f("output_proj/weight", &self.output_proj.weight);
        f("output_proj/bias", &self.output_proj.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for layer in self.factorized_layers_mut() {
            layer.visit_params_mut(f);
        }
        f("output_proj/weight", &mut self.output_proj.weight);
        f("output_proj/bias", &mut self.output_proj.bias);
    }
}
