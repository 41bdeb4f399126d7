use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Differentiable primitives understood by [`Graph`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m, k] × [k, n] → [m, n]`.
    MatMul,
    /// `[m, n] → [n, m]`.
    Transpose,
    /// Element-wise product of equal shapes.
    Hadamard,
    /// Element-wise sum of equal shapes, or `[m, n] + [n]` with the vector
    /// added to every row.
    Add,
    /// `[m] ⊗ [n] → [m, n]`.
    Outer,
    Tanh,
    Relu,
    /// Sum of all elements, producing a scalar.
    Sum,
    /// Averages consecutive groups of `group` rows: `[b·group, d] → [b, d]`.
    MeanPool { group: usize },
    /// Mean negative log-likelihood of `labels` under a row-wise softmax of
    /// logits `[b, c]`, producing a scalar.
    LogSoftmaxNll { labels: Vec<usize> },
    /// Single-head scaled dot-product self-attention applied independently to
    /// every run of `seq_len` rows of `q, k, v: [b·seq_len, d]`.
    SelfAttention { seq_len: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Hadamard => "hadamard",
            Primitive::Add => "add",
            Primitive::Outer => "outer",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Sum => "sum",
            Primitive::MeanPool { .. } => "mean_pool",
            Primitive::LogSoftmaxNll { .. } => "log_softmax_nll",
            Primitive::SelfAttention { .. } => "self_attention",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Hadamard | Primitive::Add | Primitive::Outer => 2,
            Primitive::SelfAttention { .. } => 3,
            _ => 1,
        }
    }

    /// Evaluates the primitive without recording anything.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.eval(inputs).map(|(t, _)| t)
    }

    /// Forward pass plus any cached intermediate needed by the backward rule.
    fn eval(&self, inputs: &[&Tensor]) -> Result<(Tensor, Option<Vec<f64>>)> {
        let op = self.name();
        if inputs.len() != self.arity() {
            return Err(Error::dim(
                op,
                format!("expected {} inputs, got {}", self.arity(), inputs.len()),
            ));
        }
        for t in inputs {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("non-finite input to {op}")));
            }
        }
        let mut aux = None;
        let out = match self {
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = mat_dims(op, a)?;
                let (k2, n) = mat_dims(op, b)?;
                if k != k2 {
                    return Err(shape_err(op, a, b));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
                Tensor { shape: vec![m, n], data: out }
            }
            Primitive::Transpose => {
                let a = inputs[0];
                let (m, n) = mat_dims(op, a)?;
                Tensor { shape: vec![n, m], data: transpose(a.data(), m, n) }
            }
            Primitive::Hadamard => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(shape_err(op, a, b));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor { shape: a.shape().to_vec(), data }
            }
            Primitive::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    Tensor { shape: a.shape().to_vec(), data }
                } else if is_row_bias(a, b) {
                    let n = b.len();
                    let mut data = a.data().to_vec();
                    for row in data.chunks_mut(n) {
                        for (x, bias) in row.iter_mut().zip(b.data()) {
                            *x += bias;
                        }
                    }
                    Tensor { shape: a.shape().to_vec(), data }
                } else {
                    return Err(shape_err(op, a, b));
                }
            }
            Primitive::Outer => {
                let (u, v) = (inputs[0], inputs[1]);
                if u.rank() != 1 || v.rank() != 1 {
                    return Err(shape_err(op, u, v));
                }
                let mut data = Vec::with_capacity(u.len() * v.len());
                for &ui in u.data() {
                    data.extend(v.data().iter().map(|vj| ui * vj));
                }
                Tensor { shape: vec![u.len(), v.len()], data }
            }
            Primitive::Tanh => map_unary(inputs[0], f64::tanh),
            Primitive::Relu => map_unary(inputs[0], |x| x.max(0.0)),
            Primitive::Sum => Tensor { shape: vec![], data: vec![inputs[0].data().iter().sum()] },
            Primitive::MeanPool { group } => {
                let a = inputs[0];
                let (rows, d) = mat_dims(op, a)?;
                if *group == 0 || rows % group != 0 {
                    return Err(Error::dim(
                        op,
                        format!("{rows} rows cannot be pooled in groups of {group}"),
                    ));
                }
                let b = rows / group;
                let mut data = vec![0.0; b * d];
                for (s, out) in data.chunks_mut(d).enumerate() {
                    let block = &a.data()[s * group * d..(s + 1) * group * d];
                    let first = &block[..d];
                    // Offsets from the first frame, so identical frames pool exactly.
                    for frame in block.chunks(d).skip(1) {
                        for ((o, x), x0) in out.iter_mut().zip(frame).zip(first) {
                            *o += x - x0;
                        }
                    }
                    for (o, x0) in out.iter_mut().zip(first) {
                        *o = x0 + *o / *group as f64;
                    }
                }
                Tensor { shape: vec![b, d], data }
            }
            Primitive::LogSoftmaxNll { labels } => {
                let a = inputs[0];
                let (b, c) = match a.shape() {
                    [c] => (1, *c),
                    [b, c] => (*b, *c),
                    _ => return Err(Error::dim(op, format!("logits shape {:?}", a.shape()))),
                };
                if labels.len() != b || b == 0 {
                    return Err(Error::dim(
                        op,
                        format!("{} labels for {b} rows of logits", labels.len()),
                    ));
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
                    return Err(Error::dim(op, format!("label {bad} out of range for {c} classes")));
                }
                let mut probs = Vec::with_capacity(b * c);
                let mut total = 0.0;
                for (row, &y) in a.data().chunks(c).zip(labels) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
                    let lse = max + sum.ln();
                    total += lse - row[y];
                    probs.extend(row.iter().map(|z| (z - lse).exp()));
                }
                aux = Some(probs);
                Tensor { shape: vec![], data: vec![total / b as f64] }
            }
            Primitive::SelfAttention { seq_len } => {
                let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
                let (rows, d) = mat_dims(op, q)?;
                if k.shape() != q.shape() || v.shape() != q.shape() {
                    return Err(Error::dim(
                        op,
                        format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
                    ));
                }
                let l = *seq_len;
                if l == 0 || rows % l != 0 {
                    return Err(Error::dim(op, format!("{rows} rows, sequence length {l}")));
                }
                let scale = 1.0 / (d as f64).sqrt();
                let mut probs = vec![0.0; rows * l];
                let mut out = vec![0.0; rows * d];
                for s in 0..rows / l {
                    let span = s * l * d..(s + 1) * l * d;
                    let p = &mut probs[s * l * l..(s + 1) * l * l];
                    gemm(l, d, l, &q.data()[span.clone()], false, &k.data()[span.clone()], true, p, false);
                    for row in p.chunks_mut(l) {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for x in row.iter_mut() {
                            *x = ((*x - max) * scale).exp();
                            sum += *x;
                        }
                        for x in row.iter_mut() {
                            *x /= sum;
                        }
                    }
                    gemm(l, l, d, p, false, &v.data()[span.clone()], false, &mut out[span], false);
                }
                aux = Some(probs);
                Tensor { shape: vec![rows, d], data: out }
            }
        };
        if !out.is_finite() {
            return Err(Error::Numeric(format!("{op} produced a non-finite value")));
        }
        Ok((out, aux))
    }
}

fn mat_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(op, format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

fn is_row_bias(a: &Tensor, b: &Tensor) -> bool {
    a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.len()
}

fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: a.shape().to_vec(), data: a.data().iter().map(|&x| f(x)).collect() }
}

fn transpose(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

/// Stand-alone evaluation of a primitive; nothing is recorded.
pub fn primitive_forward(kind: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    kind.forward(inputs)
}

/// Handle to a node of a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
struct Node {
    op: Option<Primitive>,
    inputs: Vec<usize>,
    value: Tensor,
    aux: Option<Vec<f64>>,
    requires_grad: bool,
    name: Option<String>,
}

/// A tape of primitive applications, recorded in topological order.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool, name: Option<String>) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite leaf {}",
                name.as_deref().unwrap_or("<unnamed>")
            )));
        }
        self.nodes.push(Node { op: None, inputs: vec![], value: t, aux: None, requires_grad, name });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, false, None)
    }

    /// An unnamed leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, true, None)
    }

    /// A named leaf that receives a gradient, retrievable by name after
    /// [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        self.push_leaf(t, true, Some(name.into()))
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::State("variable does not belong to this graph".into()));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index].value
    }

    /// Applies `kind` to `inputs` and records the result.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let ids = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, aux) = kind.eval(&values)?;
        self.nodes.push(Node { op: Some(kind), inputs: ids, value, aux, requires_grad: false, name: None });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Hadamard, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        self.apply(Primitive::Outer, &[u, v])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean_pool(&mut self, a: Var, group: usize) -> Result<Var> {
        self.apply(Primitive::MeanPool { group }, &[a])
    }

    pub fn log_softmax_nll(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::LogSoftmaxNll { labels }, &[logits])
    }

    pub fn self_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var> {
        self.apply(Primitive::SelfAttention { seq_len }, &[q, k, v])
    }

    /// Reverse-mode sweep from a scalar `loss`. Every gradient-requiring leaf
    /// recorded before `loss` gets an entry; leaves the loss does not depend
    /// on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut out = Gradients { graph: self.id, by_node: BTreeMap::new(), names: BTreeMap::new() };

        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else {
                if node.requires_grad {
                    let g = grads[idx]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.len()]);
                    let t = Tensor { shape: node.value.shape().to_vec(), data: g };
                    if !t.is_finite() {
                        return Err(Error::Numeric("non-finite gradient".into()));
                    }
                    if let Some(name) = &node.name {
                        out.names.insert(name.clone(), idx);
                    }
                    out.by_node.insert(idx, t);
                }
                continue;
            };
            let Some(g) = grads[idx].take() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let contributions = backward_rule(op, &ins, &node.value, node.aux.as_deref(), &g);
            for (&input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(out)
    }
}

/// Vector-Jacobian products of each primitive, one entry per input.
fn backward_rule(
    op: &Primitive,
    ins: &[&Tensor],
    out: &Tensor,
    aux: Option<&[f64]>,
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Primitive::MatMul => {
            let (m, k) = ins[0].dims2().unwrap();
            let n = ins[1].shape()[1];
            let mut da = vec![0.0; m * k];
            gemm(m, n, k, g, false, ins[1].data(), true, &mut da, false);
            let mut db = vec![0.0; k * n];
            gemm(k, m, n, ins[0].data(), true, g, false, &mut db, false);
            vec![Some(da), Some(db)]
        }
        Primitive::Transpose => {
            let (m, n) = ins[0].dims2().unwrap();
            vec![Some(transpose(g, n, m))]
        }
        Primitive::Hadamard => {
            let da = g.iter().zip(ins[1].data()).map(|(x, y)| x * y).collect();
            let db = g.iter().zip(ins[0].data()).map(|(x, y)| x * y).collect();
            vec![Some(da), Some(db)]
        }
        Primitive::Add => {
            let db = if ins[0].shape() == ins[1].shape() {
                g.to_vec()
            } else {
                let n = ins[1].len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                db
            };
            vec![Some(g.to_vec()), Some(db)]
        }
        Primitive::Outer => {
            let (u, v) = (ins[0].data(), ins[1].data());
            let n = v.len();
            let du = g.chunks(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
            let mut dv = vec![0.0; n];
            for (row, ui) in g.chunks(n).zip(u) {
                dv.iter_mut().zip(row).for_each(|(d, gij)| *d += gij * ui);
            }
            vec![Some(du), Some(dv)]
        }
        Primitive::Tanh => {
            vec![Some(g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect())]
        }
        Primitive::Relu => vec![Some(
            g.iter()
                .zip(ins[0].data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Primitive::Sum => vec![Some(vec![g[0]; ins[0].len()])],
        Primitive::MeanPool { group } => {
            let d = ins[0].shape()[1];
            let inv = 1.0 / *group as f64;
            let mut dx = Vec::with_capacity(ins[0].len());
            for row in g.chunks(d) {
                for _ in 0..*group {
                    dx.extend(row.iter().map(|x| x * inv));
                }
            }
            vec![Some(dx)]
        }
        Primitive::LogSoftmaxNll { labels } => {
            let probs = aux.expect("softmax cache");
            let c = probs.len() / labels.len();
            let scale = g[0] / labels.len() as f64;
            let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (row, &y) in dz.chunks_mut(c).zip(labels) {
                row[y] -= scale;
            }
            vec![Some(dz)]
        }
        Primitive::SelfAttention { seq_len } => {
            let probs = aux.expect("attention cache");
            let (rows, d) = ins[0].dims2().unwrap();
            let l = *seq_len;
            let scale = 1.0 / (d as f64).sqrt();
            let (q, k, v) = (ins[0].data(), ins[1].data(), ins[2].data());
            let mut dq = vec![0.0; rows * d];
            let mut dk = vec![0.0; rows * d];
            let mut dv = vec![0.0; rows * d];
            let mut dp = vec![0.0; l * l];
            for s in 0..rows / l {
                let span = s * l * d..(s + 1) * l * d;
                let p = &probs[s * l * l..(s + 1) * l * l];
                let go = &g[span.clone()];
                gemm(l, d, l, go, false, &v[span.clone()], true, &mut dp, false);
                gemm(l, l, d, p, true, go, false, &mut dv[span.clone()], false);
                // Softmax Jacobian, folded with the score scale.
                for (prow, dprow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                    let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                    for (x, pi) in dprow.iter_mut().zip(prow) {
                        *x = pi * (*x - dot) * scale;
                    }
                }
                gemm(l, l, d, &dp, false, &k[span.clone()], false, &mut dq[span.clone()], false);
                gemm(l, l, d, &dp, true, &q[span.clone()], false, &mut dk[span], false);
            }
            vec![Some(dq), Some(dk), Some(dv)]
        }
    }
}

/// Gradients of a scalar with respect to the gradient-requiring leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    by_node: BTreeMap<usize, Tensor>,
    names: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.by_node.get(&v.index)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|i| self.by_node.get(i))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    /// Consumes the gradients, keeping the named entries.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        self.names
            .into_iter()
            .filter_map(|(name, idx)| self.by_node.remove(&idx).map(|t| (name, t)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(primitive_forward(&Primitive::MatMul, &[&eye, &m]).unwrap(), m);
    }

    #[test]
    fn outer_by_hand() {
        let out = primitive_forward(&Primitive::Outer, &[&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])]).unwrap();
        assert_eq!(out, t(&[2, 2], &[3.0, 4.0, 6.0, 8.0]));
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let kind = Primitive::LogSoftmaxNll { labels: vec![2] };
        let out = primitive_forward(&kind, &[&t(&[1, 4], &[0.0; 4])]).unwrap();
        assert_eq!(out.item().unwrap(), 4f64.ln());
        let flat = primitive_forward(&kind, &[&t(&[4], &[0.0; 4])]).unwrap();
        assert_eq!(flat.item().unwrap(), 4f64.ln());
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let err = primitive_forward(&Primitive::MatMul, &[&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        assert!(primitive_forward(&Primitive::Add, &[&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])]).is_err());
        assert!(primitive_forward(&Primitive::Add, &[&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3])]).is_ok());
        let bad_label = Primitive::LogSoftmaxNll { labels: vec![4] };
        assert!(primitive_forward(&bad_label, &[&Tensor::zeros(&[1, 4])]).is_err());
    }

    #[test]
    fn overflowing_output_is_a_numeric_error() {
        let big = t(&[1, 1], &[1e200]);
        let err = primitive_forward(&Primitive::Hadamard, &[&big, &big]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn product_rule_by_hand() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.variable(t(&[2], &[3.0, 4.0])).unwrap();
        let h = g.hadamard(a, b).unwrap();
        let loss = g.sum(h).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", t(&[2], &[1.0, 2.0])).unwrap();
        let unused = g.param("p", t(&[3], &[5.0, 6.0, 7.0])).unwrap();
        let loss = g.sum(a).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.by_name("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_variable_is_a_state_error() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let a = g1.variable(t(&[1], &[1.0])).unwrap();
        assert!(matches!(g2.sum(a), Err(Error::State(_))));
        assert!(matches!(g2.backward(a), Err(Error::State(_))));
    }

    #[test]
    fn mean_pool_of_identical_frames_is_exact() {
        let frame = [0.1, -0.7, 1.0 / 3.0];
        let data: Vec<f64> = frame.iter().cycle().take(3 * 7).cloned().collect();
        let pooled = primitive_forward(&Primitive::MeanPool { group: 7 }, &[&t(&[7, 3], &data)]).unwrap();
        assert_eq!(pooled.data(), &frame);
    }
}
