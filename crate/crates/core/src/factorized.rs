//! Linear layers whose weight is `W_S ⊙ W_M + W_B`, with a shared `W_S` and
//! per-task rank-`k` factors
//!
//! ```text
//! W_M = 1 + Σ_i v_m[i] ⊗ r_m[i]
//! W_B =     Σ_i v_b[i] ⊗ r_b[i]
//! ```
//!
//! Weights are `[d_out, d_in]` and applied to row-major inputs `[n, d_in]`,
//! so `r` vectors live in input space and `v` vectors in output space. The
//! ones-offset on `W_M` makes a task with zero factors reduce exactly to the
//! shared weight.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::{Graph, Tensor, Var};

/// Which of the four factor lists a vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorRole {
    RM,
    VM,
    RB,
    VB,
}

impl FactorRole {
    pub const ALL: [FactorRole; 4] = [FactorRole::RM, FactorRole::VM, FactorRole::RB, FactorRole::VB];

    pub fn as_str(self) -> &'static str {
        match self {
            FactorRole::RM => "r_m",
            FactorRole::VM => "v_m",
            FactorRole::RB => "r_b",
            FactorRole::VB => "v_b",
        }
    }

    /// `r` vectors are input-sized, `v` vectors output-sized.
    fn is_input_side(self) -> bool {
        matches!(self, FactorRole::RM | FactorRole::RB)
    }
}

/// One task's rank-`k` factors for a single layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub task_id: String,
    pub r_m: Vec<Tensor>,
    pub v_m: Vec<Tensor>,
    pub r_b: Vec<Tensor>,
    pub v_b: Vec<Tensor>,
}

impl FactorSet {
    pub fn zeros(task_id: &str, d_in: usize, d_out: usize, k: usize) -> Self {
        let r = || vec![Tensor::zeros(&[d_in]); k];
        let v = || vec![Tensor::zeros(&[d_out]); k];
        Self { task_id: task_id.to_string(), r_m: r(), v_m: v(), r_b: r(), v_b: v() }
    }

    pub fn k(&self) -> usize {
        self.r_m.len()
    }

    pub fn role(&self, role: FactorRole) -> &[Tensor] {
        match role {
            FactorRole::RM => &self.r_m,
            FactorRole::VM => &self.v_m,
            FactorRole::RB => &self.r_b,
            FactorRole::VB => &self.v_b,
        }
    }

    fn role_mut(&mut self, role: FactorRole) -> &mut Vec<Tensor> {
        match role {
            FactorRole::RM => &mut self.r_m,
            FactorRole::VM => &mut self.v_m,
            FactorRole::RB => &mut self.r_b,
            FactorRole::VB => &mut self.v_b,
        }
    }

    fn conforms(&self, d_in: usize, d_out: usize, k: usize) -> bool {
        FactorRole::ALL.iter().all(|&role| {
            let want = if role.is_input_side() { d_in } else { d_out };
            let list = self.role(role);
            list.len() == k && list.iter().all(|t| t.shape() == [want])
        })
    }
}

/// Extra parameters needed to specialise one `d_out × d_in` matrix for one
/// more task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamOverhead {
    pub added_per_task: usize,
    pub fraction_of_dense: f64,
}

/// Counts the `2k(d_in + d_out)` factor entries a new task adds to one layer.
pub fn param_overhead(k: usize, d_in: usize, d_out: usize) -> Result<ParamOverhead> {
    if k == 0 || d_in == 0 || d_out == 0 {
        return Err(Error::Argument(format!(
            "overhead needs positive sizes, got k={k}, d_in={d_in}, d_out={d_out}"
        )));
    }
    let added_per_task = 2 * k * (d_in + d_out);
    Ok(ParamOverhead {
        added_per_task,
        fraction_of_dense: added_per_task as f64 / (d_in * d_out) as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLinear {
    name: String,
    d_in: usize,
    d_out: usize,
    k: usize,
    shared: Tensor,
    shared_bias: Option<Tensor>,
    factors: BTreeMap<String, FactorSet>,
}

impl FactorizedLinear {
    /// Shared weight drawn from `N(0, 1/d_in)`, bias zero, no tasks.
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (d_in.max(1) as f64).sqrt()).expect("valid std");
        let data = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        let shared = Tensor::matrix(d_out, d_in, data)?;
        Self::from_parts(name, shared, bias.then(|| Tensor::zeros(&[d_out])), k)
    }

    pub fn from_parts(
        name: impl Into<String>,
        shared: Tensor,
        shared_bias: Option<Tensor>,
        k: usize,
    ) -> Result<Self> {
        let name = name.into();
        let (d_out, d_in) = shared
            .dims2()
            .ok_or_else(|| Error::dim("factorized_linear", format!("shared weight shape {:?}", shared.shape())))?;
        if d_in == 0 || d_out == 0 || k == 0 {
            return Err(Error::Argument(format!("layer {name}: sizes and rank must be positive")));
        }
        if let Some(b) = &shared_bias {
            if b.shape() != [d_out] {
                return Err(Error::dim("factorized_linear", format!("bias shape {:?}", b.shape())));
            }
        }
        Ok(Self { name, d_in, d_out, k, shared, shared_bias, factors: BTreeMap::new() })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shared(&self) -> &Tensor {
        &self.shared
    }

    pub fn shared_bias(&self) -> Option<&Tensor> {
        self.shared_bias.as_ref()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.factors.keys().map(String::as_str)
    }

    pub fn has_task(&self, task: &str) -> bool {
        self.factors.contains_key(task)
    }

    pub fn factors(&self, task: &str) -> Result<&FactorSet> {
        self.factors.get(task).ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn factor_prefix(&self, task: &str) -> String {
        format!("{}/task/{}/", self.name, task)
    }

    pub fn factor_name(&self, task: &str, role: FactorRole, i: usize) -> String {
        format!("{}/task/{}/{}/{}", self.name, task, role.as_str(), i)
    }

    /// Registers `task` with factor entries drawn i.i.d. from
    /// `N(0, init_scale²)`. Existing parameters are untouched.
    pub fn add_task<R: Rng + ?Sized>(&mut self, task: &str, init_scale: f64, rng: &mut R) -> Result<&FactorSet> {
        if self.factors.contains_key(task) {
            return Err(Error::DuplicateTask(task.to_string()));
        }
        if !(init_scale >= 0.0) || !init_scale.is_finite() {
            return Err(Error::Argument(format!("init_scale must be finite and ≥ 0, got {init_scale}")));
        }
        let mut set = FactorSet::zeros(task, self.d_in, self.d_out, self.k);
        if init_scale > 0.0 {
            let normal = Normal::new(0.0, init_scale).expect("valid std");
            for role in FactorRole::ALL {
                for t in set.role_mut(role) {
                    t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
                }
            }
        }
        Ok(self.factors.entry(task.to_string()).or_insert(set))
    }

    /// Registers an externally built factor set.
    pub fn insert_factors(&mut self, set: FactorSet) -> Result<()> {
        if self.factors.contains_key(&set.task_id) {
            return Err(Error::DuplicateTask(set.task_id));
        }
        if !set.conforms(self.d_in, self.d_out, self.k) {
            return Err(Error::Contract(format!(
                "factors for task {} do not match layer {} ({}→{}, k={})",
                set.task_id, self.name, self.d_in, self.d_out, self.k
            )));
        }
        self.factors.insert(set.task_id.clone(), set);
        Ok(())
    }

    /// Dense `(W_M, W_B)` for `task`, both `[d_out, d_in]`.
    pub fn materialize_task_matrices(&self, task: &str) -> Result<(Tensor, Tensor)> {
        let set = self.factors(task)?;
        let mut wm = vec![1.0; self.d_out * self.d_in];
        let mut wb = vec![0.0; self.d_out * self.d_in];
        accumulate_outer(&mut wm, &set.v_m, &set.r_m);
        accumulate_outer(&mut wb, &set.v_b, &set.r_b);
        Ok((
            Tensor::matrix(self.d_out, self.d_in, wm)?,
            Tensor::matrix(self.d_out, self.d_in, wb)?,
        ))
    }

    /// `W_S ⊙ W_M + W_B` for `task`.
    pub fn effective_weight(&self, task: &str) -> Result<Tensor> {
        let (wm, wb) = self.materialize_task_matrices(task)?;
        let data = self
            .shared
            .data()
            .iter()
            .zip(wm.data())
            .zip(wb.data())
            .map(|((s, m), b)| s * m + b)
            .collect();
        Tensor::matrix(self.d_out, self.d_in, data)
    }

    /// Records `x · (W_S ⊙ W_M + W_B)ᵀ (+ bias)` for rows `x: [n, d_in]`.
    ///
    /// The shared weight, the bias and the routed task's factors become named
    /// graph parameters; other tasks' factors are not touched.
    pub fn forward(&self, g: &mut Graph, x: Var, task: &str) -> Result<Var> {
        let set = self.factors(task)?;
        let cols = g.value(x).dims2().map(|(_, c)| c);
        if cols != Some(self.d_in) {
            return Err(Error::dim(
                "factorized_linear",
                format!("layer {} expects [n, {}], got {:?}", self.name, self.d_in, g.value(x).shape()),
            ));
        }
        let ws = g.param(self.weight_name(), self.shared.clone())?;
        let s = self.sum_of_outers(g, task, set, FactorRole::VM, FactorRole::RM)?;
        let ones = g.constant(Tensor::filled(&[self.d_out, self.d_in], 1.0))?;
        let wm = g.add(ones, s)?;
        let scaled = g.hadamard(ws, wm)?;
        let wb = self.sum_of_outers(g, task, set, FactorRole::VB, FactorRole::RB)?;
        let w = g.add(scaled, wb)?;
        let wt = g.transpose(w)?;
        let mut y = g.matmul(x, wt)?;
        if let Some(b) = &self.shared_bias {
            let bias = g.param(self.bias_name(), b.clone())?;
            y = g.add(y, bias)?;
        }
        Ok(y)
    }

    fn sum_of_outers(
        &self,
        g: &mut Graph,
        task: &str,
        set: &FactorSet,
        v_role: FactorRole,
        r_role: FactorRole,
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for i in 0..self.k {
            let v = g.param(self.factor_name(task, v_role, i), set.role(v_role)[i].clone())?;
            let r = g.param(self.factor_name(task, r_role, i), set.role(r_role)[i].clone())?;
            let term = g.outer(v, r)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("rank is positive"))
    }

    /// Convenience forward that evaluates on a throwaway graph.
    pub fn apply(&self, x: &Tensor, task: &str) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let y = self.forward(&mut g, xv, task)?;
        Ok(g.value(y).clone())
    }

    /// Names of the shared (non-factor) parameters.
    pub fn shared_param_names(&self) -> Vec<String> {
        let mut out = vec![self.weight_name()];
        if self.shared_bias.is_some() {
            out.push(self.bias_name());
        }
        out
    }

    /// Names of every factor vector registered for `task`.
    pub fn task_param_names(&self, task: &str) -> Vec<String> {
        if !self.has_task(task) {
            return Vec::new();
        }
        FactorRole::ALL
            .iter()
            .flat_map(|&role| (0..self.k).map(move |i| (role, i)))
            .map(|(role, i)| self.factor_name(task, role, i))
            .collect()
    }
}

fn accumulate_outer(out: &mut [f64], vs: &[Tensor], rs: &[Tensor]) {
    for (v, r) in vs.iter().zip(rs) {
        let n = r.len();
        for (row, vi) in out.chunks_mut(n).zip(v.data()) {
            for (o, rj) in row.iter_mut().zip(r.data()) {
                *o += vi * rj;
            }
        }
    }
}

impl Parameterized for FactorizedLinear {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&self.weight_name(), &self.shared);
        if let Some(b) = &self.shared_bias {
            f(&self.bias_name(), b);
        }
        for (task, set) in &self.factors {
            for role in FactorRole::ALL {
                for (i, t) in set.role(role).iter().enumerate() {
                    f(&self.factor_name(task, role, i), t);
                }
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let weight = self.weight_name();
        let bias = self.bias_name();
        f(&weight, &mut self.shared);
        if let Some(b) = &mut self.shared_bias {
            f(&bias, b);
        }
        let name = self.name.clone();
        for (task, set) in self.factors.iter_mut() {
            for role in FactorRole::ALL {
                for (i, t) in set.role_mut(role).iter_mut().enumerate() {
                    f(&format!("{name}/task/{task}/{}/{i}", role.as_str()), t);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(d_in: usize, d_out: usize, k: usize, seed: u64) -> FactorizedLinear {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FactorizedLinear::new("l", d_in, d_out, k, true, &mut rng).unwrap()
    }

    #[test]
    fn zero_factors_give_identity_offsets() {
        let mut l = layer(3, 2, 2, 1);
        l.add_task("a", 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (wm, wb) = l.materialize_task_matrices("a").unwrap();
        assert!(wm.data().iter().all(|&v| v == 1.0));
        assert!(wb.data().iter().all(|&v| v == 0.0));
        assert_eq!(&l.effective_weight("a").unwrap(), l.shared());
    }

    #[test]
    fn rank_one_multiplicative_by_hand() {
        let shared = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let mut l = FactorizedLinear::from_parts("l", shared, None, 1).unwrap();
        let mut set = FactorSet::zeros("a", 2, 2, 1);
        set.v_m[0] = Tensor::vector(vec![1.0, 2.0]).unwrap();
        set.r_m[0] = Tensor::vector(vec![3.0, 4.0]).unwrap();
        l.insert_factors(set).unwrap();
        let (wm, _) = l.materialize_task_matrices("a").unwrap();
        assert_eq!(wm.data(), &[4.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn unknown_and_duplicate_tasks() {
        let mut l = layer(2, 2, 1, 2);
        assert!(matches!(l.materialize_task_matrices("x"), Err(Error::UnknownTask(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        l.add_task("x", 0.1, &mut rng).unwrap();
        let before = l.clone();
        assert!(matches!(l.add_task("x", 0.1, &mut rng), Err(Error::DuplicateTask(_))));
        assert_eq!(l, before);
        assert!(l.add_task("y", -1.0, &mut rng).is_err());
    }

    #[test]
    fn zero_init_forward_equals_shared_forward() {
        let mut l = layer(4, 3, 2, 3);
        l.add_task("a", 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.5, -1.0, 2.0, 0.25, 1.5, 0.0, -0.3, 0.9]).unwrap();
        let y = l.apply(&x, "a").unwrap();
        for n in 0..2 {
            for o in 0..3 {
                let mut acc = 0.0;
                for i in 0..4 {
                    acc += l.shared().data()[o * 4 + i] * x.data()[n * 4 + i];
                }
                acc += l.shared_bias().unwrap().data()[o];
                assert!((y.data()[n * 3 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn add_task_is_deterministic_and_isolated() {
        let mut a = layer(5, 4, 2, 4);
        let mut b = a.clone();
        a.add_task("t", 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        b.add_task("t", 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.factors("t").unwrap(), b.factors("t").unwrap());

        let before = a.snapshot();
        a.add_task("u", 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let after = a.snapshot();
        for (name, t) in &before {
            assert_eq!(after[name].data(), t.data(), "{name} changed");
        }
        assert_eq!(after.len(), before.len() + 4 * 2);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut l = layer(3, 2, 1, 5);
        l.add_task("a", 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(l.apply(&Tensor::zeros(&[1, 4]), "a"), Err(Error::Dimension { .. })));
    }

    #[test]
    fn overhead_counts() {
        let o = param_overhead(8, 1024, 1024).unwrap();
        assert_eq!(o.added_per_task, 32768);
        assert!((o.fraction_of_dense - 0.03125).abs() < 1e-15);
        let tiny = param_overhead(1, 2, 2).unwrap();
        assert_eq!(tiny.added_per_task, 8);
        assert_eq!(tiny.fraction_of_dense, 2.0);
        assert!(param_overhead(0, 2, 2).is_err());
    }

    #[test]
    fn param_names_follow_layout() {
        let mut l = layer(2, 2, 2, 6);
        l.add_task("de", 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names = l.param_names();
        assert!(names.contains(&"l/weight".to_string()));
        assert!(names.contains(&"l/task/de/v_b/1".to_string()));
        assert_eq!(l.task_param_names("de").len(), 8);
        assert_eq!(l.shared_param_names(), vec!["l/weight", "l/bias"]);
    }
}
