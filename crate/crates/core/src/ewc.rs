//! Elastic weight consolidation: Fisher-diagonal importance, accumulation
//! across iterations, and the quadratic penalty
//! `(λ/2) Σ_j f_j (θ_j − θ⁰_j)²`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamMap;
use crate::tensor::Tensor;

/// How per-sample gradients are reduced into an importance value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FisherEstimator {
    /// Population variance `E[g²] − E[g]²`.
    #[default]
    Variance,
    /// Uncentred second moment `E[g²]`.
    MeanSquare,
}

impl FisherEstimator {
    pub fn as_str(self) -> &'static str {
        match self {
            FisherEstimator::Variance => "variance",
            FisherEstimator::MeanSquare => "mean_square",
        }
    }
}

/// Non-negative per-parameter importance values.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    pub values: ParamMap,
    pub n_samples: usize,
    pub estimator: FisherEstimator,
}

impl FisherDiagonal {
    pub fn zeros_like(params: &ParamMap, estimator: FisherEstimator) -> Self {
        let values = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self { values, n_samples: 0, estimator }
    }

    /// Number of scalar coordinates covered.
    pub fn len(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max(&self) -> f64 {
        self.values
            .values()
            .flat_map(|t| t.data().iter().copied())
            .fold(0.0, f64::max)
    }
}

/// Estimates the Fisher diagonal of `param_names` from one gradient per
/// sample.
///
/// `sample_grads` returns the gradient of the loss on a single sample; it
/// must contain every requested name. Moments are reduced in dataset order.
pub fn estimate_fisher<S, F>(
    dataset: &[S],
    param_names: &[String],
    estimator: FisherEstimator,
    mut sample_grads: F,
) -> Result<FisherDiagonal>
where
    F: FnMut(&S) -> Result<BTreeMap<String, Tensor>>,
{
    if dataset.is_empty() {
        return Err(Error::Argument("Fisher estimation needs at least one sample".into()));
    }
    if param_names.is_empty() {
        return Err(Error::Argument("Fisher estimation needs at least one parameter".into()));
    }
    if dataset.len() == 1 && estimator == FisherEstimator::Variance {
        log::warn!("variance Fisher estimate from a single sample is identically zero");
    }
    let mut sum: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut sum_sq: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();

    for sample in dataset {
        let grads = sample_grads(sample)?;
        for name in param_names {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
            let shape = shapes.entry(name).or_insert_with(|| g.shape().to_vec());
            if shape != g.shape() {
                return Err(Error::Contract(format!("gradient shape changed for {name}")));
            }
            let s = sum.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            let s2 = sum_sq.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for ((a, b), &x) in s.iter_mut().zip(s2.iter_mut()).zip(g.data()) {
                *a += x;
                *b += x * x;
            }
        }
    }

    let n = dataset.len() as f64;
    let mut values = ParamMap::new();
    for name in param_names {
        let s = &sum[name.as_str()];
        let s2 = &sum_sq[name.as_str()];
        let data = s
            .iter()
            .zip(s2)
            .map(|(&a, &b)| {
                let second = b / n;
                match estimator {
                    FisherEstimator::MeanSquare => second,
                    FisherEstimator::Variance => {
                        let mean = a / n;
                        (second - mean * mean).max(0.0)
                    }
                }
            })
            .collect();
        values.insert(name.clone(), Tensor::new(shapes[name.as_str()].clone(), data)?);
    }
    Ok(FisherDiagonal { values, n_samples: dataset.len(), estimator })
}

/// Element-wise sum of two Fisher diagonals over identical parameters.
pub fn accumulate_fisher(total: &FisherDiagonal, new: &FisherDiagonal) -> Result<FisherDiagonal> {
    if total.estimator != new.estimator {
        return Err(Error::Contract(format!(
            "cannot add a {} Fisher to a {} Fisher",
            new.estimator.as_str(),
            total.estimator.as_str()
        )));
    }
    if total.values.len() != new.values.len() {
        return Err(Error::Contract("Fisher diagonals cover different parameters".into()));
    }
    let mut values = ParamMap::new();
    for (name, t) in &total.values {
        let other = new
            .values
            .get(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} missing from new Fisher")))?;
        if other.shape() != t.shape() {
            return Err(Error::Contract(format!("Fisher shape mismatch for {name}")));
        }
        let data = t.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        values.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(FisherDiagonal {
        values,
        n_samples: total.n_samples + new.n_samples,
        estimator: total.estimator,
    })
}

/// Step-wise decaying penalty coefficient `λ₀ · decay^(−⌊step/interval⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcSchedule {
    pub lambda0: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl Default for EwcSchedule {
    fn default() -> Self {
        Self { lambda0: 200.0, decay_factor: 10.0, decay_interval: 1000 }
    }
}

impl EwcSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return Err(Error::Argument(format!("EWC λ₀ must be finite and ≥ 0, got {}", self.lambda0)));
        }
        if !(self.decay_factor >= 1.0) || !self.decay_factor.is_finite() {
            return Err(Error::Argument(format!("EWC decay factor must be ≥ 1, got {}", self.decay_factor)));
        }
        if self.decay_interval == 0 {
            return Err(Error::Argument("EWC decay interval must be ≥ 1 step".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, step: u64) -> f64 {
        let decays = (step / self.decay_interval) as i32;
        let value = self.lambda0 * self.decay_factor.powi(-decays);
        if self.lambda0 > 0.0 {
            value.max(f64::MIN_POSITIVE)
        } else {
            value
        }
    }
}

/// Accumulated importance plus the parameter snapshot the penalty pulls
/// toward.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub fisher_sum: FisherDiagonal,
    pub anchor: ParamMap,
    pub schedule: EwcSchedule,
    pub iteration_count: usize,
}

impl EwcState {
    pub fn new(fisher: FisherDiagonal, anchor: ParamMap, schedule: EwcSchedule) -> Result<Self> {
        check_cover(&fisher.values, &anchor)?;
        schedule.validate()?;
        Ok(Self { fisher_sum: fisher, anchor, schedule, iteration_count: 1 })
    }

    /// Adds `fisher` to the running sum and optionally moves the anchor.
    pub fn consolidate(&mut self, fisher: &FisherDiagonal, new_anchor: Option<ParamMap>) -> Result<()> {
        let summed = accumulate_fisher(&self.fisher_sum, fisher)?;
        if let Some(anchor) = &new_anchor {
            check_cover(&summed.values, anchor)?;
        }
        self.fisher_sum = summed;
        if let Some(anchor) = new_anchor {
            self.anchor = anchor;
        }
        self.iteration_count += 1;
        Ok(())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.anchor.keys().map(String::as_str)
    }
}

fn check_cover(fisher: &ParamMap, anchor: &ParamMap) -> Result<()> {
    if fisher.len() != anchor.len() {
        return Err(Error::Contract("Fisher and anchor cover different parameters".into()));
    }
    for (name, f) in fisher {
        match anchor.get(name) {
            Some(a) if a.shape() == f.shape() => {}
            Some(_) => return Err(Error::Contract(format!("anchor shape mismatch for {name}"))),
            None => return Err(Error::Contract(format!("anchor missing {name}"))),
        }
        if f.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("negative Fisher value in {name}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub loss: f64,
    pub grads: ParamMap,
}

/// `(λ/2) Σ_j f_j (θ_j − θ⁰_j)²` over the parameters the state covers, with
/// gradient `λ f_j (θ_j − θ⁰_j)`. Parameters the state does not cover (such
/// as factors added later) are ignored.
pub fn ewc_penalty(params: &ParamMap, fisher: &FisherDiagonal, anchor: &ParamMap, lambda: f64) -> Result<Penalty> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("EWC coefficient must be ≥ 0, got {lambda}")));
    }
    let mut loss = 0.0;
    let mut grads = ParamMap::new();
    for (name, f) in &fisher.values {
        let theta = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} missing for the EWC penalty")))?;
        let anchor_t = anchor
            .get(name)
            .ok_or_else(|| Error::Contract(format!("anchor missing {name}")))?;
        if theta.shape() != f.shape() || anchor_t.shape() != f.shape() {
            return Err(Error::Contract(format!("EWC shape mismatch for {name}")));
        }
        let mut g = Vec::with_capacity(f.len());
        for ((&fj, &t), &a) in f.data().iter().zip(theta.data()).zip(anchor_t.data()) {
            let d = t - a;
            loss += fj * d * d;
            g.push(lambda * fj * d);
        }
        grads.insert(name.clone(), Tensor::new(f.shape().to_vec(), g)?);
    }
    Ok(Penalty { loss: 0.5 * lambda * loss, grads })
}

/// Fraction of coordinates with importance `≥ tau`, optionally after
/// dividing by the global maximum.
pub fn important_fraction(fisher: &FisherDiagonal, tau: f64, normalize: bool) -> Result<f64> {
    let total = fisher.len();
    if total == 0 {
        return Err(Error::Argument("importance of an empty Fisher".into()));
    }
    if !(tau >= 0.0) {
        return Err(Error::Argument(format!("threshold must be ≥ 0, got {tau}")));
    }
    let scale = if normalize {
        let max = fisher.max();
        if max <= 0.0 {
            return Err(Error::Degenerate("cannot normalize an all-zero Fisher".into()));
        }
        max
    } else {
        1.0
    };
    let count = fisher
        .values
        .values()
        .flat_map(|t| t.data().iter())
        .filter(|&&v| v / scale >= tau)
        .count();
    Ok(count as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(entries: &[(&str, &[f64])]) -> ParamMap {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::vector(v.to_vec()).unwrap()))
            .collect()
    }

    fn fisher(entries: &[(&str, &[f64])]) -> FisherDiagonal {
        FisherDiagonal { values: map(entries), n_samples: 1, estimator: FisherEstimator::Variance }
    }

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn constant_gradients_have_zero_variance() {
        let data = vec![(); 5];
        let f = estimate_fisher(&data, &names(&["w"]), FisherEstimator::Variance, |_| {
            Ok(map(&[("w", &[0.3, -2.0])]))
        })
        .unwrap();
        assert!(f.values["w"].data().iter().all(|&v| v == 0.0));
        assert_eq!(f.n_samples, 5);
    }

    #[test]
    fn plus_minus_one_by_hand() {
        let data = [1.0, -1.0];
        for est in [FisherEstimator::Variance, FisherEstimator::MeanSquare] {
            let f = estimate_fisher(&data, &names(&["w"]), est, |&g| Ok(map(&[("w", &[g])]))).unwrap();
            assert_eq!(f.values["w"].data(), &[1.0]);
        }
    }

    #[test]
    fn estimation_errors() {
        let empty: [f64; 0] = [];
        assert!(matches!(
            estimate_fisher(&empty, &names(&["w"]), FisherEstimator::Variance, |_| Ok(ParamMap::new())),
            Err(Error::Argument(_))
        ));
        let one = [1.0];
        assert!(matches!(
            estimate_fisher(&one, &names(&["missing"]), FisherEstimator::Variance, |_| Ok(map(&[("w", &[1.0])]))),
            Err(Error::Contract(_))
        ));
        let single = estimate_fisher(&one, &names(&["w"]), FisherEstimator::Variance, |_| Ok(map(&[("w", &[3.0])])))
            .unwrap();
        assert_eq!(single.values["w"].data(), &[0.0]);
    }

    #[test]
    fn accumulation() {
        let a = fisher(&[("w", &[0.1])]);
        let b = fisher(&[("w", &[0.2])]);
        let s = accumulate_fisher(&a, &b).unwrap();
        assert!((s.values["w"].data()[0] - 0.3).abs() < 1e-15);
        assert_eq!(s.n_samples, 2);
        let z = fisher(&[("w", &[0.0])]);
        assert_eq!(accumulate_fisher(&a, &z).unwrap().values, a.values);

        let other = fisher(&[("v", &[0.1])]);
        assert!(matches!(accumulate_fisher(&a, &other), Err(Error::Contract(_))));
        let mut ms = b.clone();
        ms.estimator = FisherEstimator::MeanSquare;
        assert!(matches!(accumulate_fisher(&a, &ms), Err(Error::Contract(_))));
        let wide = fisher(&[("w", &[0.1, 0.2])]);
        assert!(accumulate_fisher(&a, &wide).is_err());
    }

    #[test]
    fn penalty_by_hand() {
        let f = fisher(&[("w", &[1.0, 2.0])]);
        let anchor = map(&[("w", &[0.0, 0.0])]);
        let params = map(&[("w", &[0.1, -0.2]), ("factor", &[5.0])]);
        let p = ewc_penalty(&params, &f, &anchor, 1.0).unwrap();
        assert!((p.loss - 0.045).abs() < 1e-15);
        let g = p.grads["w"].data();
        assert!((g[0] - 0.1).abs() < 1e-15 && (g[1] + 0.4).abs() < 1e-15);
        assert!(!p.grads.contains_key("factor"));
    }

    #[test]
    fn penalty_vanishes_at_anchor() {
        let f = fisher(&[("w", &[3.0, 0.5])]);
        let anchor = map(&[("w", &[0.7, -1.1])]);
        let p = ewc_penalty(&anchor, &f, &anchor, 2.5).unwrap();
        assert_eq!(p.loss, 0.0);
        assert!(p.grads["w"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_errors() {
        let f = fisher(&[("w", &[1.0])]);
        let anchor = map(&[("w", &[0.0])]);
        assert!(ewc_penalty(&map(&[("w", &[0.0, 1.0])]), &f, &anchor, 1.0).is_err());
        assert!(ewc_penalty(&ParamMap::new(), &f, &anchor, 1.0).is_err());
        assert!(ewc_penalty(&anchor, &f, &anchor, -1.0).is_err());
    }

    #[test]
    fn importance_fraction() {
        let f = fisher(&[("w", &[0.2, 0.6, 1.0])]);
        assert!((important_fraction(&f, 0.25, true).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(important_fraction(&f, 0.0, true).unwrap(), 1.0);
        let scaled = fisher(&[("w", &[2.0, 6.0, 10.0])]);
        assert_eq!(important_fraction(&scaled, 0.25, true).unwrap(), important_fraction(&f, 0.25, true).unwrap());
        assert_eq!(important_fraction(&scaled, 0.25, false).unwrap(), 1.0);
        let zero = fisher(&[("w", &[0.0, 0.0])]);
        assert!(matches!(important_fraction(&zero, 0.25, true), Err(Error::Degenerate(_))));
        assert_eq!(important_fraction(&zero, 0.0, false).unwrap(), 1.0);
    }

    #[test]
    fn schedule_decays_stepwise() {
        let s = EwcSchedule { lambda0: 0.001, decay_factor: 10.0, decay_interval: 10_000 };
        assert_eq!(s.lambda(0), 0.001);
        assert_eq!(s.lambda(9_999), 0.001);
        assert!((s.lambda(10_000) - 1e-4).abs() < 1e-18);
        let flat = EwcSchedule { decay_factor: 1.0, ..s };
        assert_eq!(flat.lambda(123_456), 0.001);
        assert!(s.lambda(u64::MAX) > 0.0);
        assert!(EwcSchedule { decay_factor: 0.5, ..s }.validate().is_err());
        assert!(EwcSchedule { decay_interval: 0, ..s }.validate().is_err());
    }

    #[test]
    fn state_consolidation_refreshes_anchor() {
        let f = fisher(&[("w", &[1.0])]);
        let mut st = EwcState::new(f.clone(), map(&[("w", &[0.0])]), EwcSchedule::default()).unwrap();
        st.consolidate(&f, Some(map(&[("w", &[2.0])]))).unwrap();
        assert_eq!(st.fisher_sum.values["w"].data(), &[2.0]);
        assert_eq!(st.anchor["w"].data(), &[2.0]);
        assert_eq!(st.iteration_count, 2);
        st.consolidate(&f, None).unwrap();
        assert_eq!(st.anchor["w"].data(), &[2.0]);
        assert!(EwcState::new(f, map(&[("v", &[0.0])]), EwcSchedule::default()).is_err());
    }
}
