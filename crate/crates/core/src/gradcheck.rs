//! Analytic-versus-finite-difference gradient comparisons for the factorized
//! layer, the full model loss and the EWC penalty.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-5)`, where
//! `a` is the analytic and `n` the central-difference value. Below the floor
//! the comparison becomes absolute: with eps = 1e-5 and losses of order 10,
//! rounding alone puts about 1e-10 of noise on every difference quotient, so
//! gradients near zero (tiny Fisher entries, or the attention key bias, whose
//! gradient vanishes because softmax ignores a per-query shift of the scores)
//! cannot be resolved relatively. A tolerance of 1e-4 then means an absolute
//! error of at most 1e-9.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::ewc::{ewc_penalty, FisherDiagonal, FisherEstimator};
use crate::factorized::FactorizedLinear;
use crate::model::{Batch, ModelConfig, ToyEncoderClassifier};
use crate::params::{ParamMap, Parameterized};
use crate::seed;
use crate::tensor::{finite_difference_grad, Graph, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst: String,
    pub coords: usize,
}

impl GradCheck {
    fn empty() -> Self {
        Self { max_rel_error: 0.0, worst: String::new(), coords: 0 }
    }

    pub fn merge(mut self, other: GradCheck) -> Self {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.coords += other.coords;
        self
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn compare<'a>(pairs: impl Iterator<Item = (&'a String, &'a Tensor, &'a Tensor)>, floor: f64) -> GradCheck {
    let mut out = GradCheck::empty();
    for (name, a, n) in pairs {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let e = rel_error(x, y, floor);
            if e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst = name.clone();
            }
        }
        out.coords += n.len();
    }
    out
}

fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("finite draws")
}

fn set_coord<M: Parameterized>(m: &mut M, name: &str, j: usize, value: f64) {
    m.visit_params_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[j] = value;
        }
    });
}

/// Central differences of `loss` over every coordinate of the named
/// parameters of `m`, perturbing one coordinate in place at a time.
fn fd_in_place<M: Parameterized>(
    m: &mut M,
    names: &[String],
    eps: f64,
    mut loss: impl FnMut(&M) -> Result<f64>,
) -> Result<ParamMap> {
    let snap = m.snapshot();
    let mut out = ParamMap::new();
    for name in names {
        let base = snap.get(name).ok_or_else(|| Error::Contract(format!("no parameter {name}")))?;
        let mut grad = Tensor::zeros(base.shape());
        for (j, &orig) in base.data().iter().enumerate() {
            set_coord(m, name, j, orig + eps);
            let plus = loss(m)?;
            set_coord(m, name, j, orig - eps);
            let minus = loss(m)?;
            set_coord(m, name, j, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("loss is non-finite near {name}[{j}]")));
            }
            grad.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

/// Checks every parameter role of a small factorized layer (shared weight,
/// bias and all four factor lists) under a random smooth loss.
pub fn layer_check(seed_value: u64, k: usize, eps: f64) -> Result<GradCheck> {
    let mut rng = seed::rng(seed_value, &[0x6c61_7965_72]);
    let (d_in, d_out, n) = (5, 4, 3);
    let mut layer = FactorizedLinear::new("layer", d_in, d_out, k, true, &mut rng)?;
    layer.add_task("a", 0.5, &mut rng)?;
    layer.add_task("b", 0.5, &mut rng)?;
    let x = randn(&mut rng, &[n, d_in], 1.0);
    let c = randn(&mut rng, &[n, d_out], 1.0);

    let loss_of = |layer: &FactorizedLinear, with_grads: bool| -> Result<(f64, Option<ParamMap>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let y = layer.forward(&mut g, xv, "a")?;
        let t = g.tanh(y)?;
        let cv = g.constant(c.clone())?;
        let h = g.hadamard(t, cv)?;
        let loss = g.sum(h)?;
        let value = g.value(loss).item().expect("scalar");
        let grads = if with_grads { Some(g.backward(loss)?.into_named()) } else { None };
        Ok((value, grads))
    };

    let analytic = loss_of(&layer, true)?.1.expect("requested");
    let mut names = layer.shared_param_names();
    names.extend(layer.task_param_names("a"));
    let values: Vec<Tensor> = {
        let snap = layer.snapshot();
        names.iter().map(|n| snap[n].clone()).collect()
    };
    let mut probe = layer.clone();
    let numeric = finite_difference_grad(
        |ps| {
            let map: ParamMap = names.iter().cloned().zip(ps.iter().cloned()).collect();
            probe.load_params(&map)?;
            Ok(loss_of(&probe, false)?.0)
        },
        &values,
        eps,
    )?;
    Ok(compare(names.iter().zip(&numeric).map(|(n, t)| (n, &analytic[n], t)), REL_FLOOR))
}

/// Small model used for end-to-end checks.
pub fn check_model_config(use_attention: bool) -> ModelConfig {
    ModelConfig { d_in: 6, d_model: 16, n_blocks: 2, n_classes: 4, k: 2, use_attention, ..Default::default() }
}

/// Checks the mean cross-entropy of a seeded small model against finite
/// differences over every parameter the routed task touches.
pub fn model_check(seed_value: u64, use_attention: bool, eps: f64) -> Result<GradCheck> {
    let mut rng = seed::rng(seed_value, &[0x6d6f_6465_6c]);
    let cfg = check_model_config(use_attention);
    let mut model = ToyEncoderClassifier::new(cfg.clone(), &mut rng)?;
    model.add_language("a", 0.3, &mut rng)?;
    model.add_language("b", 0.3, &mut rng)?;
    let (b, l) = (3, 4);
    let frames = randn(&mut rng, &[b * l, cfg.d_in], 1.0);
    let labels = (0..b).map(|_| rng.random_range(0..cfg.n_classes)).collect();
    let batch = Batch::new(frames, labels, l)?;

    let (_, analytic) = model.loss_and_grads(&batch, "a", None)?;
    let mut names = model.shared_param_names();
    names.extend(model.task_param_names("a"));
    let numeric = fd_in_place(&mut model, &names, eps, |m| m.loss(&batch, "a"))?;
    Ok(compare(numeric.iter().map(|(n, t)| (n, &analytic[n], t)), REL_FLOOR))
}

/// Checks the EWC penalty gradient on random parameters, anchor and Fisher.
pub fn ewc_check(seed_value: u64, eps: f64) -> Result<GradCheck> {
    let mut rng = seed::rng(seed_value, &[0x6577_63]);
    let shapes: [(&str, &[usize]); 3] = [("w", &[3, 4]), ("b", &[4]), ("v", &[5])];
    let mut params = ParamMap::new();
    let mut anchor = ParamMap::new();
    let mut fisher = ParamMap::new();
    for (name, shape) in shapes {
        params.insert(name.into(), randn(&mut rng, shape, 1.0));
        anchor.insert(name.into(), randn(&mut rng, shape, 1.0));
        let n: usize = shape.iter().product();
        let f = (0..n).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v * v).collect();
        fisher.insert(name.into(), Tensor::new(shape.to_vec(), f)?);
    }
    let fisher = FisherDiagonal { values: fisher, n_samples: 1, estimator: FisherEstimator::MeanSquare };
    let lambda = 0.1 + rng.random::<f64>();
    let analytic = ewc_penalty(&params, &fisher, &anchor, lambda)?.grads;
    let names: Vec<String> = params.keys().cloned().collect();
    let values: Vec<Tensor> = params.values().cloned().collect();
    let numeric = finite_difference_grad(
        |ps| {
            let map: ParamMap = names.iter().cloned().zip(ps.iter().cloned()).collect();
            Ok(ewc_penalty(&map, &fisher, &anchor, lambda)?.loss)
        },
        &values,
        eps,
    )?;
    Ok(compare(names.iter().zip(&numeric).map(|(n, t)| (n, &analytic[n], t)), REL_FLOOR))
}

/// Layer, model and EWC checks for one seed on the default (attention-free)
/// model configuration.
pub fn full_check(seed_value: u64) -> Result<GradCheck> {
    Ok(layer_check(seed_value, 2, DEFAULT_EPS)?
        .merge(model_check(seed_value, false, DEFAULT_EPS)?)
        .merge(ewc_check(seed_value, DEFAULT_EPS)?))
}

/// The model check with attention sublayers enabled.
pub fn attention_check(seed_value: u64) -> Result<GradCheck> {
    model_check(seed_value, true, DEFAULT_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0, REL_FLOOR), 0.0);
        assert!((rel_error(2.0, 1.0, REL_FLOOR) - 0.5).abs() < 1e-15);
        assert!(rel_error(1e-12, 0.0, REL_FLOOR) < 1e-6);
        assert!((rel_error(3e-9, 1e-9, REL_FLOOR) - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn one_seed_passes() {
        let r = full_check(1).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        assert!(r.coords > 100);
    }

    #[test]
    fn attention_passes() {
        for s in 0..3 {
            let r = attention_check(s).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn in_place_differences_match_map_based() {
        let mut rng = seed::rng(4, &[]);
        let mut layer = FactorizedLinear::new("l", 3, 2, 1, true, &mut rng).unwrap();
        layer.add_task("t", 0.5, &mut rng).unwrap();
        let x = randn(&mut rng, &[2, 3], 1.0);
        let loss = |l: &FactorizedLinear| Ok(l.apply(&x, "t")?.data().iter().map(|v| v.sin()).sum::<f64>());
        let names = vec!["l/weight".to_string()];
        let a = fd_in_place(&mut layer.clone(), &names, 1e-5, loss).unwrap();
        let w = layer.shared().clone();
        let b = finite_difference_grad(
            |ps| {
                let mut p = layer.clone();
                p.load_params(&ParamMap::from([("l/weight".to_string(), ps[0].clone())]))?;
                loss(&p)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert_eq!(a["l/weight"], b[0]);
    }
}
