//! Named parameter access shared by layers, the model and the trainer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by their hierarchical name, e.g. `block0/ffn/weight`.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Anything that owns named parameter tensors.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn snapshot(&self) -> ParamMap {
        let mut out = ParamMap::new();
        self.visit_params(&mut |name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, _| out.push(name.to_string()));
        out
    }

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    /// Overwrites every parameter present in `values`. Names in `values` that
    /// the receiver does not own are an error, as are shape mismatches.
    fn load_params(&mut self, values: &ParamMap) -> Result<()> {
        let mut seen = 0;
        let mut err = None;
        self.visit_params_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            if let Some(v) = values.get(name) {
                if v.shape() != t.shape() {
                    err = Some(Error::Contract(format!(
                        "parameter {name}: shape {:?} does not match {:?}",
                        v.shape(),
                        t.shape()
                    )));
                    return;
                }
                t.data_mut().copy_from_slice(v.data());
                seen += 1;
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != values.len() {
            return Err(Error::Contract(format!(
                "{} supplied parameters are not owned by the receiver",
                values.len() - seen
            )));
        }
        Ok(())
    }
}
