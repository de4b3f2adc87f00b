//! Reverse-mode gradients against central finite differences.

use serde::Serialize;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// One-sided slopes differing by more than this fraction of their size mark
/// a non-differentiable point (a ReLU or max-pool switch) inside the
/// difference interval.
pub const KINK_RATIO: f64 = 1e-4;

/// Step reduction for re-measuring an entry whose interval holds a kink,
/// applied at most `KINK_LEVELS` times.
pub const KINK_REFINE: f64 = 0.1;
pub const KINK_LEVELS: usize = 2;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude, for scale.
    pub max_abs_grad: f64,
    /// Entries whose estimate came from a reduced step.
    pub refined: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn refined(&self) -> usize {
        self.tensors.iter().map(|t| t.refined).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Check every entry of every input. `f` builds a scalar on a fresh tape
/// from leaf nodes holding the inputs, in order. An entry whose one-sided
/// differences disagree is measured again at successively smaller steps;
/// the estimate closest to the analytic value is kept and counted as a kink
/// when it is a refined one.
pub fn grad_check<F>(inputs: &[(String, Tensor<f64>)], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = f(&mut g, &ids)?;
        if g.value(out).len() != 1 {
            return Err(Error::Shape(
                "gradient check needs a scalar function".into(),
            ));
        }
        let y = g.value(out).item();
        if !grad {
            return Ok((y, Vec::new()));
        }
        g.backward(out)?;
        Ok((y, ids.iter().map(|&id| g.take_grad(id)).collect()))
    };
    let mut vals: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (f0, analytic) = eval(&vals, true)?;
    let mut tensors = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let a = analytic[k]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut check = TensorCheck {
            name: name.clone(),
            numel: t.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_abs_grad: 0.0,
            refined: 0,
        };
        for i in 0..t.len() {
            let orig = vals[k].data()[i];
            let mut central = |h: f64| -> Result<(f64, f64, f64)> {
                vals[k].data_mut()[i] = orig + h;
                let (up, _) = eval(&vals, false)?;
                vals[k].data_mut()[i] = orig - h;
                let (down, _) = eval(&vals, false)?;
                vals[k].data_mut()[i] = orig;
                Ok(((up - down) / (2.0 * h), (up - f0) / h, (f0 - down) / h))
            };
            let ai = a.data()[i];
            let (mut numeric, mut right, mut left) = central(step)?;
            let (mut h, mut refined) = (step, false);
            for _ in 0..KINK_LEVELS {
                if (right - left).abs() <= KINK_RATIO * right.abs().max(left.abs()).max(REL_FLOOR) {
                    break;
                }
                h *= KINK_REFINE;
                let (n, r, l) = central(h)?;
                if relative_error(ai, n) < relative_error(ai, numeric) {
                    numeric = n;
                    refined = true;
                }
                (right, left) = (r, l);
            }
            check.refined += usize::from(refined);
            check.max_rel_err = check.max_rel_err.max(relative_error(ai, numeric));
            check.max_abs_err = check.max_abs_err.max((ai - numeric).abs());
            check.max_abs_grad = check.max_abs_grad.max(ai.abs());
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { step, tensors })
}
