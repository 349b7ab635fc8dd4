//! Central finite-difference gradient checking.
//!
//! Numeric derivatives here use forward evaluations only, so they are an
//! independent reference for [`Graph::backward`]. Inputs that should be
//! checked are registered as parameters in the store.

use super::{DenseArray, Graph, NodeId, ParamStore};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`; 0 when both vanish.
    pub fn rel_error(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&self.analytic).max(norm(&self.numeric));
        if scale == 0.0 {
            0.0
        } else {
            norm(&diff) / scale
        }
    }

    pub fn max_abs_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
    }
}

/// Compares backward-pass gradients of the scalar built by `build` with
/// central differences for the named parameters. At most `limit` evenly
/// spaced entries of each parameter are probed.
pub fn check<F>(store: &ParamStore, names: &[&str], step: f64, limit: usize, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, &work)?;
    g.backward(loss, &mut work)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok(g.value(loss).item())
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = store.clone();
    for &name in names {
        let base = store.get(name)?.clone();
        let grad = work.grad(name).expect("filled by backward").data().to_vec();
        let n = base.len();
        let stride = n.div_ceil(limit.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let mut plus = base.clone();
            plus.data_mut()[i] += step;
            probe.set(name, plus)?;
            let fp = eval(&probe)?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= step;
            probe.set(name, minus)?;
            let fm = eval(&probe)?;
            numeric.push((fp - fm) / (2.0 * step));
            analytic.push(grad[i]);
        }
        probe.set(name, base)?;
    }
    Ok(GradCheck { analytic, numeric })
}

/// Builds the scalar `sum(y * weights)` so every element of `y` reaches the loss.
pub fn weighted_sum(g: &mut Graph, y: NodeId, weights: &[f64]) -> Result<NodeId> {
    let w = g.constant(DenseArray::new(g.dims(y).to_vec(), weights.to_vec())?);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}
