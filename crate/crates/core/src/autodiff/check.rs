//! Central finite-difference gradient verification.

use super::graph::{Graph, Var};
use super::mat::Mat;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error of near-zero gradient tensors.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(name, relative error)` per checked tensor.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    }
}

/// Relative error between analytic and numeric gradients of one tensor:
/// `max |a - n| / max(max |a|, max |n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(SCALE_FLOOR, f64::max);
    diff / scale
}

fn finite_scalar(g: &Graph, v: Var) -> Result<f64> {
    let s = g.value(v).scalar();
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {s}")));
    }
    Ok(s)
}

/// Check `f` with respect to free input tensors.
pub fn grad_check<F>(inputs: &[Mat], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = f(&mut g, &vars)?;
    finite_scalar(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, m)| g.grad(v).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols)))
        .collect();

    let eval = |probe: &[Mat]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|m| g.leaf(m.clone())).collect();
        let out = f(&mut g, &vars)?;
        finite_scalar(&g, out)
    };

    let mut per_tensor = Vec::new();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for k in 0..input.len() {
            let orig = input.data[k];
            probe[i].data[k] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data[k] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data[k] = orig;
            numeric[k] = (up - down) / (2.0 * eps);
        }
        let a = &analytic[i].data;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("analytic gradient of input {i}")));
        }
        per_tensor.push((format!("input{i}"), relative_error(a, &numeric)));
    }
    Ok(GradCheckReport { per_tensor })
}

/// Check `f` with respect to every tensor in a parameter store. At most
/// `max_coords` evenly strided entries are probed per tensor.
pub fn grad_check_params<F>(store: &ParamStore, eps: f64, max_coords: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut base = store.clone();
    base.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &base)?;
    finite_scalar(&g, out)?;
    g.backward(out)?;
    g.accumulate_param_grads(&mut base);

    let mut probe = base.clone();
    let mut per_tensor = Vec::new();
    let ids: Vec<ParamId> = base.ids().collect();
    for id in ids {
        let n = base.value(id).len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &k in &coords {
            let orig = base.value(id).data[k];
            probe.value_mut(id).data[k] = orig + eps;
            let mut g = Graph::new();
            let out = f(&mut g, &probe)?;
            let up = finite_scalar(&g, out)?;
            probe.value_mut(id).data[k] = orig - eps;
            let mut g = Graph::new();
            let out = f(&mut g, &probe)?;
            let down = finite_scalar(&g, out)?;
            probe.value_mut(id).data[k] = orig;
            numeric.push((up - down) / (2.0 * eps));
            let a = base.grad(id).data[k];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of {}", base.name(id))));
            }
            analytic.push(a);
        }
        per_tensor.push((base.name(id).to_string(), relative_error(&analytic, &numeric)));
    }
    Ok(GradCheckReport { per_tensor })
}
