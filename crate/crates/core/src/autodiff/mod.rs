//! Minimal reverse-mode differentiation over dense matrices, plus the
//! optimizer and gradient checks used to train the decoder.

mod check;
mod graph;
mod mat;
mod optim;
mod params;

pub use check::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use graph::{Graph, Var};
pub use mat::Mat;
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{ParamId, ParamStore};

use crate::error::{invalid, Result};

/// Sinusoidal timestep embedding: `[sin(t * f_k), cos(t * f_k)]` with
/// `f_k = 10000^(-k / (half - 1))`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(format!("embedding dimension {dim} must be even and positive")));
    }
    let half = dim / 2;
    let step = if half > 1 {
        10000f64.ln() / (half - 1) as f64
    } else {
        0.0
    };
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let arg = t * (-(k as f64) * step).exp();
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(out)
}
