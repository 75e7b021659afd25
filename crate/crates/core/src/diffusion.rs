//! Cosine noise schedule, forward box diffusion and DDIM reverse steps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::ScaledBox;

/// Upper bound on any per-step beta.
pub const MAX_BETA: f64 = 0.999;

/// Schedule hyperparameters as they appear in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Chain length `T`.
    pub steps: usize,
    /// Cosine offset `s`.
    pub offset: f64,
    /// Signal scale applied to boxes before diffusion.
    pub scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            offset: 0.008,
            scale: 2.0,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::cosine(self.steps, self.offset, self.scale)
    }
}

/// Precomputed cumulative signal retention `alpha_bar[0..=T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    steps: usize,
    offset: f64,
    scale: f64,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
    /// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`, betas clipped at [`MAX_BETA`].
    pub fn cosine(steps: usize, offset: f64, scale: f64) -> Result<Self> {
        if steps < 1 {
            return Err(invalid("diffusion needs at least one step"));
        }
        if !(offset > 0.0 && offset < 1.0) {
            return Err(invalid(format!("cosine offset {offset} outside (0, 1)")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid(format!("signal scale {scale} must be positive")));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + offset) / (1.0 + offset);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prev_raw = 1.0;
        for t in 1..=steps {
            let raw = f(t) / f0;
            let beta = (1.0 - raw / prev_raw).clamp(0.0, MAX_BETA);
            prev_raw = raw;
            let last = *alpha_bar.last().expect("nonempty");
            alpha_bar.push(last * (1.0 - beta));
        }
        Ok(Self {
            steps,
            offset,
            scale,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar` at `t`, with `t = -1` meaning the clean signal.
    pub fn alpha_bar_at(&self, t: i64) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bar[t as usize]
        }
    }

    /// Per-step beta for `t >= 1`.
    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    fn check_t(&self, t: i64) -> Result<()> {
        if t < 0 || t as usize > self.steps {
            return Err(invalid(format!("timestep {t} outside [0, {}]", self.steps)));
        }
        Ok(())
    }

    /// Forward diffusion without clamping: `sqrt(ab) * b0 + sqrt(1 - ab) * noise`.
    pub fn q_sample_raw(&self, b0: ScaledBox, t: i64, noise: [f64; 4]) -> Result<ScaledBox> {
        self.check_t(t)?;
        let ab = self.alpha_bar_at(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = [0.0; 4];
        for k in 0..4 {
            out[k] = a * b0.0[k] + s * noise[k];
        }
        Ok(ScaledBox(out))
    }

    /// Forward diffusion of one box, clamped to the signal range.
    pub fn q_sample(&self, b0: ScaledBox, t: i64, noise: [f64; 4]) -> Result<ScaledBox> {
        Ok(self.q_sample_raw(b0, t, noise)?.clamped(self.scale))
    }

    /// Deterministic DDIM update (eta = 0) from `t_cur` to `t_next`, unclamped.
    pub fn ddim_step_raw(
        &self,
        bt: ScaledBox,
        b0_pred: ScaledBox,
        t_cur: i64,
        t_next: i64,
    ) -> Result<ScaledBox> {
        self.generalized_step(bt, b0_pred, t_cur, t_next, 0.0, [0.0; 4])
    }

    /// DDIM update clamped to the signal range. `t_next = -1` returns `b0_pred`.
    pub fn ddim_step(
        &self,
        bt: ScaledBox,
        b0_pred: ScaledBox,
        t_cur: i64,
        t_next: i64,
    ) -> Result<ScaledBox> {
        Ok(self.ddim_step_raw(bt, b0_pred, t_cur, t_next)?.clamped(self.scale))
    }

    /// Stochastic variant used for the ancestral-sampling ablation. With
    /// `eta = 1` this matches the DDPM posterior variance.
    pub fn ancestral_step(
        &self,
        bt: ScaledBox,
        b0_pred: ScaledBox,
        t_cur: i64,
        t_next: i64,
        noise: [f64; 4],
    ) -> Result<ScaledBox> {
        Ok(self
            .generalized_step(bt, b0_pred, t_cur, t_next, 1.0, noise)?
            .clamped(self.scale))
    }

    fn generalized_step(
        &self,
        bt: ScaledBox,
        b0_pred: ScaledBox,
        t_cur: i64,
        t_next: i64,
        eta: f64,
        noise: [f64; 4],
    ) -> Result<ScaledBox> {
        if t_next >= t_cur {
            return Err(invalid(format!("reverse step needs t_next < t_cur, got ({t_cur}, {t_next})")));
        }
        self.check_t(t_cur)?;
        if t_next < 0 {
            return Ok(b0_pred);
        }
        let ab_cur = self.alpha_bar_at(t_cur);
        let ab_next = self.alpha_bar_at(t_next);
        let sigma = eta * ((1.0 - ab_next) / (1.0 - ab_cur) * (1.0 - ab_cur / ab_next)).max(0.0).sqrt();
        let dir = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
        let (sa_cur, s1_cur) = (ab_cur.sqrt(), (1.0 - ab_cur).sqrt());
        let mut out = [0.0; 4];
        for k in 0..4 {
            let eps = (bt.0[k] - sa_cur * b0_pred.0[k]) / s1_cur;
            out[k] = ab_next.sqrt() * b0_pred.0[k] + dir * eps + sigma * noise[k];
        }
        Ok(ScaledBox(out))
    }
}

/// Ordered `(t_cur, t_next)` pairs for a reverse pass, ending at `t_next = -1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan(pub Vec<(i64, i64)>);

impl TimestepPlan {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(i64, i64)> {
        self.0.iter()
    }
}

/// Uniformly spaced reverse plan: `reversed(linspace(-1, T-1, n_steps + 1))`,
/// truncated to integers and paired consecutively.
pub fn make_timestep_plan(n_steps: usize, steps: usize) -> Result<TimestepPlan> {
    if n_steps < 1 {
        return Err(invalid("need at least one sampling step"));
    }
    if n_steps > steps {
        return Err(invalid(format!("{n_steps} sampling steps exceed chain length {steps}")));
    }
    let lo = -1.0;
    let hi = steps as f64 - 1.0;
    let times: Vec<i64> = (0..=n_steps)
        .rev()
        .map(|i| (lo + (hi - lo) * i as f64 / n_steps as f64).trunc() as i64)
        .collect();
    Ok(TimestepPlan(times.windows(2).map(|w| (w[0], w[1])).collect()))
}
