use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::select::{nms, select_scored, ScoredBox, Selection};
use super::{Denoiser, SceneInput};
use crate::autodiff::Mat;
use crate::diffusion::{make_timestep_plan, DiffusionSchedule};
use crate::error::{invalid, Result};
use crate::geometry::{signal_unscale, Bbox, ScaledBox};
use crate::proposals::gaussian_proposals;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Deterministic DDIM (`eta = 0`).
    Ddim,
    /// Stochastic ancestral steps (`eta = 1`).
    Ancestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub n_steps: usize,
    /// Gaussian proposals per image.
    pub proposals: usize,
    /// Pool every step's predictions and apply NMS.
    pub ensemble: bool,
    pub sampler: Sampler,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            n_steps: 5,
            proposals: 150,
            ensemble: false,
            sampler: Sampler::Ddim,
            nms_iou: 0.5,
            seed: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: i64,
    pub t_next: i64,
    /// Predicted clean boxes at this step.
    pub boxes: Vec<Bbox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Candidate pool: the last step's predictions, or every step's in
    /// ensemble mode.
    pub boxes: Vec<Bbox>,
    /// Similarity of each candidate to each phrase.
    pub sim: Mat,
    pub ensemble: bool,
    pub nms_iou: f64,
    pub trajectory: Vec<TrajectoryStep>,
    /// Wall-clock time of the reverse loop.
    pub infer_ms: f64,
}

impl InferenceResult {
    pub fn scores(&self, phrase: usize) -> Vec<f64> {
        (0..self.sim.rows).map(|r| self.sim.get(r, phrase)).collect()
    }

    /// Final boxes for one phrase. Ensemble pools are NMS-filtered first.
    pub fn select(&self, phrase: usize, mode: Selection) -> Vec<ScoredBox> {
        let scores = self.scores(phrase);
        let candidates: Vec<usize> = if self.ensemble {
            nms(&self.boxes, &scores, self.nms_iou)
        } else {
            (0..self.boxes.len()).collect()
        };
        select_scored(&self.boxes, &scores, &candidates, mode)
    }

    pub fn select_all(&self, mode: Selection) -> Vec<Vec<ScoredBox>> {
        (0..self.sim.cols).map(|p| self.select(p, mode)).collect()
    }
}

/// Reverse diffusion from Gaussian proposals over a uniform timestep plan.
pub fn infer<D: Denoiser + ?Sized>(
    model: &D,
    input: &SceneInput<'_>,
    sched: &DiffusionSchedule,
    cfg: &InferConfig,
    rng: &mut impl Rng,
) -> Result<InferenceResult> {
    if cfg.proposals == 0 {
        return Err(invalid("inference needs at least one proposal"));
    }
    let plan = make_timestep_plan(cfg.n_steps, sched.steps())?;
    let signal = sched.scale();
    let p = input.mask.len();
    let start = Instant::now();
    let mut current: Vec<ScaledBox> = gaussian_proposals(cfg.proposals, signal, rng);
    let mut trajectory = Vec::with_capacity(plan.len());
    let mut pool_boxes: Vec<Bbox> = Vec::new();
    let mut pool_sim: Vec<Vec<f64>> = Vec::new();
    let mut last_sim = Mat::zeros(0, p);
    let mut last_boxes = Vec::new();
    for &(t, t_next) in plan.iter() {
        let (pred, sim) = model.denoise(input, &current, t, signal)?;
        let boxes: Vec<Bbox> = pred.iter().map(|b| signal_unscale(*b, signal)).collect();
        if cfg.ensemble {
            pool_boxes.extend_from_slice(&boxes);
            pool_sim.extend((0..sim.rows).map(|r| sim.row(r).to_vec()));
        }
        let mut next = Vec::with_capacity(current.len());
        for (bt, b0) in current.iter().zip(&pred) {
            next.push(match cfg.sampler {
                Sampler::Ddim => sched.ddim_step(*bt, *b0, t, t_next)?,
                Sampler::Ancestral => {
                    let noise = [0; 4].map(|_| rng.sample::<f64, _>(StandardNormal));
                    sched.ancestral_step(*bt, *b0, t, t_next, noise)?
                }
            });
        }
        current = next;
        trajectory.push(TrajectoryStep {
            t,
            t_next,
            boxes: boxes.clone(),
        });
        last_boxes = boxes;
        last_sim = sim;
    }
    let infer_ms = start.elapsed().as_secs_f64() * 1e3;
    let (boxes, sim) = if cfg.ensemble {
        let sim = if pool_sim.is_empty() {
            Mat::zeros(0, p)
        } else {
            Mat::from_rows(&pool_sim)
        };
        (pool_boxes, sim)
    } else {
        (last_boxes, last_sim)
    };
    Ok(InferenceResult {
        boxes,
        sim,
        ensemble: cfg.ensemble,
        nms_iou: cfg.nms_iou,
        trajectory,
        infer_ms,
    })
}
