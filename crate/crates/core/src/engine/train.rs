use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Graph, LrSchedule, Mat};
use crate::diffusion::DiffusionSchedule;
use crate::error::{invalid, Error, Result};
use crate::geometry::{signal_scale, signal_unscale, Bbox};
use crate::model::{DecoderConfig, DecoderParams};
use crate::objective::{composite_loss, match_sets, similarity_targets, LossBreakdown, LossTargets, LossWeights};
use crate::proposals::{pad, Schema};
use crate::synthetic::{GroundingSample, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Padded proposal count `N̂`.
    pub proposals: usize,
    pub schema: Schema,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub warmup_epochs: usize,
    pub cooldown_epochs: usize,
    pub warmup_lr: f64,
    pub min_lr: f64,
    /// Match within phrase partitions; `false` matches all slots jointly.
    pub partitioned_matching: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 20,
            proposals: 150,
            schema: Schema::PhraseBalanced,
            loss: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            warmup_epochs: 5,
            cooldown_epochs: 5,
            warmup_lr: 1e-6,
            min_lr: 1e-7,
            partitioned_matching: true,
            seed: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.proposals == 0 {
            return Err(Error::Config("batch_size and proposals must be positive".into()));
        }
        let w = &self.loss;
        if [w.alpha, w.beta, w.lambda].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Warmup, cosine decay, then a constant cooldown at `min_lr`.
    pub fn lr_schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        let decay_epochs = self.epochs.saturating_sub(self.cooldown_epochs);
        LrSchedule {
            base_lr: self.optimizer.lr,
            warmup_lr: self.warmup_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_epochs.min(decay_epochs) * steps_per_epoch,
            total_steps: decay_epochs * steps_per_epoch,
        }
    }
}

/// Fixed inputs shared by every training step.
pub struct StepContext<'a> {
    pub vocab: &'a Vocabulary,
    pub sched: &'a DiffusionSchedule,
    pub cfg: &'a TrainConfig,
}

/// Build the loss of one sample on `g`. `phrases` is the batch-wide phrase
/// count; missing phrases are zero rows with mask 0.
fn sample_loss(
    params: &DecoderParams,
    g: &mut Graph,
    sample: &GroundingSample,
    phrases: usize,
    ctx: &StepContext<'_>,
    rng: &mut impl Rng,
) -> Result<(crate::autodiff::Var, LossBreakdown)> {
    let cfg = ctx.cfg;
    let signal = ctx.sched.scale();
    let real = sample.num_phrases();
    let text_dim = params.config.text_dim;

    let proposals = pad(&sample.gt, cfg.proposals, cfg.schema, rng)?;
    let t = rng.gen_range(0..ctx.sched.steps()) as i64;
    let mut noisy = Vec::with_capacity(proposals.len());
    for b in &proposals.boxes {
        let noise = [0; 4].map(|_| rng.sample::<f64, _>(StandardNormal));
        noisy.push(ctx.sched.q_sample(signal_scale(*b, signal), t, noise)?);
    }

    let mut raw = Mat::zeros(phrases, text_dim);
    for (i, f) in sample.phrase_feats.iter().enumerate() {
        if f.len() != text_dim {
            return Err(invalid(format!("phrase feature dimension {} != {text_dim}", f.len())));
        }
        raw.row_mut(i).copy_from_slice(f);
    }
    let mut mask = vec![0.0; phrases];
    mask[..real].iter_mut().for_each(|m| *m = 1.0);

    let scene = sample.features(ctx.vocab);
    let raw = g.constant(raw);
    let fq = params.project_text(g, &params.store, raw)?;
    let out = params.denoise_graph(g, &params.store, &noisy, &scene, fq, &mask, t, signal)?;

    let pred_vals = g.value(out.boxes);
    let pred: Vec<Bbox> = (0..pred_vals.rows)
        .map(|i| {
            let r = pred_vals.row(i);
            Bbox::new(r[0], r[1], r[2], r[3])
        })
        .collect();
    let assignment = match_sets(
        &pred,
        &proposals.boxes,
        &proposals.phrase_of,
        real,
        &cfg.loss,
        cfg.partitioned_matching,
    )?;
    let mut assignment = assignment;
    assignment.per_phrase.resize(phrases, Vec::new());
    let current: Vec<Bbox> = noisy.iter().map(|b| signal_unscale(*b, signal)).collect();
    let mut gt_sets = sample.gt.clone();
    gt_sets.resize(phrases, Vec::new());
    let nu = similarity_targets(&current, &gt_sets);
    let targets = LossTargets {
        targets: &proposals.boxes,
        assignment: &assignment,
        nu: &nu,
        phrase_mask: &mask,
    };
    composite_loss(g, out.boxes, out.sim, &targets, &cfg.loss)
}

fn step_rng(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a_7c15_9e37_79b9);
    rng.set_stream(step.wrapping_mul(1 << 16).wrapping_add(slot));
    rng
}

fn mean_breakdown(parts: &[LossBreakdown], weights: LossWeights) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l1_term: avg(|b| b.l1_term),
        giou_term: avg(|b| b.giou_term),
        sim_term: avg(|b| b.sim_term),
        total: avg(|b| b.total),
        weights,
    }
}

/// One optimizer step over `batch`: per-sample losses averaged, gradients
/// clipped and applied with AdamW at learning rate `lr`.
pub fn train_step(
    params: &mut DecoderParams,
    opt: &mut AdamW,
    batch: &[&GroundingSample],
    ctx: &StepContext<'_>,
    lr: f64,
    step: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let phrases = batch.iter().map(|s| s.num_phrases()).max().unwrap_or(0);
    params.store.zero_grad();
    let mut parts = Vec::with_capacity(batch.len());
    for (slot, sample) in batch.iter().enumerate() {
        let mut rng = step_rng(ctx.cfg.seed, step, slot as u64);
        let mut g = Graph::new();
        let (loss, breakdown) = sample_loss(params, &mut g, sample, phrases, ctx, &mut rng)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {step}, sample {}: {breakdown:?}",
                sample.index
            )));
        }
        g.backward(loss)?;
        g.accumulate_param_grads(&mut params.store);
        parts.push(breakdown);
    }
    params.store.scale_grads(1.0 / batch.len() as f64);
    let norm = params.store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at step {step}")));
    }
    opt.step(&mut params.store, lr);
    Ok(mean_breakdown(&parts, ctx.cfg.loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub params: DecoderParams,
    pub curve: Vec<EpochLog>,
}

/// Stateful trainer so callers can checkpoint between epochs.
pub struct Trainer<'a> {
    pub params: DecoderParams,
    opt: AdamW,
    ctx: StepContext<'a>,
    data: &'a [GroundingSample],
    lr: LrSchedule,
    step: u64,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        decoder: DecoderConfig,
        data: &'a [GroundingSample],
        vocab: &'a Vocabulary,
        sched: &'a DiffusionSchedule,
        cfg: &'a TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let params = DecoderParams::new(decoder)?;
        let opt = AdamW::new(cfg.optimizer, &params.store);
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
        Ok(Self {
            params,
            opt,
            ctx: StepContext { vocab, sched, cfg },
            data,
            lr: cfg.lr_schedule(steps_per_epoch),
            step: 0,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.ctx.cfg.epochs
    }

    /// Run one epoch and return its mean loss.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let cfg = self.ctx.cfg;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&GroundingSample> = chunk.iter().map(|&i| &self.data[i]).collect();
            lr = self.lr.at(self.step as usize);
            let b = train_step(&mut self.params, &mut self.opt, &batch, &self.ctx, lr, self.step)?;
            parts.push(b);
            self.step += 1;
        }
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            loss: mean_breakdown(&parts, cfg.loss),
        };
        self.epoch += 1;
        Ok(log)
    }
}

/// Train from scratch for `cfg.epochs` epochs. `on_epoch` sees every log
/// line and the current parameters.
pub fn train(
    decoder: DecoderConfig,
    data: &[GroundingSample],
    vocab: &Vocabulary,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &DecoderParams) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(decoder, data, vocab, sched, cfg)?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    while !trainer.finished() {
        let log = trainer.run_epoch()?;
        on_epoch(&log, &trainer.params)?;
        curve.push(log);
    }
    Ok(TrainOutcome {
        params: trainer.params,
        curve,
    })
}
