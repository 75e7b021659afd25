use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::infer::{infer, InferConfig};
use super::select::Selection;
use super::{Denoiser, SceneInput};
use crate::autodiff::Mat;
use crate::diffusion::DiffusionSchedule;
use crate::error::{invalid, Result};
use crate::geometry::{iou, Bbox};
use crate::objective::hungarian;
use crate::synthetic::{sample_rng, GroundingSample, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub zetas: Vec<f64>,
    /// Similarity threshold for the alternative one-to-many selection.
    pub threshold: f64,
    /// Worker threads; `0` uses the available parallelism.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            zetas: vec![0.35, 0.5, 0.6, 0.7, 0.9],
            threshold: 0.5,
            threads: 0,
        }
    }
}

/// Aggregate grounding metrics. Keys of `acc` and `pair_acc` are
/// `acc@<zeta>` / `pair_acc@<zeta>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-query accuracy. One-to-many queries count as correct when at
    /// least half of their boxes are found.
    #[serde(flatten)]
    pub acc: BTreeMap<String, f64>,
    /// Fraction of (phrase, ground-truth box) pairs covered by a matched
    /// prediction.
    #[serde(flatten)]
    pub pair_acc: BTreeMap<String, f64>,
    /// One-to-many success at IoU 0.5 with oracle-count selection; `None`
    /// when the set has no one-to-many query.
    pub one_to_many_rate: Option<f64>,
    /// Same, selecting every deduplicated box with similarity above the
    /// threshold.
    pub one_to_many_rate_threshold: Option<f64>,
    pub queries: usize,
    pub one_to_many_queries: usize,
    pub pairs: usize,
    pub mean_infer_ms: f64,
    pub n_steps: usize,
    #[serde(rename = "N_infer")]
    pub n_infer: usize,
    pub ensemble: bool,
    pub seed: u64,
    pub config_hash: String,
    pub git_describe: String,
}

impl MetricsReport {
    pub fn acc_at(&self, zeta: f64) -> Option<f64> {
        self.acc.get(&acc_key("acc", zeta)).copied()
    }

    pub fn pair_acc_at(&self, zeta: f64) -> Option<f64> {
        self.pair_acc.get(&acc_key("pair_acc", zeta)).copied()
    }

    /// The report with timing fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            mean_infer_ms: 0.0,
            ..self.clone()
        }
    }
}

fn acc_key(prefix: &str, zeta: f64) -> String {
    format!("{prefix}@{zeta}")
}

/// IoUs of a max-IoU one-to-one matching between predictions and GT boxes.
fn matched_ious(preds: &[Bbox], gt: &[Bbox]) -> Result<Vec<f64>> {
    if preds.is_empty() || gt.is_empty() {
        return Ok(Vec::new());
    }
    // IoU is symmetric, so the smaller set can always be the row side.
    let (rows, cols) = if gt.len() <= preds.len() { (gt, preds) } else { (preds, gt) };
    let mut cost = Mat::zeros(rows.len(), cols.len());
    let mut ious = Mat::zeros(rows.len(), cols.len());
    for (r, a) in rows.iter().enumerate() {
        for (c, b) in cols.iter().enumerate() {
            let v = iou(a.to_xyxy(), b.to_xyxy());
            ious.set(r, c, v);
            cost.set(r, c, 1.0 - v);
        }
    }
    let a = hungarian(&cost)?;
    Ok(a.row_to_col.iter().enumerate().map(|(r, &c)| ious.get(r, c)).collect())
}

#[derive(Debug, Clone, Default)]
struct SampleScore {
    /// Per zeta: correct queries, covered pairs.
    correct: Vec<usize>,
    covered: Vec<usize>,
    queries: usize,
    pairs: usize,
    multi: usize,
    multi_ok: usize,
    multi_ok_threshold: usize,
    infer_ms: f64,
}

fn score_sample<D: Denoiser + ?Sized>(
    model: &D,
    sample: &GroundingSample,
    vocab: &Vocabulary,
    sched: &DiffusionSchedule,
    infer_cfg: &InferConfig,
    cfg: &EvalConfig,
) -> Result<SampleScore> {
    let input = SceneInput::new(sample, vocab)?;
    let mut rng = sample_rng(infer_cfg.seed, sample.index);
    let result = infer(model, &input, sched, infer_cfg, &mut rng)?;
    let z = cfg.zetas.len();
    let mut s = SampleScore {
        correct: vec![0; z],
        covered: vec![0; z],
        infer_ms: result.infer_ms,
        ..Default::default()
    };
    for (i, gt) in sample.gt.iter().enumerate() {
        s.queries += 1;
        s.pairs += gt.len();
        if gt.len() == 1 {
            let best = result
                .select(i, Selection::Top1)
                .first()
                .map_or(0.0, |p| iou(p.bbox.to_xyxy(), gt[0].to_xyxy()));
            for (k, &zeta) in cfg.zetas.iter().enumerate() {
                if best > zeta {
                    s.correct[k] += 1;
                    s.covered[k] += 1;
                }
            }
            continue;
        }
        s.multi += 1;
        let picks: Vec<Bbox> = result.select(i, Selection::TopK(gt.len())).iter().map(|p| p.bbox).collect();
        let ious = matched_ious(&picks, gt)?;
        for (k, &zeta) in cfg.zetas.iter().enumerate() {
            let hit = ious.iter().filter(|&&v| v > zeta).count();
            s.covered[k] += hit;
            if 2 * hit >= gt.len() {
                s.correct[k] += 1;
            }
        }
        let found = |picks: &[Bbox]| -> Result<bool> {
            let hit = matched_ious(picks, gt)?.iter().filter(|&&v| v > 0.5).count();
            Ok(2 * hit >= gt.len())
        };
        if found(&picks)? {
            s.multi_ok += 1;
        }
        let above: Vec<Bbox> = result
            .select(i, Selection::Threshold(cfg.threshold))
            .iter()
            .map(|p| p.bbox)
            .collect();
        if found(&above)? {
            s.multi_ok_threshold += 1;
        }
    }
    Ok(s)
}

/// Run inference on every sample and aggregate accuracy at each `zeta`.
/// Samples are spread over worker threads; results do not depend on the
/// thread count.
pub fn evaluate<D: Denoiser + ?Sized>(
    model: &D,
    data: &[GroundingSample],
    vocab: &Vocabulary,
    sched: &DiffusionSchedule,
    infer_cfg: &InferConfig,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate an empty dataset"));
    }
    if cfg.zetas.iter().any(|z| !(*z > 0.0 && *z < 1.0)) {
        return Err(invalid("every zeta must lie in (0, 1)"));
    }
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(data.len());
    let chunk = data.len().div_ceil(threads);
    let scores: Vec<SampleScore> = if threads <= 1 {
        data.iter()
            .map(|s| score_sample(model, s, vocab, sched, infer_cfg, cfg))
            .collect::<Result<_>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = data
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| score_sample(model, s, vocab, sched, infer_cfg, cfg))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(data.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, crate::Error>(all)
        })?
    };

    let z = cfg.zetas.len();
    let mut correct = vec![0usize; z];
    let mut covered = vec![0usize; z];
    let (mut queries, mut pairs, mut multi, mut multi_ok, mut multi_thr) = (0, 0, 0, 0, 0);
    let mut ms = 0.0;
    for s in &scores {
        for k in 0..z {
            correct[k] += s.correct[k];
            covered[k] += s.covered[k];
        }
        queries += s.queries;
        pairs += s.pairs;
        multi += s.multi;
        multi_ok += s.multi_ok;
        multi_thr += s.multi_ok_threshold;
        ms += s.infer_ms;
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let rate = |a: usize| (multi > 0).then(|| frac(a, multi));
    Ok(MetricsReport {
        acc: cfg
            .zetas
            .iter()
            .zip(&correct)
            .map(|(&zeta, &c)| (acc_key("acc", zeta), frac(c, queries)))
            .collect(),
        pair_acc: cfg
            .zetas
            .iter()
            .zip(&covered)
            .map(|(&zeta, &c)| (acc_key("pair_acc", zeta), frac(c, pairs)))
            .collect(),
        one_to_many_rate: rate(multi_ok),
        one_to_many_rate_threshold: rate(multi_thr),
        queries,
        one_to_many_queries: multi,
        pairs,
        mean_infer_ms: ms / data.len() as f64,
        n_steps: infer_cfg.n_steps,
        n_infer: infer_cfg.proposals,
        ensemble: infer_cfg.ensemble,
        seed: infer_cfg.seed,
        config_hash: String::new(),
        git_describe: String::new(),
    })
}
