//! End-to-end runs built from a [`RunConfig`]: data generation, training,
//! evaluation and the ablation sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{git_describe, RunConfig};
use crate::engine::{evaluate, train, EpochLog, InferConfig, MetricsReport, Sampler, TrainOutcome};
use crate::error::{Error, Result};
use crate::model::DecoderParams;
use crate::proposals::Schema;
use crate::synthetic::{gen_dataset, GroundingSample, Vocabulary};

/// Inference proposal counts swept by the proposals ablation.
pub const PROPOSAL_SWEEP: [usize; 6] = [50, 100, 150, 200, 300, 800];
/// Steps given to the ancestral sampler in the DDIM ablation.
pub const ANCESTRAL_STEPS: usize = 9;

pub fn train_set(cfg: &RunConfig) -> Result<Vec<GroundingSample>> {
    gen_dataset(&cfg.data.scene, cfg.data.seed, cfg.data.train_scenes)
}

/// Held-out scenes, drawn from the seed after the training seed.
pub fn test_set(cfg: &RunConfig) -> Result<Vec<GroundingSample>> {
    gen_dataset(&cfg.data.scene, cfg.data.seed.wrapping_add(1), cfg.data.test_scenes)
}

pub fn vocabulary(cfg: &RunConfig) -> Vocabulary {
    Vocabulary::new(&cfg.data.scene)
}

/// Check that every sample can be fed to a model built from `cfg`.
pub fn check_samples(cfg: &RunConfig, data: &[GroundingSample]) -> Result<()> {
    for s in data {
        if s.channels != cfg.model.channels {
            return Err(Error::Config(format!(
                "sample {} has {} channels, model expects {}",
                s.index, s.channels, cfg.model.channels
            )));
        }
        if let Some(f) = s.phrase_feats.iter().find(|f| f.len() != cfg.model.text_dim) {
            return Err(Error::Config(format!(
                "sample {} has {}-d phrase features, model expects {}",
                s.index,
                f.len(),
                cfg.model.text_dim
            )));
        }
        if s.phrases.iter().any(|&c| c >= cfg.data.scene.vocab) {
            return Err(Error::Config(format!("sample {} uses a category outside the vocabulary", s.index)));
        }
    }
    Ok(())
}

pub fn train_model(
    cfg: &RunConfig,
    data: &[GroundingSample],
    on_epoch: impl FnMut(&EpochLog, &DecoderParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(cfg, data)?;
    let sched = cfg.diffusion.schedule()?;
    train(cfg.model.clone(), data, &vocabulary(cfg), &sched, &cfg.train, on_epoch)
}

/// Evaluate with `infer` (usually `cfg.infer`) and stamp provenance fields.
pub fn eval_model(
    cfg: &RunConfig,
    params: &DecoderParams,
    data: &[GroundingSample],
    infer: &InferConfig,
) -> Result<MetricsReport> {
    check_samples(cfg, data)?;
    let sched = cfg.diffusion.schedule()?;
    let mut report = evaluate(params, data, &vocabulary(cfg), &sched, infer, &cfg.eval)?;
    report.config_hash = cfg.hash();
    report.git_describe = git_describe();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Schema,
    Ddim,
    Simloss,
    Proposals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    #[serde(rename = "acc@0.5")]
    pub acc50: f64,
    #[serde(rename = "acc@0.7")]
    pub acc70: f64,
    pub mean_infer_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub git_describe: String,
    pub runs: Vec<ArmResult>,
    /// Per-arm means over seeds, in arm order.
    pub summary: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == name)
    }
}

fn summarize(runs: &[ArmResult]) -> Vec<ArmSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&MetricsReport>> = BTreeMap::new();
    for r in runs {
        if !groups.contains_key(&r.arm) {
            order.push(r.arm.clone());
        }
        groups.entry(r.arm.clone()).or_default().push(&r.metrics);
    }
    order
        .into_iter()
        .map(|arm| {
            let ms = &groups[&arm];
            let n = ms.len() as f64;
            let mean = |f: &dyn Fn(&MetricsReport) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / n;
            ArmSummary {
                runs: ms.len(),
                acc50: mean(&|m| m.acc_at(0.5).unwrap_or(f64::NAN)),
                acc70: mean(&|m| m.acc_at(0.7).unwrap_or(f64::NAN)),
                mean_infer_ms: mean(&|m| m.mean_infer_ms),
                arm,
            }
        })
        .collect()
}

/// Train and evaluate every arm of `axis` once per seed. The held-out set
/// is shared by all arms; `progress` receives a line per finished run.
pub fn run_ablation(
    cfg: &RunConfig,
    axis: Axis,
    seeds: &[u64],
    train_data: &[GroundingSample],
    test_data: &[GroundingSample],
    mut progress: impl FnMut(&ArmResult),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if !cfg.eval.zetas.iter().any(|&z| z == 0.5) || !cfg.eval.zetas.iter().any(|&z| z == 0.7) {
        return Err(Error::Config("ablation reports need 0.5 and 0.7 among eval.zetas".into()));
    }
    let mut runs = Vec::new();
    let mut record = |arm: &str, seed: u64, metrics: MetricsReport| {
        let r = ArmResult {
            arm: arm.to_string(),
            seed,
            metrics,
        };
        progress(&r);
        runs.push(r);
    };
    for &seed in seeds {
        let base = cfg.clone().with_seed(seed);
        match axis {
            Axis::Schema => {
                for schema in Schema::ALL {
                    let mut c = base.clone();
                    c.train.schema = schema;
                    let model = train_model(&c, train_data, |_, _| Ok(()))?.params;
                    record(schema.name(), seed, eval_model(&c, &model, test_data, &c.infer)?);
                }
            }
            Axis::Simloss => {
                for (arm, lambda) in [("with_sim_loss", base.train.loss.lambda), ("without_sim_loss", 0.0)] {
                    let mut c = base.clone();
                    c.train.loss.lambda = lambda;
                    let model = train_model(&c, train_data, |_, _| Ok(()))?.params;
                    record(arm, seed, eval_model(&c, &model, test_data, &c.infer)?);
                }
            }
            Axis::Ddim => {
                let model = train_model(&base, train_data, |_, _| Ok(()))?.params;
                let ddim = InferConfig {
                    sampler: Sampler::Ddim,
                    ..base.infer.clone()
                };
                record("ddim", seed, eval_model(&base, &model, test_data, &ddim)?);
                let ancestral = InferConfig {
                    sampler: Sampler::Ancestral,
                    n_steps: ANCESTRAL_STEPS,
                    ..base.infer.clone()
                };
                record("ancestral", seed, eval_model(&base, &model, test_data, &ancestral)?);
            }
            Axis::Proposals => {
                let model = train_model(&base, train_data, |_, _| Ok(()))?.params;
                for n in PROPOSAL_SWEEP {
                    let infer = InferConfig {
                        proposals: n,
                        ..base.infer.clone()
                    };
                    record(&format!("proposals_{n}"), seed, eval_model(&base, &model, test_data, &infer)?);
                }
            }
        }
    }
    Ok(AblationReport {
        axis,
        seeds: seeds.to_vec(),
        config_hash: cfg.hash(),
        git_describe: git_describe(),
        summary: summarize(&runs),
        runs,
    })
}
