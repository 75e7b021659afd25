//! Training loop, reverse-diffusion inference, prediction selection and
//! evaluation metrics.

mod eval;
mod infer;
mod select;
mod train;

pub use eval::{evaluate, EvalConfig, MetricsReport};
pub use infer::{infer, InferConfig, InferenceResult, Sampler, TrajectoryStep};
pub use select::{nms, select_predictions, select_scored, ScoredBox, Selection};
pub use train::{train, train_step, EpochLog, StepContext, TrainConfig, TrainOutcome, Trainer};

use crate::autodiff::Mat;
use crate::error::Result;
use crate::geometry::ScaledBox;
use crate::model::{phrase_matrix, DecoderParams};
use crate::synthetic::{GroundingSample, SceneFeatures, Vocabulary};

/// Everything a denoiser may look at for one sample.
pub struct SceneInput<'a> {
    pub sample: &'a GroundingSample,
    pub scene: SceneFeatures,
    /// `P x d_t` raw phrase features.
    pub phrases: Mat,
    pub mask: Vec<f64>,
}

impl<'a> SceneInput<'a> {
    pub fn new(sample: &'a GroundingSample, vocab: &Vocabulary) -> Result<Self> {
        let dim = vocab.text.first().map_or(0, Vec::len);
        Ok(Self {
            sample,
            scene: sample.features(vocab),
            phrases: phrase_matrix(&sample.phrase_feats, dim)?,
            mask: vec![1.0; sample.num_phrases()],
        })
    }
}

/// One reverse-process model call: noisy boxes at time `t` to predicted
/// clean boxes and an `N x P` similarity matrix.
pub trait Denoiser: Sync {
    fn denoise(&self, input: &SceneInput<'_>, noisy: &[ScaledBox], t: i64, signal: f64) -> Result<(Vec<ScaledBox>, Mat)>;
}

impl Denoiser for DecoderParams {
    fn denoise(&self, input: &SceneInput<'_>, noisy: &[ScaledBox], t: i64, signal: f64) -> Result<(Vec<ScaledBox>, Mat)> {
        DecoderParams::denoise(self, noisy, &input.scene, &input.phrases, &input.mask, t, signal)
    }
}
