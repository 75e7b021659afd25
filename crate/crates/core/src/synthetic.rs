//! Synthetic grounded scenes.
//!
//! A scene is a `G x G x C` feature grid on which each object stamps the
//! visual prototype of its category. Phrases are noisy copies of the text
//! prototype of a category, and the ground truth of a phrase is the set of
//! boxes of every object of that category. Samples are stored as their
//! generative record; the dense grid is re-rendered bit-exactly on demand.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Bbox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InstanceMode {
    /// Each phrase gets more than one instance with probability `multi_prob`.
    Mixed { multi_prob: f64 },
    OneToOne,
    /// The first phrase gets `k` instances, `k` drawn from `counts`.
    OneToMany { counts: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub grid: usize,
    pub channels: usize,
    pub vocab: usize,
    pub text_dim: usize,
    pub vocab_seed: u64,
    pub min_phrases: usize,
    pub max_phrases: usize,
    /// Upper bound on instances per phrase in mixed mode.
    pub max_instances: usize,
    pub instances: InstanceMode,
    pub max_distractors: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Largest IoU allowed between any two placed objects.
    pub max_overlap: f64,
    pub noise: f64,
    pub text_jitter: f64,
    pub placement_tries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            channels: 8,
            vocab: 16,
            text_dim: 16,
            vocab_seed: 1234,
            min_phrases: 1,
            max_phrases: 3,
            max_instances: 3,
            instances: InstanceMode::Mixed { multi_prob: 0.25 },
            max_distractors: 2,
            min_size: 0.12,
            max_size: 0.4,
            max_overlap: 0.1,
            noise: 0.1,
            text_jitter: 0.1,
            placement_tries: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleScene(m));
        if self.grid < 4 || self.channels == 0 || self.text_dim == 0 {
            return bad(format!(
                "grid {} / channels {} / text_dim {} too small",
                self.grid, self.channels, self.text_dim
            ));
        }
        if self.min_phrases == 0 || self.min_phrases > self.max_phrases {
            return bad(format!("phrase range {}..={}", self.min_phrases, self.max_phrases));
        }
        let needed = self.max_phrases + usize::from(self.max_distractors > 0);
        if self.vocab < needed {
            return bad(format!("vocabulary {} cannot cover {needed} categories", self.vocab));
        }
        if self.max_instances == 0 {
            return bad("max_instances must be at least 1".into());
        }
        if self.min_size * (self.grid as f64) < 2.0 {
            return bad(format!("min_size {} spans fewer than 2 grid cells", self.min_size));
        }
        if !(self.min_size <= self.max_size && self.max_size <= 1.0) {
            return bad(format!("size range {}..{}", self.min_size, self.max_size));
        }
        if let InstanceMode::OneToMany { counts } = &self.instances {
            if counts.is_empty() || counts.iter().any(|&k| k < 2) {
                return bad("one-to-many counts must all be at least 2".into());
            }
        }
        if let InstanceMode::Mixed { multi_prob } = self.instances {
            if !(0.0..=1.0).contains(&multi_prob) {
                return bad(format!("multi_prob {multi_prob} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Fixed visual and text prototypes, one per category.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub visual: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

impl Vocabulary {
    pub fn new(cfg: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.vocab_seed);
        let visual = (0..cfg.vocab).map(|_| unit_gaussian(&mut rng, cfg.channels)).collect();
        let text = (0..cfg.vocab).map(|_| unit_gaussian(&mut rng, cfg.text_dim)).collect();
        Self { visual, text }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub bbox: Bbox,
}

/// One grounded scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub index: u64,
    /// Category id of each phrase.
    pub phrases: Vec<usize>,
    /// `P x text_dim` phrase embeddings.
    pub phrase_feats: Vec<Vec<f64>>,
    /// Ground-truth boxes per phrase.
    pub gt: Vec<Vec<Bbox>>,
    /// Objects in stamp order; later stamps win on overlap.
    pub objects: Vec<SceneObject>,
    pub grid: usize,
    pub channels: usize,
    pub noise: f64,
    pub noise_seed: u64,
}

impl GroundingSample {
    pub fn num_phrases(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_one_to_many(&self) -> bool {
        self.gt.iter().any(|s| s.len() > 1)
    }

    /// Render the dense `G x G x C` field (row-major, channel-last).
    pub fn render_field(&self, vocab: &Vocabulary) -> Vec<f64> {
        let (g, c) = (self.grid, self.channels);
        let mut field = vec![0.0; g * g * c];
        for obj in &self.objects {
            let proto = &vocab.visual[obj.category];
            let (x0, x1, y0, y1) = footprint(obj.bbox, g);
            for y in y0..y1 {
                for x in x0..x1 {
                    field[(y * g + x) * c..(y * g + x + 1) * c].copy_from_slice(proto);
                }
            }
        }
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
            for v in &mut field {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += self.noise * n;
            }
        }
        field
    }

    pub fn features(&self, vocab: &Vocabulary) -> SceneFeatures {
        SceneFeatures::new(self.render_field(vocab), self.grid, self.channels)
    }
}

/// Cells `[x0, x1) x [y0, y1)` whose centers lie inside the box.
fn footprint(b: Bbox, g: usize) -> (usize, usize, usize, usize) {
    let xy = b.to_xyxy();
    let gf = g as f64;
    let lo = |v: f64| ((v * gf - 0.5).ceil().max(0.0) as usize).min(g);
    let hi = |v: f64| (((v * gf - 0.5).floor() + 1.0).max(0.0) as usize).min(g);
    (lo(xy.x1), hi(xy.x2), lo(xy.y1), hi(xy.y2))
}

/// A rendered field with per-channel integral images for exact box averages.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    grid: usize,
    channels: usize,
    field: Vec<f64>,
    /// `(G+1) x (G+1) x C` inclusive prefix sums.
    integral: Vec<f64>,
}

impl SceneFeatures {
    pub fn new(field: Vec<f64>, grid: usize, channels: usize) -> Self {
        assert_eq!(field.len(), grid * grid * channels, "field size");
        let w = grid + 1;
        let mut integral = vec![0.0; w * w * channels];
        for y in 0..grid {
            let mut row = vec![0.0; channels];
            for x in 0..grid {
                let src = &field[(y * grid + x) * channels..(y * grid + x + 1) * channels];
                for k in 0..channels {
                    row[k] += src[k];
                    integral[((y + 1) * w + x + 1) * channels + k] =
                        integral[(y * w + x + 1) * channels + k] + row[k];
                }
            }
        }
        Self {
            grid,
            channels,
            field,
            integral,
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn field(&self) -> &[f64] {
        &self.field
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.channels];
        for cell in self.field.chunks(self.channels) {
            for (a, v) in m.iter_mut().zip(cell) {
                *a += v;
            }
        }
        let n = (self.grid * self.grid) as f64;
        m.into_iter().map(|v| v / n).collect()
    }

    /// Integral of the field over `[0, x] x [0, y]` in cell units, written
    /// into `out`. Exact for the piecewise-constant field: bilinear in the
    /// integral image.
    fn integral_at(&self, x: f64, y: f64, out: &mut [f64]) {
        let g = self.grid as f64;
        let x = x.clamp(0.0, g);
        let y = y.clamp(0.0, g);
        let x0 = (x.floor() as usize).min(self.grid - 1);
        let y0 = (y.floor() as usize).min(self.grid - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let w = self.grid + 1;
        let c = self.channels;
        let at = |yy: usize, xx: usize| (yy * w + xx) * c;
        let (i00, i01, i10, i11) = (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
        let (w00, w01, w10, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
        for k in 0..c {
            out[k] = w00 * self.integral[i00 + k]
                + w01 * self.integral[i01 + k]
                + w10 * self.integral[i10 + k]
                + w11 * self.integral[i11 + k];
        }
    }

    /// Exact average of the field over a rectangle in normalized units.
    pub fn box_mean(&self, x1: f64, y1: f64, x2: f64, y2: f64, out: &mut [f64]) {
        let g = self.grid as f64;
        let (ax, ay, bx, by) = (x1 * g, y1 * g, x2 * g, y2 * g);
        let area = ((bx - ax) * (by - ay)).max(1e-12);
        let c = self.channels;
        let mut t = vec![0.0; 4 * c];
        let (p, rest) = t.split_at_mut(c);
        let (q, rest) = rest.split_at_mut(c);
        let (r, s) = rest.split_at_mut(c);
        self.integral_at(bx, by, p);
        self.integral_at(ax, by, q);
        self.integral_at(bx, ay, r);
        self.integral_at(ax, ay, s);
        for k in 0..c {
            out[k] = (p[k] - q[k] - r[k] + s[k]) / area;
        }
    }
}

/// Pools an `R x R` grid of exact bin averages inside each box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiPooler {
    pub resolution: usize,
    /// Append the normalized `(x, y)` bin centers as two extra channels.
    pub with_position: bool,
    /// Side of an extra appearance grid pooled over the box enlarged by
    /// `context_scale`; `0` disables it. Area outside the scene reads as zero.
    pub context: usize,
    pub context_scale: f64,
}

impl RoiPooler {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            with_position: false,
            context: 0,
            context_scale: 1.0,
        }
    }

    pub fn feature_dim(&self, channels: usize) -> usize {
        self.resolution * self.resolution * (channels + if self.with_position { 2 } else { 0 })
            + self.context * self.context * channels
    }

    /// One row per box. Boxes are clipped to the scene first.
    pub fn pool(&self, scene: &SceneFeatures, boxes: &[Bbox]) -> Vec<Vec<f64>> {
        boxes.iter().map(|b| self.pool_one(scene, *b)).collect()
    }

    fn pool_one(&self, scene: &SceneFeatures, b: Bbox) -> Vec<f64> {
        let r = self.resolution;
        let c = scene.channels();
        let stride = c + if self.with_position { 2 } else { 0 };
        let xy = b.clipped_to_scene().to_xyxy();
        let (bw, bh) = ((xy.x2 - xy.x1) / r as f64, (xy.y2 - xy.y1) / r as f64);
        let mut out = vec![0.0; r * r * stride + self.context * self.context * c];
        for by in 0..r {
            for bx in 0..r {
                let x1 = xy.x1 + bx as f64 * bw;
                let y1 = xy.y1 + by as f64 * bh;
                let cell = &mut out[(by * r + bx) * stride..(by * r + bx + 1) * stride];
                scene.box_mean(x1, y1, x1 + bw, y1 + bh, &mut cell[..c]);
                if self.with_position {
                    cell[c] = x1 + 0.5 * bw;
                    cell[c + 1] = y1 + 0.5 * bh;
                }
            }
        }
        if self.context > 0 {
            let k = self.context;
            let xy = Bbox::new(b.cx, b.cy, b.w * self.context_scale, b.h * self.context_scale).to_xyxy();
            let (bw, bh) = ((xy.x2 - xy.x1) / k as f64, (xy.y2 - xy.y1) / k as f64);
            let ctx = &mut out[r * r * stride..];
            for by in 0..k {
                for bx in 0..k {
                    let x1 = xy.x1 + bx as f64 * bw;
                    let y1 = xy.y1 + by as f64 * bh;
                    scene.box_mean(x1, y1, x1 + bw, y1 + bh, &mut ctx[(by * k + bx) * c..(by * k + bx + 1) * c]);
                }
            }
        }
        out
    }
}

/// Appearance-only pooling, `N x (R * R * C)`.
pub fn roi_features(scene: &SceneFeatures, boxes: &[Bbox], resolution: usize) -> Vec<Vec<f64>> {
    RoiPooler::new(resolution).pool(scene, boxes)
}

fn snap(v: f64, g: usize) -> f64 {
    (v * g as f64).round() / g as f64
}

fn place_objects(cfg: &SceneConfig, sizes_for: usize, rng: &mut impl Rng, count: usize) -> Option<Vec<Bbox>> {
    let g = cfg.grid;
    let cap = (0.8 / (sizes_for as f64).sqrt()).max(cfg.min_size);
    let max_size = cfg.max_size.min(cap);
    let mut placed: Vec<Bbox> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = None;
        for _ in 0..cfg.placement_tries {
            let w = snap(rng.gen_range(cfg.min_size..=max_size), g);
            let h = snap(rng.gen_range(cfg.min_size..=max_size), g);
            let x1 = snap(rng.gen_range(0.0..=(1.0 - w)), g);
            let y1 = snap(rng.gen_range(0.0..=(1.0 - h)), g);
            let b = Bbox::new(x1 + 0.5 * w, y1 + 0.5 * h, w, h);
            let xb = b.to_xyxy();
            if placed.iter().all(|p| iou(p.to_xyxy(), xb) <= cfg.max_overlap) {
                ok = Some(b);
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

const SCENE_RESTARTS: usize = 20;

/// Generate one scene. Fails if objects cannot be placed under the overlap
/// constraint within the configured number of tries.
pub fn gen_scene(cfg: &SceneConfig, vocab: &Vocabulary, index: u64, rng: &mut impl Rng) -> Result<GroundingSample> {
    cfg.validate()?;
    let p = rng.gen_range(cfg.min_phrases..=cfg.max_phrases);
    let mut cats: Vec<usize> = (0..cfg.vocab).collect();
    cats.shuffle(rng);
    let phrases: Vec<usize> = cats[..p].to_vec();
    let counts: Vec<usize> = (0..p)
        .map(|i| match &cfg.instances {
            InstanceMode::OneToOne => 1,
            InstanceMode::Mixed { multi_prob } => {
                if cfg.max_instances > 1 && rng.gen_bool(*multi_prob) {
                    rng.gen_range(2..=cfg.max_instances)
                } else {
                    1
                }
            }
            InstanceMode::OneToMany { counts } => {
                if i == 0 {
                    *counts.choose(rng).expect("validated nonempty")
                } else {
                    1
                }
            }
        })
        .collect();
    let distractors = rng.gen_range(0..=cfg.max_distractors);
    let distractor_cats: Vec<usize> = (0..distractors)
        .map(|_| cats[p + rng.gen_range(0..cfg.vocab - p)])
        .collect();

    let mut labels: Vec<usize> = Vec::new();
    for (i, &n) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(phrases[i]).take(n));
    }
    labels.extend(&distractor_cats);
    labels.shuffle(rng);

    let total = labels.len();
    let mut boxes = None;
    for _ in 0..SCENE_RESTARTS {
        boxes = place_objects(cfg, total, rng, total);
        if boxes.is_some() {
            break;
        }
    }
    let boxes = boxes.ok_or_else(|| {
        Error::InfeasibleScene(format!(
            "could not place {total} objects with overlap <= {} after {} tries each",
            cfg.max_overlap, cfg.placement_tries
        ))
    })?;

    let objects: Vec<SceneObject> = labels
        .iter()
        .zip(&boxes)
        .map(|(&category, &bbox)| SceneObject { category, bbox })
        .collect();
    let gt: Vec<Vec<Bbox>> = phrases
        .iter()
        .map(|&c| objects.iter().filter(|o| o.category == c).map(|o| o.bbox).collect())
        .collect();
    let phrase_feats = phrases
        .iter()
        .map(|&c| {
            vocab.text[c]
                .iter()
                .map(|v| {
                    let n: f64 = StandardNormal.sample(rng);
                    v + cfg.text_jitter * n
                })
                .collect()
        })
        .collect();
    Ok(GroundingSample {
        index,
        phrases,
        phrase_feats,
        gt,
        objects,
        grid: cfg.grid,
        channels: cfg.channels,
        noise: cfg.noise,
        noise_seed: rng.gen(),
    })
}

/// RNG for sample `index` under a global seed; independent of all other indices.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn gen_dataset(cfg: &SceneConfig, seed: u64, count: usize) -> Result<Vec<GroundingSample>> {
    let vocab = Vocabulary::new(cfg);
    (0..count as u64)
        .map(|i| gen_scene(cfg, &vocab, i, &mut sample_rng(seed, i)))
        .collect()
}

/// Write samples as JSON lines, atomically (temp file + rename).
pub fn save_dataset(path: &Path, samples: &[GroundingSample]) -> Result<()> {
    crate::io::write_atomic(path, |w| {
        let mut w = BufWriter::new(w);
        for s in samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<GroundingSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: GroundingSample = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SceneConfig {
        SceneConfig {
            noise: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn single_stamp_footprint() {
        let cfg = SceneConfig {
            min_phrases: 1,
            max_phrases: 1,
            instances: InstanceMode::OneToOne,
            max_distractors: 0,
            ..quiet()
        };
        let vocab = Vocabulary::new(&cfg);
        let s = gen_scene(&cfg, &vocab, 0, &mut sample_rng(5, 0)).unwrap();
        assert_eq!(s.gt.len(), 1);
        assert_eq!(s.gt[0].len(), 1);
        let field = s.render_field(&vocab);
        let b = s.gt[0][0].to_xyxy();
        let g = cfg.grid;
        for y in 0..g {
            for x in 0..g {
                let (cx, cy) = ((x as f64 + 0.5) / g as f64, (y as f64 + 0.5) / g as f64);
                let inside = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
                let cell = &field[(y * g + x) * cfg.channels..(y * g + x + 1) * cfg.channels];
                assert_eq!(cell.iter().any(|v| *v != 0.0), inside, "cell ({x}, {y})");
            }
        }
    }

    #[test]
    fn forced_one_to_many_count() {
        let cfg = SceneConfig {
            min_phrases: 1,
            max_phrases: 1,
            instances: InstanceMode::OneToMany { counts: vec![15] },
            max_distractors: 0,
            min_size: 0.08,
            ..Default::default()
        };
        let vocab = Vocabulary::new(&cfg);
        let s = gen_scene(&cfg, &vocab, 0, &mut sample_rng(1, 0)).unwrap();
        assert_eq!(s.gt[0].len(), 15);
        assert!(s.is_one_to_many());
        assert!(s.gt[0].iter().all(|b| b.is_valid()));
    }

    #[test]
    fn one_to_one_mode_has_single_instances() {
        let cfg = SceneConfig {
            instances: InstanceMode::OneToOne,
            ..Default::default()
        };
        for s in gen_dataset(&cfg, 3, 30).unwrap() {
            assert!(!s.is_one_to_many());
        }
    }

    #[test]
    fn generation_is_deterministic_per_index() {
        let cfg = SceneConfig::default();
        let a = gen_dataset(&cfg, 7, 5).unwrap();
        let b = gen_dataset(&cfg, 7, 8).unwrap();
        assert_eq!(a[..], b[..5]);
        let vocab = Vocabulary::new(&cfg);
        let lone = gen_scene(&cfg, &vocab, 3, &mut sample_rng(7, 3)).unwrap();
        assert_eq!(lone, a[3]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let too_big = SceneConfig {
            instances: InstanceMode::OneToMany { counts: vec![40] },
            min_size: 0.3,
            max_size: 0.4,
            max_overlap: 0.0,
            placement_tries: 20,
            ..Default::default()
        };
        let vocab = Vocabulary::new(&too_big);
        assert!(matches!(
            gen_scene(&too_big, &vocab, 0, &mut sample_rng(0, 0)),
            Err(Error::InfeasibleScene(_))
        ));
        let tiny = SceneConfig {
            min_size: 0.01,
            ..Default::default()
        };
        assert!(tiny.validate().is_err());
        let small_vocab = SceneConfig {
            vocab: 2,
            ..Default::default()
        };
        assert!(small_vocab.validate().is_err());
    }

    #[test]
    fn constant_object_pools_to_prototype() {
        let cfg = SceneConfig {
            max_phrases: 1,
            instances: InstanceMode::OneToOne,
            max_distractors: 0,
            ..quiet()
        };
        let vocab = Vocabulary::new(&cfg);
        let s = gen_scene(&cfg, &vocab, 0, &mut sample_rng(2, 0)).unwrap();
        let feats = s.features(&vocab);
        let pooled = roi_features(&feats, &s.gt[0], 7);
        let proto = &vocab.visual[s.phrases[0]];
        for cell in pooled[0].chunks(cfg.channels) {
            for (a, b) in cell.iter().zip(proto) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_scene_pools_to_channel_means() {
        let s = gen_dataset(&SceneConfig::default(), 4, 1).unwrap().remove(0);
        let vocab = Vocabulary::new(&SceneConfig::default());
        let feats = s.features(&vocab);
        let means = feats.channel_means();
        let full = Bbox::new(0.5, 0.5, 1.0, 1.0);
        let one = roi_features(&feats, &[full], 1);
        for (a, b) in one[0].iter().zip(&means) {
            assert!((a - b).abs() < 1e-9);
        }
        let grid = roi_features(&feats, &[full], 7);
        for k in 0..feats.channels() {
            let avg = grid[0].chunks(feats.channels()).map(|c| c[k]).sum::<f64>() / 49.0;
            assert!((avg - means[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_is_translation_consistent() {
        let (g, c) = (32, 3);
        let shift = 5;
        let mut base = vec![0.0; g * g * c];
        let mut moved = vec![0.0; g * g * c];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for y in 0..g - shift {
            for x in 0..g - shift {
                for k in 0..c {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    base[(y * g + x) * c + k] = v;
                    moved[((y + shift) * g + x + shift) * c + k] = v;
                }
            }
        }
        let (a, b) = (SceneFeatures::new(base, g, c), SceneFeatures::new(moved, g, c));
        let d = shift as f64 / g as f64;
        let boxes = [Bbox::new(0.31, 0.27, 0.22, 0.37), Bbox::new(0.5, 0.4, 0.13, 0.11)];
        let shifted: Vec<Bbox> = boxes.iter().map(|b| Bbox::new(b.cx + d, b.cy + d, b.w, b.h)).collect();
        let pa = roi_features(&a, &boxes, 7);
        let pb = roi_features(&b, &shifted, 7);
        for (ra, rb) in pa.iter().zip(&pb) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn position_channels_follow_bins() {
        let s = gen_dataset(&SceneConfig::default(), 4, 1).unwrap().remove(0);
        let vocab = Vocabulary::new(&SceneConfig::default());
        let pooler = RoiPooler {
            with_position: true,
            ..RoiPooler::new(2)
        };
        let out = pooler.pool(&s.features(&vocab), &[Bbox::new(0.5, 0.5, 0.4, 0.2)]);
        assert_eq!(out[0].len(), pooler.feature_dim(8));
        let stride = 10;
        assert!((out[0][8] - 0.4).abs() < 1e-12 && (out[0][9] - 0.45).abs() < 1e-12);
        assert!((out[0][3 * stride + 8] - 0.6).abs() < 1e-12 && (out[0][3 * stride + 9] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn nearest_prototype_recovers_categories() {
        let cfg = quiet();
        let vocab = Vocabulary::new(&cfg);
        for s in gen_dataset(&cfg, 11, 40).unwrap() {
            let feats = s.features(&vocab);
            for (i, set) in s.gt.iter().enumerate() {
                for pooled in roi_features(&feats, set, 1) {
                    let best = (0..cfg.vocab)
                        .max_by(|&a, &b| {
                            let da: f64 = pooled.iter().zip(&vocab.visual[a]).map(|(x, y)| x * y).sum();
                            let db: f64 = pooled.iter().zip(&vocab.visual[b]).map(|(x, y)| x * y).sum();
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    assert_eq!(best, s.phrases[i]);
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_dataset(&SceneConfig::default(), 2, 4).unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &samples).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), samples);

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_dataset(&empty).unwrap().is_empty());

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = "{\"index\": 2, broken".into();
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, lines.join("\n")).unwrap();
        match load_dataset(&bad) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a line-3 error, got {other:?}"),
        }
    }
}
