//! The grounding decoder: box/text/time projections, one cross-modal
//! transformer block, the similarity head and shift-scale box regression.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sinusoidal_embedding, Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{signal_scale, Bbox, ScaledBox, EPS_BOX};
use crate::synthetic::{RoiPooler, SceneFeatures};

/// Additive attention bias for masked phrase keys.
const MASK_BIAS: f64 = -1e9;

/// Which box features feed the conditioned regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionBase {
    /// Value projection of the box features.
    Value,
    /// Output of the cross-modal block.
    Attended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub text_dim: usize,
    /// Appearance channels of the scene features.
    pub channels: usize,
    pub roi_resolution: usize,
    /// Append bin-center coordinates to pooled features.
    pub position_channels: bool,
    /// Side of the coarse context grid around each box; `0` disables it.
    pub context_resolution: usize,
    /// Enlargement of the box for the context grid.
    pub context_scale: f64,
    pub box_hidden: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub reg_hidden: usize,
    pub regression_base: RegressionBase,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            text_dim: 16,
            channels: 8,
            roi_resolution: 7,
            position_channels: true,
            context_resolution: 4,
            context_scale: 2.0,
            box_hidden: 64,
            dim: 32,
            heads: 4,
            ffn_hidden: 64,
            reg_hidden: 32,
            regression_base: RegressionBase::Value,
            ln_eps: 1e-5,
            init_seed: 6,
        }
    }
}

impl DecoderConfig {
    /// Dimensions of the published structure table (FPN features with 256
    /// channels, 768-d phrase features).
    pub fn full_scale() -> Self {
        Self {
            text_dim: 768,
            channels: 256,
            roi_resolution: 7,
            position_channels: false,
            context_resolution: 0,
            box_hidden: 512,
            dim: 256,
            heads: 8,
            ffn_hidden: 512,
            reg_hidden: 256,
            ..Self::default()
        }
    }

    pub fn pooler(&self) -> RoiPooler {
        RoiPooler {
            resolution: self.roi_resolution,
            with_position: self.position_channels,
            context: self.context_resolution,
            context_scale: self.context_scale,
        }
    }

    pub fn box_dim(&self) -> usize {
        self.pooler().feature_dim(self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.text_dim,
            self.channels,
            self.roi_resolution,
            self.box_hidden,
            self.dim,
            self.heads,
            self.ffn_hidden,
            self.reg_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide the model dimension ({})",
                self.heads, self.dim
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::Config("model dimension must be even for the time embedding".into()));
        }
        if self.context_resolution > 0 && !(self.context_scale.is_finite() && self.context_scale >= 1.0) {
            return Err(Error::Config("context_scale must be at least 1".into()));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::Config("ln_eps must be non-negative".into()));
        }
        Ok(())
    }

    /// Trainable parameter count, without allocating.
    pub fn param_count(&self) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let d = self.dim;
        lin(self.box_dim(), self.box_hidden)
            + lin(self.box_hidden, d)
            + lin(self.text_dim, d)
            + 2 * lin(d, d)
            + 6 * lin(d, d)
            + lin(d, d)
            + 2 * 2 * d
            + lin(d, self.ffn_hidden)
            + lin(self.ffn_hidden, d)
            + 2 * lin(d, d)
            + lin(d, self.reg_hidden)
            + lin(self.reg_hidden, 4)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add(format!("{name}.b"), Mat::zeros(1, fan_out));
        Self { w, b }
    }

    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        let get = |s: &str| {
            store
                .find(&format!("{name}.{s}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}.{s}")))
        };
        Ok(Self { w: get("w")?, b: get("b")? })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, dim)),
        }
    }

    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        let get = |s: &str| {
            store
                .find(&format!("{name}.{s}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}.{s}")))
        };
        Ok(Self {
            gamma: get("gamma")?,
            beta: get("beta")?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let y = g.layer_norm(x, eps);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(y, gamma)?;
        g.add_row(y, beta)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    box_in: Linear,
    box_out: Linear,
    text: Linear,
    time_in: Linear,
    time_out: Linear,
    q_box: Linear,
    k_box: Linear,
    v_box: Linear,
    q_text: Linear,
    k_text: Linear,
    v_text: Linear,
    out: Linear,
    norm1: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm2: Norm,
    scale_map: Linear,
    shift_map: Linear,
    reg_in: Linear,
    reg_out: Linear,
}

const LINEARS: [&str; 18] = [
    "box_proj.0",
    "box_proj.1",
    "text_proj",
    "time_mlp.0",
    "time_mlp.1",
    "attn.q_box",
    "attn.k_box",
    "attn.v_box",
    "attn.q_text",
    "attn.k_text",
    "attn.v_text",
    "attn.out",
    "ffn.0",
    "ffn.1",
    "cond.scale",
    "cond.shift",
    "reg.0",
    "reg.1",
];

impl Layout {
    fn build(cfg: &DecoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let mut lin = |name: &str, i: usize, o: usize| Linear::new(store, name, i, o, rng);
        let box_in = lin(LINEARS[0], cfg.box_dim(), cfg.box_hidden);
        let box_out = lin(LINEARS[1], cfg.box_hidden, d);
        let text = lin(LINEARS[2], cfg.text_dim, d);
        let time_in = lin(LINEARS[3], d, d);
        let time_out = lin(LINEARS[4], d, d);
        let q_box = lin(LINEARS[5], d, d);
        let k_box = lin(LINEARS[6], d, d);
        let v_box = lin(LINEARS[7], d, d);
        let q_text = lin(LINEARS[8], d, d);
        let k_text = lin(LINEARS[9], d, d);
        let v_text = lin(LINEARS[10], d, d);
        let out = lin(LINEARS[11], d, d);
        let ffn_in = lin(LINEARS[12], d, cfg.ffn_hidden);
        let ffn_out = lin(LINEARS[13], cfg.ffn_hidden, d);
        let scale_map = lin(LINEARS[14], d, d);
        let shift_map = lin(LINEARS[15], d, d);
        let reg_in = lin(LINEARS[16], d, cfg.reg_hidden);
        let reg_out = lin(LINEARS[17], cfg.reg_hidden, 4);
        let norm1 = Norm::new(store, "norm1", d);
        let norm2 = Norm::new(store, "norm2", d);
        Self {
            box_in,
            box_out,
            text,
            time_in,
            time_out,
            q_box,
            k_box,
            v_box,
            q_text,
            k_text,
            v_text,
            out,
            norm1,
            ffn_in,
            ffn_out,
            norm2,
            scale_map,
            shift_map,
            reg_in,
            reg_out,
        }
    }

    fn lookup(store: &ParamStore) -> Result<Self> {
        let l = |i: usize| Linear::lookup(store, LINEARS[i]);
        Ok(Self {
            box_in: l(0)?,
            box_out: l(1)?,
            text: l(2)?,
            time_in: l(3)?,
            time_out: l(4)?,
            q_box: l(5)?,
            k_box: l(6)?,
            v_box: l(7)?,
            q_text: l(8)?,
            k_text: l(9)?,
            v_text: l(10)?,
            out: l(11)?,
            ffn_in: l(12)?,
            ffn_out: l(13)?,
            scale_map: l(14)?,
            shift_map: l(15)?,
            reg_in: l(16)?,
            reg_out: l(17)?,
            norm1: Norm::lookup(store, "norm1")?,
            norm2: Norm::lookup(store, "norm2")?,
        })
    }
}

/// Outputs of the cross-modal block.
#[derive(Debug, Clone, Copy)]
pub struct CrossModalOut {
    /// Refined box features `N x D`.
    pub boxes: Var,
    /// Value projection of the input box features `N x D`.
    pub box_values: Var,
    /// `N x P` similarity, zero in masked columns.
    pub sim: Var,
    /// Phrase features, passed through untouched.
    pub phrases: Var,
}

/// Graph handles produced by one denoising pass.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseVars {
    /// Predicted clean boxes, normalized center-size, `N x 4`.
    pub boxes: Var,
    pub sim: Var,
}

/// Decoder parameters together with their layout.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub store: ParamStore,
    layout: Layout,
}

fn mask_row(mask: &[f64]) -> Mat {
    Mat::row_vector(mask.to_vec())
}

impl DecoderParams {
    /// Xavier-initialized weights, zero biases, unit layer-norm gains.
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let layout = Layout::build(&config, &mut store, &mut rng);
        Ok(Self { config, store, layout })
    }

    pub fn from_store(config: DecoderConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::lookup(&store)?;
        let fresh = Self::new(config.clone())?;
        for id in fresh.store.ids() {
            let name = fresh.store.name(id);
            let found = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if store.value(found).shape() != fresh.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    store.value(found).shape(),
                    fresh.store.value(id).shape()
                )));
            }
        }
        if store.len() != fresh.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, expected {}",
                store.len(),
                fresh.store.len()
            )));
        }
        Ok(Self { config, store, layout })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// `P x d_t` raw phrase features to `P x D`.
    pub fn project_text(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Var> {
        let (p, d) = g.shape(raw);
        if p == 0 || d != self.config.text_dim {
            return Err(Error::Shape {
                op: "project_text",
                detail: format!("{p} x {d}, expected P >= 1 and d_t = {}", self.config.text_dim),
            });
        }
        self.layout.text.apply(g, store, raw)
    }

    /// `N x d_b` pooled features to `N x D`.
    pub fn project_boxes(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var> {
        let h = self.layout.box_in.apply(g, store, pooled)?;
        let h = g.relu(h);
        self.layout.box_out.apply(g, store, h)
    }

    /// `1 x D` time features.
    pub fn project_time(&self, g: &mut Graph, store: &ParamStore, t: f64) -> Result<Var> {
        let e = g.constant(Mat::row_vector(sinusoidal_embedding(t, self.config.dim)?));
        let h = self.layout.time_in.apply(g, store, e)?;
        let h = g.relu(h);
        self.layout.time_out.apply(g, store, h)
    }

    /// One cross-modal transformer block. Box queries attend over the
    /// concatenated box and phrase keys; phrases with `mask == 0` get no
    /// attention weight and a zero similarity column.
    pub fn cross_modal_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        boxes: Var,
        phrases: Var,
        mask: &[f64],
    ) -> Result<CrossModalOut> {
        let d = self.config.dim;
        let (n, db) = g.shape(boxes);
        let (p, dq) = g.shape(phrases);
        if db != d || (p > 0 && dq != d) || mask.len() != p {
            return Err(Error::Shape {
                op: "cross_modal_block",
                detail: format!("boxes {n}x{db}, phrases {p}x{dq}, mask {}", mask.len()),
            });
        }
        let l = &self.layout;
        let q = l.q_box.apply(g, store, boxes)?;
        let kb = l.k_box.apply(g, store, boxes)?;
        let vb = l.v_box.apply(g, store, boxes)?;
        let real = mask.iter().any(|&m| m > 0.0);
        let (k, v) = if real {
            let kq = l.k_text.apply(g, store, phrases)?;
            let vq = l.v_text.apply(g, store, phrases)?;
            (g.concat_rows(kb, kq)?, g.concat_rows(vb, vq)?)
        } else {
            (kb, vb)
        };
        let keys = g.shape(k).0;
        let bias = if real && mask.iter().any(|&m| m <= 0.0) {
            let mut b = Mat::zeros(n, keys);
            for r in 0..n {
                for (j, &m) in mask.iter().enumerate() {
                    if m <= 0.0 {
                        b.set(r, n + j, MASK_BIAS);
                    }
                }
            }
            Some(g.constant(b))
        } else {
            None
        };

        let hd = d / self.config.heads;
        let temp = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let s = g.matmul_bt(qh, kh)?;
            let mut s = g.scale(s, temp);
            if let Some(b) = bias {
                s = g.add(s, b)?;
            }
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vh)?);
        }
        let att = g.concat_cols(&heads)?;
        let att = l.out.apply(g, store, att)?;
        let x = g.add(att, boxes)?;
        let x = l.norm1.apply(g, store, x, self.config.ln_eps)?;
        let f = l.ffn_in.apply(g, store, x)?;
        let f = g.relu(f);
        let f = l.ffn_out.apply(g, store, f)?;
        let y = g.add(f, x)?;
        let refined = l.norm2.apply(g, store, y, self.config.ln_eps)?;

        let sim = if p > 0 {
            let qq = l.q_text.apply(g, store, phrases)?;
            let a = g.row_normalize(refined);
            let b = g.row_normalize(qq);
            let s = g.matmul_bt(a, b)?;
            let m = g.constant(mask_row(mask));
            g.mul_row(s, m)?
        } else {
            g.constant(Mat::zeros(n, 0))
        };
        Ok(CrossModalOut {
            boxes: refined,
            box_values: vb,
            sim,
            phrases,
        })
    }

    /// Shift-scale conditioned regression: `base * (1 + scale(F_t)) +
    /// shift(cond)` followed by the regression head, giving `N x 4` deltas.
    pub fn conditioned_regression(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        base: Var,
        time: Var,
        cond: Var,
    ) -> Result<Var> {
        let l = &self.layout;
        let scale = l.scale_map.apply(g, store, time)?;
        let scale = g.add_const(scale, 1.0);
        let shift = l.shift_map.apply(g, store, cond)?;
        let h = g.mul_row(base, scale)?;
        let h = g.add(h, shift)?;
        let h = l.reg_in.apply(g, store, h)?;
        let h = g.relu(h);
        l.reg_out.apply(g, store, h)
    }

    /// Full denoising pass on a graph. `phrases` are projected phrase
    /// features. Returns clamped normalized boxes and the similarity matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        noisy: &[ScaledBox],
        scene: &SceneFeatures,
        phrases: Var,
        mask: &[f64],
        t: i64,
        signal: f64,
    ) -> Result<DenoiseVars> {
        if scene.channels() != self.config.channels {
            return Err(Error::Shape {
                op: "denoise",
                detail: format!("scene has {} channels, decoder expects {}", scene.channels(), self.config.channels),
            });
        }
        let n = noisy.len();
        let current: Vec<Bbox> = noisy
            .iter()
            .map(|b| crate::geometry::signal_unscale(*b, signal))
            .collect();
        let pooled = if n == 0 {
            Mat::zeros(0, self.config.box_dim())
        } else {
            Mat::from_rows(&self.config.pooler().pool(scene, &current))
        };
        let pooled = g.constant(pooled);
        let fb = self.project_boxes(g, store, pooled)?;
        let ft = self.project_time(g, store, t as f64)?;
        let cm = self.cross_modal_block(g, store, fb, phrases, mask)?;
        let (_, p) = g.shape(cm.sim);
        let cond = if p > 0 {
            g.matmul(cm.sim, cm.phrases)?
        } else {
            g.constant(Mat::zeros(n, self.config.dim))
        };
        let base = match self.config.regression_base {
            RegressionBase::Value => cm.box_values,
            RegressionBase::Attended => cm.boxes,
        };
        let deltas = self.conditioned_regression(g, store, base, ft, cond)?;
        // Residual in signal space, then back to normalized coordinates.
        let raw = Mat::from_rows(&noisy.iter().map(|b| b.0.to_vec()).collect::<Vec<_>>());
        let raw = if n == 0 { Mat::zeros(0, 4) } else { raw };
        let start = g.constant(raw);
        let moved = g.add(start, deltas)?;
        let unit = g.scale(moved, 0.5 / signal);
        let unit = g.add_const(unit, 0.5);
        let boxes = g.clamp_cols(unit, &[0.0, 0.0, EPS_BOX, EPS_BOX], &[1.0; 4])?;
        Ok(DenoiseVars { boxes, sim: cm.sim })
    }

    /// Denoise without keeping the graph. `raw_phrases` is `P x d_t`.
    pub fn denoise(
        &self,
        noisy: &[ScaledBox],
        scene: &SceneFeatures,
        raw_phrases: &Mat,
        mask: &[f64],
        t: i64,
        signal: f64,
    ) -> Result<(Vec<ScaledBox>, Mat)> {
        let mut g = Graph::new();
        let raw = g.constant(raw_phrases.clone());
        let fq = self.project_text(&mut g, &self.store, raw)?;
        let out = self.denoise_graph(&mut g, &self.store, noisy, scene, fq, mask, t, signal)?;
        let boxes = g.value(out.boxes);
        let pred = (0..boxes.rows)
            .map(|i| {
                let r = boxes.row(i);
                signal_scale(Bbox::new(r[0], r[1], r[2], r[3]), signal)
            })
            .collect();
        Ok((pred, g.value(out.sim).clone()))
    }

    /// Binary checkpoint: `u64` LE header length, JSON header, then every
    /// tensor as LE `f64` in header order. Written atomically.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let tensors: Vec<TensorHeader> = self
            .store
            .ids()
            .map(|id| {
                let v = self.store.value(id);
                TensorHeader {
                    name: self.store.name(id).to_string(),
                    rows: v.rows,
                    cols: v.cols,
                }
            })
            .collect();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            tensors,
            meta,
        };
        let json = serde_json::to_vec(&header)?;
        crate::io::write_atomic(path, |f| {
            let mut w = std::io::BufWriter::new(f);
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for id in self.store.ids() {
                for v in &self.store.value(id).data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
            Ok(())
        })
    }

    /// Load a checkpoint written by [`DecoderParams::save`], returning the
    /// parameters and the stored metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(&format!("unknown format {}", header.format)));
        }
        let mut data = &bytes[8 + hlen..];
        let mut store = ParamStore::new();
        for t in &header.tensors {
            let n = t.rows * t.cols;
            if data.len() < n * 8 {
                return Err(bad(&format!("truncated data for {}", t.name)));
            }
            let vals = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            store.add(t.name.clone(), Mat::from_vec(t.rows, t.cols, vals));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok((Self::from_store(header.config, store)?, header.meta))
    }
}

const CHECKPOINT_FORMAT: &str = "groundiff-ckpt-1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: DecoderConfig,
    tensors: Vec<TensorHeader>,
    meta: serde_json::Value,
}

/// Phrase features of one sample as a `P x d_t` matrix.
pub fn phrase_matrix(feats: &[Vec<f64>], text_dim: usize) -> Result<Mat> {
    if feats.iter().any(|f| f.len() != text_dim) {
        return Err(invalid(format!("phrase features must have dimension {text_dim}")));
    }
    Ok(Mat::from_rows(feats))
}
