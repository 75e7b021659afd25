//! Box representations and overlap measures.
//!
//! Boxes live in two domains: [`Bbox`] is the normalized center-size form in
//! `[0, 1]` scene units, and [`ScaledBox`] is the diffusion signal domain
//! `[-scale, scale]^4` obtained by the affine map `(2v - 1) * scale`.

use serde::{Deserialize, Serialize};

/// Minimum width/height of a box after clamping.
pub const EPS_BOX: f64 = 1e-4;

/// Unions smaller than this are treated as empty.
const EPS_AREA: f64 = 1e-12;

/// Normalized center-size box `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-form box `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XyxyBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// A box in the diffusion signal domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledBox(pub [f64; 4]);

impl Bbox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_xyxy(self) -> XyxyBox {
        cxcywh_to_xyxy(self)
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    /// Clamp into a valid box: center in `[0, 1]`, size in `[EPS_BOX, 1]`.
    pub fn clamped(self) -> Self {
        Self {
            cx: self.cx.clamp(0.0, 1.0),
            cy: self.cy.clamp(0.0, 1.0),
            w: self.w.clamp(EPS_BOX, 1.0),
            h: self.h.clamp(EPS_BOX, 1.0),
        }
    }

    /// Clip to the unit scene extent, keeping at least `EPS_BOX` of size.
    pub fn clipped_to_scene(self) -> Self {
        let b = self.to_xyxy();
        let x1 = b.x1.clamp(0.0, 1.0 - EPS_BOX);
        let y1 = b.y1.clamp(0.0, 1.0 - EPS_BOX);
        let x2 = b.x2.clamp(x1 + EPS_BOX, 1.0);
        let y2 = b.y2.clamp(y1 + EPS_BOX, 1.0);
        XyxyBox { x1, y1, x2, y2 }.to_cxcywh()
    }

    pub fn is_valid(self) -> bool {
        let v = self.to_array();
        v.iter().all(|x| x.is_finite())
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w >= EPS_BOX
            && self.h >= EPS_BOX
    }
}

impl XyxyBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_cxcywh(self) -> Bbox {
        Bbox {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    fn intersection(self, other: XyxyBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    fn hull_area(self, other: XyxyBox) -> f64 {
        let w = self.x2.max(other.x2) - self.x1.min(other.x1);
        let h = self.y2.max(other.y2) - self.y1.min(other.y1);
        w.max(0.0) * h.max(0.0)
    }
}

impl ScaledBox {
    pub fn clamped(self, scale: f64) -> Self {
        ScaledBox(self.0.map(|v| v.clamp(-scale, scale)))
    }
}

pub fn cxcywh_to_xyxy(b: Bbox) -> XyxyBox {
    XyxyBox {
        x1: b.cx - 0.5 * b.w,
        y1: b.cy - 0.5 * b.h,
        x2: b.cx + 0.5 * b.w,
        y2: b.cy + 0.5 * b.h,
    }
}

/// Intersection over union. Returns 0 when the union is degenerate.
pub fn iou(a: XyxyBox, b: XyxyBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union < EPS_AREA {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: `iou - (hull - union) / hull`.
pub fn giou(a: XyxyBox, b: XyxyBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull_area(b);
    if union < EPS_AREA || hull < EPS_AREA {
        return if hull < EPS_AREA { 0.0 } else { -(hull - union) / hull };
    }
    inter / union - (hull - union) / hull
}

/// Row-major `|a| x |b|` matrix of IoU values.
pub fn pairwise_iou(a: &[XyxyBox], b: &[XyxyBox]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| iou(*x, *y)).collect())
        .collect()
}

/// Map a normalized box into the signal domain, `(2v - 1) * scale` per component.
pub fn signal_scale(b: Bbox, scale: f64) -> ScaledBox {
    ScaledBox(b.to_array().map(|v| (2.0 * v - 1.0) * scale))
}

/// Exact inverse of [`signal_scale`] with no clamping.
pub fn signal_unscale_raw(s: ScaledBox, scale: f64) -> Bbox {
    Bbox::from_array(s.0.map(|v| (v / scale + 1.0) * 0.5))
}

/// Inverse of [`signal_scale`], clamped to a valid [`Bbox`].
pub fn signal_unscale(s: ScaledBox, scale: f64) -> Bbox {
    signal_unscale_raw(s, scale).clamped()
}
