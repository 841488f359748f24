//! Axis-aligned box arithmetic.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` in continuous pixel
//! coordinates with area `(x2 - x1) * (y2 - y1)`; there is no `+1` pixel
//! correction, so an integer box `[0, 0, 2, 2]` covers exactly four pixels.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default clamp on `dw`/`dh` before exponentiation in [`decode_deltas`].
pub const DEFAULT_DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// An axis-aligned rectangle with strictly positive area.
#[derive(Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if finite && x2 > x1 && y2 > y1 {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// Box from center and size. Fails on non-positive or non-finite size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }
    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }
    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(d)?;
        BBox::try_from(a).map_err(serde::de::Error::custom)
    }
}

/// Box regression parameterization relative to a reference box.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeltaVec {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl DeltaVec {
    pub const ZERO: DeltaVec = DeltaVec {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} outside [0, 1]");
        Self { bbox, score }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Generalized IoU: IoU minus the empty fraction of the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let enclosing = a.enclosing(b).area();
    inter / union - (enclosing - union) / enclosing
}

pub fn encode_deltas(target: &BBox, reference: &BBox) -> DeltaVec {
    let (tcx, tcy) = target.center();
    let (rcx, rcy) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    DeltaVec {
        dx: (tcx - rcx) / rw,
        dy: (tcy - rcy) / rh,
        dw: (target.width() / rw).ln(),
        dh: (target.height() / rh).ln(),
    }
}

/// Inverse of [`encode_deltas`]. Log-size components are clamped to
/// `[-clamp, clamp]` before exponentiation; non-finite deltas fall back to
/// the reference geometry for the affected component.
pub fn decode_deltas(delta: &DeltaVec, reference: &BBox, clamp: f64) -> BBox {
    let (rcx, rcy) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let finite_or_zero = |v: f64| if v.is_finite() { v } else { 0.0 };
    let dw = finite_or_zero(delta.dw).clamp(-clamp, clamp);
    let dh = finite_or_zero(delta.dh).clamp(-clamp, clamp);
    let cx = rcx + finite_or_zero(delta.dx) * rw;
    let cy = rcy + finite_or_zero(delta.dy) * rh;
    let w = rw * dw.exp();
    let h = rh * dh.exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Clamp a box to `[0, width] x [0, height]`. If clamping collapses an
/// axis, a one-pixel extent is placed at the clamped coordinate (shifted
/// inward at the far border).
pub fn clip_box(b: &BBox, width: f64, height: f64) -> BBox {
    fn axis(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
        let lo_c = lo.clamp(0.0, limit);
        let hi_c = hi.clamp(0.0, limit);
        if hi_c > lo_c {
            return (lo_c, hi_c);
        }
        let extent = limit.min(1.0);
        let start = lo_c.min(limit - extent);
        (start, start + extent)
    }
    let (x1, x2) = axis(b.x1, b.x2, width);
    let (y1, y2) = axis(b.y1, b.y2, height);
    BBox { x1, y1, x2, y2 }
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited in descending score order (equal scores keep
/// input order) and a candidate is dropped when its IoU with any kept box
/// exceeds `iou_threshold`.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));

    let mut kept: Vec<ScoredBox> = Vec::new();
    for idx in order {
        let cand = &candidates[idx];
        if kept
            .iter()
            .all(|k| iou(&k.bbox, &cand.bbox) <= iou_threshold)
        {
            kept.push(*cand);
        }
    }
    kept
}
