//! Training objectives with analytic gradients.
//!
//! Every loss returns a [`LossValue`] carrying the scalar value together with
//! its gradient with respect to the prediction inputs: foreground
//! probabilities (`grad_p`) and regression deltas (`grad_t`). The detector
//! feeds these gradients into the autodiff tape as a custom node, so the
//! derivatives here are what actually trains the network.
//!
//! The unsupervised term is a weighted entropy over foreground
//! probabilities. A probability below `tau1` is weighted by
//! `(1 - alpha) * p^gamma`, one above `tau2` by `alpha * (1 - p)^gamma`, and
//! everything in the closed band `[tau1, tau2]` is left out. The weighted
//! quantity is `-p * ln p`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, BBox, DeltaVec, DEFAULT_DELTA_CLAMP};

/// Clamp applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegressionKind {
    SmoothL1,
    Giou,
}

impl fmt::Display for RegressionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegressionKind::SmoothL1 => "smooth_l1",
            RegressionKind::Giou => "giou",
        })
    }
}

impl FromStr for RegressionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_l1" => Ok(RegressionKind::SmoothL1),
            "giou" => Ok(RegressionKind::Giou),
            other => Err(Error::invalid("reg_kind", format!("unknown kind `{other}`"))),
        }
    }
}

/// Which classifier outputs enter the weighted-entropy average.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyScope {
    /// Every anchor output of the image.
    AllOutputs,
    /// Only the anchors sampled for the supervised loss.
    Minibatch,
}

impl fmt::Display for EntropyScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntropyScope::AllOutputs => "all",
            EntropyScope::Minibatch => "minibatch",
        })
    }
}

impl FromStr for EntropyScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(EntropyScope::AllOutputs),
            "minibatch" => Ok(EntropyScope::Minibatch),
            other => Err(Error::invalid("we_scope", format!("unknown scope `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub eta: f64,
    pub reg_kind: RegressionKind,
    pub smooth_l1_beta: f64,
    pub we_scope: EntropyScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            gamma: 6.0,
            alpha: 0.1,
            tau1: 0.3,
            tau2: 0.3,
            eta: 0.125,
            reg_kind: RegressionKind::SmoothL1,
            smooth_l1_beta: 1.0 / 9.0,
            we_scope: EntropyScope::AllOutputs,
        }
    }
}

impl LossConfig {
    /// Settings tuned for the large-scale (many-class) regime.
    pub fn large_scale() -> Self {
        Self {
            gamma: 4.0,
            alpha: 0.25,
            tau1: 0.1,
            tau2: 0.1,
            eta: 0.03125,
            ..Self::default()
        }
    }

    /// Set both confidence thresholds to `tau`.
    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau1 = tau;
        self.tau2 = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, arg: &'static str, msg: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(arg, msg))
            }
        };
        check(self.lambda1 >= 0.0, "lambda1", format!("{} < 0", self.lambda1))?;
        check(self.lambda2 >= 0.0, "lambda2", format!("{} < 0", self.lambda2))?;
        check(self.gamma >= 0.0, "gamma", format!("{} < 0", self.gamma))?;
        check(
            self.alpha > 0.0 && self.alpha < 1.0,
            "alpha",
            format!("{} outside (0, 1)", self.alpha),
        )?;
        check(
            (0.0..=1.0).contains(&self.tau1) && (0.0..=1.0).contains(&self.tau2),
            "tau",
            format!("({}, {}) outside [0, 1]", self.tau1, self.tau2),
        )?;
        check(
            self.tau1 <= self.tau2,
            "tau",
            format!("tau1 {} > tau2 {}", self.tau1, self.tau2),
        )?;
        check(self.eta >= 0.0, "eta", format!("{} < 0", self.eta))?;
        check(
            self.smooth_l1_beta > 0.0,
            "smooth_l1_beta",
            format!("{} <= 0", self.smooth_l1_beta),
        )?;
        Ok(())
    }
}

/// A loss value and its gradient with respect to the prediction inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_t: Vec<DeltaVec>,
}

impl LossValue {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Spread a loss defined on `indices` into arrays of length `len`.
    pub fn scatter(&self, indices: &[usize], len: usize) -> LossValue {
        let mut grad_p = vec![0.0; if self.grad_p.is_empty() { 0 } else { len }];
        let mut grad_t = vec![DeltaVec::ZERO; if self.grad_t.is_empty() { 0 } else { len }];
        for (k, &i) in indices.iter().enumerate() {
            if let Some(g) = self.grad_p.get(k) {
                grad_p[i] += g;
            }
            if let Some(g) = self.grad_t.get(k) {
                let t = &mut grad_t[i];
                t.dx += g.dx;
                t.dy += g.dy;
                t.dw += g.dw;
                t.dh += g.dh;
            }
        }
        LossValue {
            value: self.value,
            grad_p,
            grad_t,
        }
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy against a soft target in `[0, 1]`, with the
/// derivative in the clamped probability.
fn soft_bce(p: f64, target: f64) -> (f64, f64) {
    let pc = clamp_prob(p);
    let value = -target * pc.ln() - (1.0 - target) * (1.0 - pc).ln();
    let grad = (pc - target) / (pc * (1.0 - pc));
    (value, grad)
}

pub fn bce(p: f64, y: u8) -> LossValue {
    let (value, grad) = soft_bce(p, f64::from(y.min(1)));
    LossValue {
        value,
        grad_p: vec![grad],
        grad_t: Vec::new(),
    }
}

/// Localization-quality loss: cross-entropy against a soft target.
pub fn quality_loss(c: f64, c_star: f64) -> LossValue {
    let (value, grad) = soft_bce(c, c_star);
    LossValue {
        value,
        grad_p: vec![grad],
        grad_t: Vec::new(),
    }
}

/// Smooth L1 summed over the four components.
pub fn smooth_l1(t: &DeltaVec, t_star: &DeltaVec, beta: f64) -> LossValue {
    let (value, grad) = smooth_l1_4(t.to_array(), t_star.to_array(), beta);
    LossValue {
        value,
        grad_p: Vec::new(),
        grad_t: vec![DeltaVec::from_array(grad)],
    }
}

/// Smooth L1 over four raw components; returns value and gradient in `pred`.
pub fn smooth_l1_4(pred: [f64; 4], target: [f64; 4], beta: f64) -> (f64, [f64; 4]) {
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = pred[k] - target[k];
        if d.abs() < beta {
            value += 0.5 * d * d / beta;
            grad[k] = d / beta;
        } else {
            value += d.abs() - 0.5 * beta;
            grad[k] = d.signum();
        }
    }
    (value, grad)
}

/// `1 - GIoU(pred, target)` and its gradient in the predicted corners
/// `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerLoss {
    pub value: f64,
    pub grad: [f64; 4],
}

pub fn giou_loss(pred: &BBox, target: &BBox) -> CornerLoss {
    let [px1, py1, px2, py2] = pred.to_array();
    let [gx1, gy1, gx2, gy2] = target.to_array();
    let (pw, ph) = (px2 - px1, py2 - py1);
    let area_p = pw * ph;
    let area_g = target.area();

    // intersection extents and which side of each bound belongs to pred
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let union = area_p + area_g - inter;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let enclosing = cw * ch;
    let value = 2.0 - inter / union - union / enclosing;

    let d_area_p = [-ph, -pw, ph, pw];
    let d_inter = if overlapping {
        [
            if px1 > gx1 { -ih } else { 0.0 },
            if py1 > gy1 { -iw } else { 0.0 },
            if px2 < gx2 { ih } else { 0.0 },
            if py2 < gy2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_enclosing = [
        if px1 < gx1 { -ch } else { 0.0 },
        if py1 < gy1 { -cw } else { 0.0 },
        if px2 > gx2 { ch } else { 0.0 },
        if py2 > gy2 { cw } else { 0.0 },
    ];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area_p[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enclosing - union * d_enclosing[k]) / (enclosing * enclosing);
        grad[k] = -d_iou - d_ratio;
    }
    CornerLoss { value, grad }
}

/// GIoU loss of the box decoded from `t` against `anchor`, with the
/// gradient carried back through the decoding to the deltas.
pub fn giou_loss_deltas(t: &DeltaVec, target: &BBox, anchor: &BBox, clamp: f64) -> LossValue {
    let pred = decode_deltas(t, anchor, clamp);
    let corner = giou_loss(&pred, target);
    let [g_x1, g_y1, g_x2, g_y2] = corner.grad;
    let (aw, ah) = (anchor.width(), anchor.height());
    let w_live = if t.dw.abs() < clamp { pred.width() } else { 0.0 };
    let h_live = if t.dh.abs() < clamp { pred.height() } else { 0.0 };
    let grad = DeltaVec {
        dx: (g_x1 + g_x2) * aw,
        dy: (g_y1 + g_y2) * ah,
        dw: 0.5 * (g_x2 - g_x1) * w_live,
        dh: 0.5 * (g_y2 - g_y1) * h_live,
    };
    LossValue {
        value: corner.value,
        grad_p: Vec::new(),
        grad_t: vec![grad],
    }
}

/// Inputs of the supervised detection loss, aligned per sample.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedBatch<'a> {
    pub p: &'a [f64],
    pub labels: &'a [u8],
    pub t: &'a [DeltaVec],
    /// Regression targets; entries for negatives are ignored.
    pub t_star: &'a [DeltaVec],
    /// Reference anchors, needed only for GIoU regression.
    pub anchors: &'a [BBox],
}

/// Classification cross-entropy averaged over all samples plus regression
/// averaged over positives, weighted by `lambda1` and `lambda2`. With no
/// positives the regression term is zero.
pub fn supervised_loss(batch: &SupervisedBatch<'_>, cfg: &LossConfig) -> Result<LossValue> {
    let n = batch.p.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if batch.labels.len() != n || batch.t.len() != n || batch.t_star.len() != n {
        return Err(Error::Shape {
            op: "supervised_loss",
            detail: format!(
                "p {}, labels {}, t {}, t_star {}",
                n,
                batch.labels.len(),
                batch.t.len(),
                batch.t_star.len()
            ),
        });
    }
    if cfg.reg_kind == RegressionKind::Giou && batch.anchors.len() != n {
        return Err(Error::Shape {
            op: "supervised_loss",
            detail: format!("GIoU needs {n} anchors, got {}", batch.anchors.len()),
        });
    }

    let cls_scale = cfg.lambda1 / n as f64;
    let mut value_cls = 0.0;
    let mut grad_p = vec![0.0; n];
    for i in 0..n {
        let l = bce(batch.p[i], batch.labels[i]);
        value_cls += l.value;
        grad_p[i] = cls_scale * l.grad_p[0];
    }

    let n_reg = batch.labels.iter().filter(|&&y| y == 1).count();
    let mut grad_t = vec![DeltaVec::ZERO; n];
    let mut value_reg = 0.0;
    if n_reg > 0 {
        let reg_scale = cfg.lambda2 / n_reg as f64;
        for i in (0..n).filter(|&i| batch.labels[i] == 1) {
            let l = match cfg.reg_kind {
                RegressionKind::SmoothL1 => smooth_l1(&batch.t[i], &batch.t_star[i], cfg.smooth_l1_beta),
                RegressionKind::Giou => {
                    let anchor = &batch.anchors[i];
                    let target = decode_deltas(&batch.t_star[i], anchor, f64::INFINITY);
                    giou_loss_deltas(&batch.t[i], &target, anchor, DEFAULT_DELTA_CLAMP)
                }
            };
            value_reg += l.value;
            let g = l.grad_t[0];
            grad_t[i] = DeltaVec::new(
                reg_scale * g.dx,
                reg_scale * g.dy,
                reg_scale * g.dw,
                reg_scale * g.dh,
            );
        }
        value_reg *= reg_scale;
    }

    Ok(LossValue {
        value: cls_scale * value_cls + value_reg,
        grad_p,
        grad_t,
    })
}

/// Modulating weight of the weighted entropy. Strict inequalities: a
/// probability equal to either threshold gets weight zero.
pub fn we_weight(p: f64, cfg: &LossConfig) -> f64 {
    if p < cfg.tau1 {
        (1.0 - cfg.alpha) * p.powf(cfg.gamma)
    } else if p > cfg.tau2 {
        cfg.alpha * (1.0 - p).powf(cfg.gamma)
    } else {
        0.0
    }
}

/// `d/dx x^gamma`, taken as zero at `x = 0` when the true derivative blows up.
fn pow_slope(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    let s = gamma * x.powf(gamma - 1.0);
    if s.is_finite() {
        s
    } else {
        0.0
    }
}

/// Per-sample weighted entropy term and its derivative in `p`.
fn we_term(p: f64, cfg: &LossConfig) -> (f64, f64) {
    let (weight, d_weight) = if p < cfg.tau1 {
        ((1.0 - cfg.alpha) * p.powf(cfg.gamma), (1.0 - cfg.alpha) * pow_slope(p, cfg.gamma))
    } else if p > cfg.tau2 {
        let q = 1.0 - p;
        (cfg.alpha * q.powf(cfg.gamma), -cfg.alpha * pow_slope(q, cfg.gamma))
    } else {
        return (0.0, 0.0);
    };
    let pc = clamp_prob(p);
    let entropy = -p * pc.ln();
    let d_entropy = if pc == p { -pc.ln() - 1.0 } else { -pc.ln() };
    let d_weight_term = if entropy == 0.0 { 0.0 } else { d_weight * entropy };
    (weight * entropy, d_weight_term + weight * d_entropy)
}

/// Mean weighted entropy over `all_p`; zero with an empty gradient for an
/// empty input.
pub fn weighted_entropy_loss(all_p: &[f64], cfg: &LossConfig) -> LossValue {
    if all_p.is_empty() {
        return LossValue::zero();
    }
    let scale = 1.0 / all_p.len() as f64;
    let mut value = 0.0;
    let grad_p = all_p
        .iter()
        .map(|&p| {
            let (v, g) = we_term(p, cfg);
            value += v;
            scale * g
        })
        .collect();
    LossValue {
        value: scale * value,
        grad_p,
        grad_t: Vec::new(),
    }
}

/// `eta * sup + unsup`. Gradient arrays of different lengths are combined
/// as if the shorter one were zero-padded.
pub fn total_loss(sup: &LossValue, unsup: &LossValue, cfg: &LossConfig) -> LossValue {
    let eta = cfg.eta;
    let np = sup.grad_p.len().max(unsup.grad_p.len());
    let grad_p = (0..np)
        .map(|i| {
            eta * sup.grad_p.get(i).copied().unwrap_or(0.0) + unsup.grad_p.get(i).copied().unwrap_or(0.0)
        })
        .collect();
    let nt = sup.grad_t.len().max(unsup.grad_t.len());
    let grad_t = (0..nt)
        .map(|i| {
            let s = sup.grad_t.get(i).copied().unwrap_or_default();
            let u = unsup.grad_t.get(i).copied().unwrap_or_default();
            DeltaVec::new(
                eta * s.dx + u.dx,
                eta * s.dy + u.dy,
                eta * s.dw + u.dw,
                eta * s.dh + u.dh,
            )
        })
        .collect();
    LossValue {
        value: eta * sup.value + unsup.value,
        grad_p,
        grad_t,
    }
}
