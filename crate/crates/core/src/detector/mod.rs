//! Toy binary-class detector and the single-box regression baseline.
//!
//! Both models share the same backbone family: a stack of 3x3 stride-2
//! convolutions with ReLU. The detector attaches 1x1 heads per feature cell
//! (foreground probability, box deltas and, optionally, localization
//! quality); the baseline pools the feature map and regresses exactly one
//! box per image.

mod bcd;
mod scr;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use bcd::{BcdModel, DetectorOutput, StepLosses};
pub use scr::ScrModel;

use crate::assignment::{SampleRatio, DEFAULT_BATCH_SIZE, DEFAULT_BG_THRESH, DEFAULT_FG_THRESH};
use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QualityKind {
    Iou,
    Centerness,
}

impl fmt::Display for QualityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityKind::Iou => "iou",
            QualityKind::Centerness => "centerness",
        })
    }
}

impl FromStr for QualityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(QualityKind::Iou),
            "centerness" => Ok(QualityKind::Centerness),
            other => Err(Error::invalid("quality", format!("unknown kind `{other}`"))),
        }
    }
}

/// Architecture and label-assignment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub image_size: (usize, usize),
    pub channels: usize,
    /// Output channels of each stride-2 conv block.
    pub widths: Vec<usize>,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub quality: Option<QualityKind>,
    /// Learning-rate multiplier for head parameters.
    pub head_lr_mult: f64,
    pub fg_thresh: f64,
    pub bg_thresh: f64,
    /// Anchors sampled per image for the supervised loss.
    pub sample_size: usize,
    pub sample_ratio: SampleRatio,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            channels: 1,
            widths: vec![16, 32, 64, 64],
            anchor_scales: vec![24.0],
            anchor_ratios: vec![1.0],
            quality: None,
            head_lr_mult: 2.0,
            fg_thresh: DEFAULT_FG_THRESH,
            bg_thresh: DEFAULT_BG_THRESH,
            sample_size: DEFAULT_BATCH_SIZE,
            sample_ratio: SampleRatio::default(),
        }
    }
}

impl DetectorConfig {
    /// Total downsampling of the backbone, which is also the anchor stride.
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("bad backbone widths {:?}", self.widths)));
        }
        let s = self.stride();
        let (w, h) = self.image_size;
        if w == 0 || h == 0 || w % s != 0 || h % s != 0 {
            return Err(Error::Config(format!(
                "image size {w}x{h} not divisible by backbone stride {s}"
            )));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config(format!("channels {} not in {{1, 3}}", self.channels)));
        }
        if !(self.fg_thresh >= self.bg_thresh) {
            return Err(Error::Config(format!(
                "fg_thresh {} < bg_thresh {}",
                self.fg_thresh, self.bg_thresh
            )));
        }
        if self.sample_size < 2 {
            return Err(Error::Config(format!("sample size {} < 2", self.sample_size)));
        }
        if !(self.head_lr_mult > 0.0) {
            return Err(Error::Config(format!("head lr multiplier {}", self.head_lr_mult)));
        }
        Ok(())
    }
}

/// Stack images into an `[N, C, H, W]` tensor.
pub fn images_to_tensor(images: &[&Image], cfg: &DetectorConfig) -> Result<Tensor> {
    let (w, h) = cfg.image_size;
    let mut data = Vec::with_capacity(images.len() * cfg.channels * w * h);
    for img in images {
        if img.width() != w || img.height() != h || img.channels() != cfg.channels {
            return Err(Error::Shape {
                op: "detector input",
                detail: format!(
                    "image {}x{}x{} but model expects {w}x{h}x{}",
                    img.width(),
                    img.height(),
                    img.channels(),
                    cfg.channels
                ),
            });
        }
        data.extend(img.to_planar());
    }
    Tensor::from_vec(&[images.len(), cfg.channels, h, w], data)
}

fn normal_tensor<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("consistent shape")
}

fn filled_tensor(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, vec![v; n]).expect("consistent shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        shape: [usize; 4],
        std: f64,
        bias: f64,
        lr_mult: f64,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), normal_tensor(&shape, std, rng), lr_mult, true);
        let bias = params.add(format!("{name}.bias"), filled_tensor(&[shape[0]], bias), lr_mult, false);
        Self { weight, bias }
    }

    fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.conv2d(x, w, Some(b), stride, pad)
    }
}

/// 3x3 stride-2 conv + ReLU blocks.
#[derive(Clone, Debug, PartialEq)]
struct Backbone {
    layers: Vec<ConvLayer>,
}

impl Backbone {
    fn new<R: Rng>(params: &mut ParamSet, cfg: &DetectorConfig, rng: &mut R) -> Self {
        let mut in_c = cfg.channels;
        let layers = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &out_c)| {
                let fan_in = (in_c * 9) as f64;
                let layer = ConvLayer::new(
                    params,
                    &format!("backbone.{i}"),
                    [out_c, in_c, 3, 3],
                    (2.0 / fan_in).sqrt(),
                    0.0,
                    1.0,
                    rng,
                );
                in_c = out_c;
                layer
            })
            .collect();
        Self { layers }
    }

    fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let z = layer.apply(tape, params, h, 2, 1)?;
            h = tape.relu(z);
        }
        Ok(h)
    }
}

/// Soft target for the localization-quality head of a positive anchor.
///
/// `Iou` scores the decoded prediction against the matched box;
/// `Centerness` scores where the anchor center sits inside the matched box
/// and is zero on or outside its border.
pub fn quality_target(anchor: &BBox, predicted: &BBox, matched_gt: &BBox, kind: QualityKind) -> f64 {
    match kind {
        QualityKind::Iou => iou(predicted, matched_gt),
        QualityKind::Centerness => {
            let (cx, cy) = anchor.center();
            let l = cx - matched_gt.x1();
            let r = matched_gt.x2() - cx;
            let t = cy - matched_gt.y1();
            let b = matched_gt.y2() - cy;
            if l <= 0.0 || r <= 0.0 || t <= 0.0 || b <= 0.0 {
                return 0.0;
            }
            ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn centerness_examples() {
        let gt = b(0., 0., 40., 20.);
        let centered = BBox::from_center(20., 10., 8., 8.).unwrap();
        assert_relative_eq!(quality_target(&centered, &centered, &gt, QualityKind::Centerness), 1.0);
        let on_edge = BBox::from_center(0., 10., 8., 8.).unwrap();
        assert_eq!(quality_target(&on_edge, &on_edge, &gt, QualityKind::Centerness), 0.0);
        let outside = BBox::from_center(-5., 10., 8., 8.).unwrap();
        assert_eq!(quality_target(&outside, &outside, &gt, QualityKind::Centerness), 0.0);
        let quarter = BBox::from_center(10., 10., 8., 8.).unwrap();
        assert_relative_eq!(
            quality_target(&quarter, &quarter, &gt, QualityKind::Centerness),
            0.577_350_269_189_625_8,
            max_relative = 1e-12
        );
    }

    #[test]
    fn iou_quality_uses_prediction() {
        let gt = b(0., 0., 2., 2.);
        let anchor = b(10., 10., 12., 12.);
        let pred = b(1., 1., 3., 3.);
        assert_relative_eq!(quality_target(&anchor, &pred, &gt, QualityKind::Iou), 1.0 / 7.0);
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        assert_eq!(DetectorConfig::default().stride(), 16);
        let bad = DetectorConfig {
            image_size: (72, 64),
            ..DetectorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let img = Image::filled(32, 32, 1, 0);
        assert!(images_to_tensor(&[&img], &DetectorConfig::default()).is_err());
    }
}
