//! Anchor generation, IoU-threshold label assignment and minibatch sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, BBox, DeltaVec};

pub const DEFAULT_FG_THRESH: f64 = 0.7;
pub const DEFAULT_BG_THRESH: f64 = 0.3;
pub const DEFAULT_BATCH_SIZE: usize = 256;

/// Dense grid of reference boxes tiled over the image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<BBox>,
    stride: usize,
    scales: Vec<f64>,
    aspect_ratios: Vec<f64>,
    image_size: (usize, usize),
}

impl AnchorSet {
    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }
    pub fn len(&self) -> usize {
        self.anchors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
    pub fn aspect_ratios(&self) -> &[f64] {
        &self.aspect_ratios
    }
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }
    /// Feature-grid size `(width, height)` in cells.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.stride, self.image_size.1 / self.stride)
    }
    pub fn per_location(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// Tile anchors over the image. Order is row-major over grid cells, then
/// scale, then aspect ratio. `aspect_ratio` is width / height and every
/// anchor of scale `s` has area `s * s`. Anchors are not clipped.
pub fn generate_anchors(
    image_size: (usize, usize),
    stride: usize,
    scales: &[f64],
    aspect_ratios: &[f64],
) -> Result<AnchorSet> {
    let (width, height) = image_size;
    if stride == 0 || width == 0 || height == 0 || width % stride != 0 || height % stride != 0 {
        return Err(Error::invalid(
            "stride",
            format!("stride {stride} must divide image size {width}x{height}"),
        ));
    }
    if scales.is_empty() || aspect_ratios.is_empty() {
        return Err(Error::invalid("scales", "scales and aspect ratios must be non-empty"));
    }
    if scales.iter().chain(aspect_ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid("scales", "scales and ratios must be positive"));
    }

    let (gw, gh) = (width / stride, height / stride);
    let s = stride as f64;
    let mut anchors = Vec::with_capacity(gw * gh * scales.len() * aspect_ratios.len());
    for gy in 0..gh {
        for gx in 0..gw {
            let cx = (gx as f64 + 0.5) * s;
            let cy = (gy as f64 + 0.5) * s;
            for &scale in scales {
                for &ratio in aspect_ratios {
                    let root = ratio.sqrt();
                    anchors.push(BBox::from_center(cx, cy, scale * root, scale / root)?);
                }
            }
        }
    }
    Ok(AnchorSet {
        anchors,
        stride,
        scales: scales.to_vec(),
        aspect_ratios: aspect_ratios.to_vec(),
        image_size,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    /// Pseudo-box index an anchor regresses to; `Some` exactly for positives.
    pub matched_gt: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
    /// Positives created by the best-match rule rather than the threshold.
    pub forced: Vec<bool>,
}

impl AssignmentResult {
    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == AnchorLabel::Positive)
            .map(|(i, _)| i)
    }
}

pub fn assign_labels(
    anchors: &AnchorSet,
    pseudo_boxes: &[BBox],
    fg_thresh: f64,
    bg_thresh: f64,
) -> Result<AssignmentResult> {
    let ious: Vec<Vec<f64>> = anchors
        .anchors()
        .iter()
        .map(|a| pseudo_boxes.iter().map(|g| iou(a, g)).collect())
        .collect();
    assign_from_ious(&ious, pseudo_boxes.len(), fg_thresh, bg_thresh)
}

/// Label assignment over a precomputed `anchors x boxes` IoU matrix.
///
/// Threshold rule first: max IoU `>= fg_thresh` is positive, `< bg_thresh`
/// negative, otherwise ignored. Then every box that owns no positive gets
/// its highest-IoU anchor forced positive. A forced match skips anchors
/// that are already the sole positive of another box and takes the next
/// best one; only when no such anchor exists does it take the overall best.
pub fn assign_from_ious(
    ious: &[Vec<f64>],
    num_boxes: usize,
    fg_thresh: f64,
    bg_thresh: f64,
) -> Result<AssignmentResult> {
    if !(fg_thresh >= bg_thresh) {
        return Err(Error::invalid(
            "fg_thresh",
            format!("fg_thresh {fg_thresh} must be >= bg_thresh {bg_thresh}"),
        ));
    }
    if let Some(row) = ious.iter().find(|r| r.len() != num_boxes) {
        return Err(Error::Shape {
            op: "assign_from_ious",
            detail: format!("row has {} entries for {num_boxes} boxes", row.len()),
        });
    }

    let n = ious.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched_gt = vec![None; n];
    let mut max_iou = vec![0.0; n];
    let mut forced = vec![false; n];
    if num_boxes == 0 {
        return Ok(AssignmentResult {
            labels,
            matched_gt,
            max_iou,
            forced,
        });
    }

    let mut owned = vec![0usize; num_boxes];
    for (i, row) in ious.iter().enumerate() {
        let (best_j, best) = argmax(row.iter().copied());
        max_iou[i] = best;
        labels[i] = if best >= fg_thresh {
            matched_gt[i] = Some(best_j);
            owned[best_j] += 1;
            AnchorLabel::Positive
        } else if best < bg_thresh {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }

    for j in 0..num_boxes {
        if owned[j] > 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| ious[b][j].total_cmp(&ious[a][j]).then(a.cmp(&b)));
        let available = |i: usize| {
            !forced[i] && matched_gt[i].map_or(true, |k: usize| owned[k] > 1) && ious[i][j] > 0.0
        };
        let Some(pick) = order.iter().copied().find(|&i| available(i)).or(order.first().copied())
        else {
            break;
        };
        if let Some(k) = matched_gt[pick] {
            owned[k] -= 1;
        }
        labels[pick] = AnchorLabel::Positive;
        matched_gt[pick] = Some(j);
        forced[pick] = true;
        owned[j] += 1;
    }

    Ok(AssignmentResult {
        labels,
        matched_gt,
        max_iou,
        forced,
    })
}

/// First maximum wins on ties.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Positive-to-negative sampling ratio, e.g. `1:4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRatio {
    pub pos: u32,
    pub neg: u32,
}

impl SampleRatio {
    pub fn new(pos: u32, neg: u32) -> Result<Self> {
        if pos == 0 || neg == 0 {
            return Err(Error::invalid("ratio", format!("{pos}:{neg} needs both parts >= 1")));
        }
        Ok(Self { pos, neg })
    }
}

impl Default for SampleRatio {
    fn default() -> Self {
        Self { pos: 1, neg: 4 }
    }
}

impl std::fmt::Display for SampleRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.pos, self.neg)
    }
}

impl std::str::FromStr for SampleRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("ratio", format!("expected POS:NEG, got `{s}`"));
        let (p, n) = s.split_once(':').ok_or_else(bad)?;
        let pos = p.trim().parse().map_err(|_| bad())?;
        let neg = n.trim().parse().map_err(|_| bad())?;
        SampleRatio::new(pos, neg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// Sampled anchor indices, positives first.
    pub indices: Vec<usize>,
    pub target_labels: Vec<u8>,
    /// Regression targets, `Some` for positives.
    pub target_deltas: Vec<Option<DeltaVec>>,
    pub matched_gt: Vec<Option<usize>>,
    pub pos_count: usize,
    pub neg_count: usize,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draw a training minibatch.
///
/// The positive quota is `floor(batch_size * pos / (pos + neg))`; positives
/// are drawn uniformly up to the quota and negatives fill the remainder.
/// The realized ratio is exact whenever both kinds are plentiful and
/// `batch_size` is a multiple of `pos + neg`.
pub fn sample_minibatch(
    assignment: &AssignmentResult,
    anchors: &AnchorSet,
    pseudo_boxes: &[BBox],
    batch_size: usize,
    ratio: SampleRatio,
    seed: u64,
) -> Result<SampleBatch> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size", format!("{batch_size} < 2")));
    }
    if assignment.labels.len() != anchors.len() {
        return Err(Error::Shape {
            op: "sample_minibatch",
            detail: format!(
                "{} labels for {} anchors",
                assignment.labels.len(),
                anchors.len()
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut positives: Vec<usize> = assignment.positives().collect();
    let mut negatives: Vec<usize> = (0..anchors.len())
        .filter(|&i| assignment.labels[i] == AnchorLabel::Negative)
        .collect();
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let quota = batch_size * ratio.pos as usize / (ratio.pos + ratio.neg) as usize;
    let pos_count = quota.min(positives.len());
    let neg_count = (batch_size - pos_count).min(negatives.len());
    let (pos_pick, _) = positives.partial_shuffle(&mut rng, pos_count);
    let pos_pick = pos_pick.to_vec();
    let (neg_pick, _) = negatives.partial_shuffle(&mut rng, neg_count);

    let mut batch = SampleBatch {
        indices: Vec::with_capacity(pos_count + neg_count),
        target_labels: Vec::with_capacity(pos_count + neg_count),
        target_deltas: Vec::with_capacity(pos_count + neg_count),
        matched_gt: Vec::with_capacity(pos_count + neg_count),
        pos_count,
        neg_count,
    };
    for &i in &pos_pick {
        let gt = assignment.matched_gt[i].expect("positive anchor without a match");
        let target = pseudo_boxes.get(gt).ok_or_else(|| {
            Error::invalid("pseudo_boxes", format!("matched index {gt} out of range"))
        })?;
        batch.indices.push(i);
        batch.target_labels.push(1);
        batch.target_deltas.push(Some(encode_deltas(target, &anchors.anchors()[i])));
        batch.matched_gt.push(Some(gt));
    }
    for &i in neg_pick.iter() {
        batch.indices.push(i);
        batch.target_labels.push(0);
        batch.target_deltas.push(None);
        batch.matched_gt.push(None);
    }
    Ok(batch)
}
