//! Localization metrics over prediction records: GT-known, Top-1 and Top-5
//! localization accuracy, each with a single-box and a multi-box variant.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ScoredBox};
use crate::synthdata::ManifestRecord;

/// A prediction counts as correct above this IoU (strict).
pub const IOU_CORRECT: f64 = 0.5;

/// Predicted boxes and class scores for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    /// Sorted by descending score.
    pub boxes: Vec<ScoredBox>,
    pub class_scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    boxes: Vec<[f64; 5]>,
    class_scores: Vec<f64>,
}

impl Serialize for PredictionRecord {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawRecord {
            id: self.id.clone(),
            boxes: self
                .boxes
                .iter()
                .map(|b| {
                    let [x1, y1, x2, y2] = b.bbox.to_array();
                    [x1, y1, x2, y2, b.score]
                })
                .collect(),
            class_scores: self.class_scores.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PredictionRecord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawRecord::deserialize(d)?;
        let boxes = raw
            .boxes
            .iter()
            .map(|&[x1, y1, x2, y2, score]| {
                BBox::new(x1, y1, x2, y2)
                    .map(|b| ScoredBox::new(b, score))
                    .map_err(D::Error::custom)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if boxes.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(D::Error::custom("boxes are not sorted by descending score"));
        }
        Ok(PredictionRecord {
            id: raw.id,
            boxes,
            class_scores: raw.class_scores,
        })
    }
}

/// True iff `pred` overlaps some ground-truth box at IoU above 0.5.
pub fn box_correct(pred: &BBox, gt_boxes: &[BBox]) -> bool {
    gt_boxes.iter().any(|g| iou(pred, g) > IOU_CORRECT)
}

/// True iff one of the first `k` predicted boxes is correct.
pub fn gt_known_loc(pred: &PredictionRecord, gt_boxes: &[BBox], k: usize) -> bool {
    pred.boxes.iter().take(k).any(|b| box_correct(&b.bbox, gt_boxes))
}

/// Rank of `class` under descending scores, ties to the lower index.
fn class_rank(scores: &[f64], class: usize) -> Option<usize> {
    let s = *scores.get(class)?;
    Some(
        scores
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > s || (v == s && c < class))
            .count(),
    )
}

pub fn top1_loc(pred: &PredictionRecord, gt_boxes: &[BBox], gt_class: usize) -> bool {
    class_rank(&pred.class_scores, gt_class) == Some(0) && gt_known_loc(pred, gt_boxes, 1)
}

pub fn top5_loc(pred: &PredictionRecord, gt_boxes: &[BBox], gt_class: usize, k: usize) -> bool {
    matches!(class_rank(&pred.class_scores, gt_class), Some(r) if r < 5) && gt_known_loc(pred, gt_boxes, k)
}

/// Percentages over a dataset, each in `[0, 100]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub top1_loc: f64,
    pub top5_loc_single: f64,
    pub top5_loc_multi: f64,
    pub gtknown_single: f64,
    pub gtknown_multi: f64,
    pub count: usize,
}

/// Ground truth needed to score one image.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a> {
    pub id: &'a str,
    pub boxes: &'a [BBox],
    /// Image-level class.
    pub class: usize,
}

impl<'a> From<&'a ManifestRecord> for GroundTruth<'a> {
    fn from(r: &'a ManifestRecord) -> Self {
        GroundTruth {
            id: &r.id,
            boxes: &r.gt_boxes,
            class: r.gt_classes.first().copied().unwrap_or(0),
        }
    }
}

/// Score every ground-truth image against its prediction. `k_multi` is the
/// box budget of the multi-box variants.
pub fn evaluate(gts: &[GroundTruth<'_>], preds: &[PredictionRecord], k_multi: usize) -> Result<MetricsReport> {
    if k_multi == 0 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    let by_id: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut hits = [0usize; 5];
    for gt in gts {
        let p = by_id
            .get(gt.id)
            .ok_or_else(|| Error::MissingPrediction(gt.id.to_string()))?;
        let flags = [
            top1_loc(p, gt.boxes, gt.class),
            top5_loc(p, gt.boxes, gt.class, 1),
            top5_loc(p, gt.boxes, gt.class, k_multi),
            gt_known_loc(p, gt.boxes, 1),
            gt_known_loc(p, gt.boxes, k_multi),
        ];
        for (h, f) in hits.iter_mut().zip(flags) {
            *h += usize::from(f);
        }
    }
    let n = gts.len();
    let pct = |h: usize| if n == 0 { 0.0 } else { 100.0 * h as f64 / n as f64 };
    Ok(MetricsReport {
        top1_loc: pct(hits[0]),
        top5_loc_single: pct(hits[1]),
        top5_loc_multi: pct(hits[2]),
        gtknown_single: pct(hits[3]),
        gtknown_multi: pct(hits[4]),
        count: n,
    })
}

pub fn evaluate_dataset(manifest: &[ManifestRecord], preds: &[PredictionRecord], k_multi: usize) -> Result<MetricsReport> {
    let gts: Vec<GroundTruth<'_>> = manifest.iter().map(GroundTruth::from).collect();
    evaluate(&gts, preds, k_multi)
}

impl MetricsReport {
    /// `metric,value,count` rows for the single-box and `k_multi` variants.
    pub fn to_csv(&self, k_multi: usize) -> String {
        let mut s = String::from("metric,value,count\n");
        let mut row = |name: String, v: f64| s.push_str(&format!("{name},{v:.4},{}\n", self.count));
        row("top1_loc".into(), self.top1_loc);
        row("top5_loc_k1".into(), self.top5_loc_single);
        row("gtknown_k1".into(), self.gtknown_single);
        if k_multi != 1 {
            row(format!("top5_loc_k{k_multi}"), self.top5_loc_multi);
            row(format!("gtknown_k{k_multi}"), self.gtknown_multi);
        }
        s
    }
}

/// Metrics CSV with Top-5 and GT-known rows for every `k` in `ks`.
pub fn metrics_csv(gts: &[GroundTruth<'_>], preds: &[PredictionRecord], ks: &[usize]) -> Result<String> {
    let base = evaluate(gts, preds, 1)?;
    let mut s = String::from("metric,value,count\n");
    s.push_str(&format!("top1_loc,{:.4},{}\n", base.top1_loc, base.count));
    for &k in ks {
        let r = evaluate(gts, preds, k)?;
        s.push_str(&format!("top5_loc_k{k},{:.4},{}\n", r.top5_loc_multi, r.count));
        s.push_str(&format!("gtknown_k{k},{:.4},{}\n", r.gtknown_multi, r.count));
    }
    Ok(s)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(p).expect("prediction records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
