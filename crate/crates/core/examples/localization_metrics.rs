//! Score hand-written predictions with the single- and multi-box
//! localization metrics.
//!
//! cargo run --example localization_metrics

use wend::evaluation::{evaluate, GroundTruth, PredictionRecord};
use wend::geometry::{BBox, ScoredBox};

fn main() -> wend::Result<()> {
    let gt_a = [BBox::new(10.0, 10.0, 30.0, 30.0)?];
    let gt_b = [BBox::new(0.0, 0.0, 16.0, 16.0)?, BBox::new(40.0, 40.0, 60.0, 60.0)?];
    let gts = [
        GroundTruth { id: "a", boxes: &gt_a, class: 2 },
        GroundTruth { id: "b", boxes: &gt_b, class: 0 },
    ];
    let preds = vec![
        // right class, right top box
        PredictionRecord {
            id: "a".into(),
            boxes: vec![ScoredBox::new(BBox::new(11.0, 9.0, 31.0, 29.0)?, 0.9)],
            class_scores: vec![0.1, 0.2, 0.7],
        },
        // the top box misses; the third one finds the second object
        PredictionRecord {
            id: "b".into(),
            boxes: vec![
                ScoredBox::new(BBox::new(20.0, 20.0, 30.0, 30.0)?, 0.8),
                ScoredBox::new(BBox::new(0.0, 30.0, 10.0, 40.0)?, 0.6),
                ScoredBox::new(BBox::new(41.0, 42.0, 60.0, 61.0)?, 0.5),
            ],
            class_scores: vec![0.3, 0.5, 0.2],
        },
    ];
    for k in [1, 3] {
        let m = evaluate(&gts, &preds, k)?;
        println!(
            "k={k}: top1 {:.0}  top5 {:.0}/{:.0}  gt-known {:.0}/{:.0}",
            m.top1_loc, m.top5_loc_single, m.top5_loc_multi, m.gtknown_single, m.gtknown_multi
        );
    }
    Ok(())
}
