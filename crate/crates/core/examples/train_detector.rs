//! Train the detector on a small synthetic split and report GT-known
//! accuracy on held-out scenes.
//!
//! cargo run --release --example train_detector

use std::time::Instant;

use wend::autodiff::OptimizerState;
use wend::detector::{BcdModel, DetectorConfig};
use wend::evaluation::{evaluate, GroundTruth, PredictionRecord};
use wend::geometry::BBox;
use wend::losses::LossConfig;
use wend::synthdata::{generate_split, DataConfig, Split};

fn main() -> wend::Result<()> {
    let data = DataConfig {
        train_count: 400,
        test_count: 100,
        ..DataConfig::default()
    };
    let train = generate_split(&data, Split::Train)?;
    let test = generate_split(&data, Split::Test)?;
    let mut model = BcdModel::new(DetectorConfig::default(), LossConfig::default(), 0)?;
    let epochs = 6;
    let mut opt = OptimizerState::new(model.params(), 0.004, epochs);
    let pseudo: Vec<Vec<BBox>> = train.iter().map(|s| s.pseudo_boxes()).collect();

    for epoch in 0..epochs {
        opt.epoch = epoch;
        let lr = opt.current_lr()?;
        let start = Instant::now();
        let mut total = 0.0;
        for (step, chunk) in train.chunks(8).enumerate() {
            let batch: Vec<_> = chunk
                .iter()
                .zip(&pseudo[step * 8..])
                .map(|(s, p)| (&s.image, p.as_slice()))
                .collect();
            total += model.train_step(&batch, (epoch * 1000 + step) as u64, &mut opt, lr)?.total;
        }
        let preds: Vec<PredictionRecord> = test
            .iter()
            .map(|s| {
                Ok(PredictionRecord {
                    id: s.id.clone(),
                    boxes: model.predict(&s.image, 0.0, 0.5, 5)?,
                    class_scores: s.class_scores.clone(),
                })
            })
            .collect::<wend::Result<_>>()?;
        let gts: Vec<GroundTruth> = test
            .iter()
            .map(|s| GroundTruth { id: &s.id, boxes: &s.gt_boxes, class: s.label() })
            .collect();
        let m = evaluate(&gts, &preds, 5)?;
        println!(
            "epoch {epoch}: loss {:.4}  gt-known k1 {:.1}  k5 {:.1}  ({:.1}s)",
            total / (train.len() / 8) as f64,
            m.gtknown_single,
            m.gtknown_multi,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
