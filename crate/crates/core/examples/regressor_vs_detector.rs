//! Why a single-box regressor falls short on scenes with several objects:
//! train both models on 2-3 object scenes and compare GT-known accuracy.
//!
//! cargo run --release --example regressor_vs_detector

use wend::harness::{train_samples, ModelKind, RunConfig};
use wend::synthdata::{generate_split, NoiseModel, Split};

fn main() -> wend::Result<()> {
    let mut base = RunConfig::default();
    base.data.train_count = 400;
    base.data.test_count = 200;
    base.data.scene.min_objects = 2;
    base.data.scene.max_objects = 3;
    base.data.noise = NoiseModel::NONE;
    base.optim.epochs = 5;
    let train = generate_split(&base.data, Split::Train)?;
    let test = generate_split(&base.data, Split::Test)?;

    for model in [ModelKind::Scr, ModelKind::Bcd] {
        let mut cfg = RunConfig { model, ..base.clone() };
        if model == ModelKind::Scr {
            cfg.optim.base_lr = 0.1;
        }
        let (_, rec) = train_samples(&cfg, &train, &test)?;
        let m = rec.final_metrics;
        println!(
            "{model:<4} gt-known: top box {:.1}, top {} boxes {:.1}",
            m.gtknown_single, cfg.eval.max_outputs, m.gtknown_multi
        );
    }
    Ok(())
}
