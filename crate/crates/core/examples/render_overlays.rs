//! Generate data, train briefly, and draw predicted (grey) and true
//! (white) boxes onto the test images.
//!
//! cargo run --release --example render_overlays -- /tmp/wend-overlays

use std::path::PathBuf;

use wend::harness::{cmd_gen_data, cmd_render_overlays, cmd_train, files, RunConfig};
use wend::synthdata::{manifest_path, Split};

fn main() -> wend::Result<()> {
    let root = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("wend-overlays"), PathBuf::from);
    let mut cfg = RunConfig::default();
    cfg.data_dir = root.join("data");
    cfg.out_dir = root.join("run");
    cfg.data.train_count = 200;
    cfg.data.test_count = 16;
    cfg.optim.epochs = 3;
    cmd_gen_data(&cfg)?;
    let rec = cmd_train(&cfg)?;
    println!("gt-known after training: {:.1}", rec.final_metrics.gtknown_single);
    let n = cmd_render_overlays(
        &manifest_path(&cfg.data_dir, Split::Test),
        &cfg.out_dir.join(files::PREDICTIONS),
        &root.join("overlays"),
    )?;
    println!("{n} overlays in {}", root.join("overlays").display());
    Ok(())
}
