//! Sweep the loss balance on an in-memory dataset and print the
//! per-epoch GT-known curves.
//!
//! cargo run --release --example eta_sweep

use wend::harness::{sweep_samples, RunConfig, SweepAxis};
use wend::synthdata::{generate_split, Split};

fn main() -> wend::Result<()> {
    let mut base = RunConfig::default();
    base.data.train_count = 200;
    base.data.test_count = 100;
    base.optim.epochs = 4;
    base.out_dir = std::env::temp_dir().join(format!("wend-eta-sweep-{}", std::process::id()));
    let train = generate_split(&base.data, Split::Train)?;
    let test = generate_split(&base.data, Split::Test)?;

    let values: Vec<String> = ["1", "0.25", "0.0625"].iter().map(|s| s.to_string()).collect();
    for run in sweep_samples(&base, SweepAxis::Eta, &values, &[0], &train, &test)? {
        let rec = run.outcome.map_err(wend::Error::Config)?;
        let curve: Vec<String> = rec.epochs.iter().map(|e| format!("{:.1}", e.gtknown_single)).collect();
        println!("eta {:>6}: {}", run.value, curve.join(" -> "));
    }
    println!("tables in {}", base.out_dir.display());
    Ok(())
}
