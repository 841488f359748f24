//! The supervised and weighted-entropy losses on hand-picked inputs, and
//! how the entropy weight varies with the classifier probability.
//!
//! cargo run --example loss_terms

use wend::geometry::DeltaVec;
use wend::losses::{supervised_loss, total_loss, we_weight, weighted_entropy_loss, LossConfig, SupervisedBatch};

fn main() -> wend::Result<()> {
    let cfg = LossConfig::default();
    let p = [0.8, 0.2];
    let labels = [1, 0];
    let t = [DeltaVec::new(0.1, 0.0, 0.2, -0.1), DeltaVec::ZERO];
    let t_star = [DeltaVec::new(0.0, 0.0, 0.0, 0.0), DeltaVec::ZERO];
    let batch = SupervisedBatch {
        p: &p,
        labels: &labels,
        t: &t,
        t_star: &t_star,
        anchors: &[],
    };
    let sup = supervised_loss(&batch, &cfg)?;
    let unsup = weighted_entropy_loss(&p, &cfg);
    let total = total_loss(&sup, &unsup, &cfg);
    println!("supervised {:.6}  entropy {:.3e}  total {:.6}", sup.value, unsup.value, total.value);
    println!("d total / d p = {:?}", total.grad_p);

    println!("\n   p    weight (gamma 6, alpha 0.1, tau 0.3)");
    for p in [0.01, 0.1, 0.2, 0.29, 0.3, 0.31, 0.5, 0.7, 0.9, 0.99] {
        println!("{p:>5}  {:.3e}", we_weight(p, &cfg));
    }
    let broad = LossConfig::large_scale();
    println!("\nlarge-scale settings at p = 0.5: {:.3e}", we_weight(0.5, &broad));
    Ok(())
}
