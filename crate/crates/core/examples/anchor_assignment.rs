//! Lay anchors over an image, label them against pseudo boxes and draw a
//! balanced training minibatch.
//!
//! cargo run --example anchor_assignment

use wend::assignment::{assign_labels, generate_anchors, sample_minibatch, AnchorLabel, SampleRatio};
use wend::geometry::BBox;

fn main() -> wend::Result<()> {
    let anchors = generate_anchors((64, 64), 8, &[16.0, 32.0], &[0.5, 1.0, 2.0])?;
    println!("{} anchors on a {:?} grid", anchors.len(), anchors.grid());

    let pseudo = [BBox::new(4.0, 6.0, 30.0, 28.0)?, BBox::new(40.0, 36.0, 50.0, 60.0)?];
    let a = assign_labels(&anchors, &pseudo, 0.7, 0.3)?;
    println!(
        "positive {}  negative {}  ignored {}  forced {}",
        a.count(AnchorLabel::Positive),
        a.count(AnchorLabel::Negative),
        a.count(AnchorLabel::Ignore),
        a.forced.iter().filter(|&&f| f).count()
    );
    for i in a.positives() {
        println!(
            "  anchor {i:>3} {:?} -> box {} (iou {:.2})",
            anchors.anchors()[i].to_array(),
            a.matched_gt[i].unwrap(),
            a.max_iou[i]
        );
    }

    let batch = sample_minibatch(&a, &anchors, &pseudo, 64, SampleRatio::new(1, 3)?, 7)?;
    println!("minibatch: {} positives, {} negatives", batch.pos_count, batch.neg_count);
    Ok(())
}
