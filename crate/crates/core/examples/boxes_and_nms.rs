//! Box overlap, delta coding and greedy suppression.
//!
//! cargo run --example boxes_and_nms

use wend::geometry::{clip_box, decode_deltas, encode_deltas, giou, iou, nms, BBox, ScoredBox, DEFAULT_DELTA_CLAMP};

fn main() -> wend::Result<()> {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0)?;
    let b = BBox::new(1.0, 1.0, 3.0, 3.0)?;
    println!("iou  {:.6}", iou(&a, &b));
    println!("giou {:.6}", giou(&a, &b));

    let anchor = BBox::new(0.0, 0.0, 10.0, 10.0)?;
    let target = BBox::new(0.0, 0.0, 20.0, 20.0)?;
    let d = encode_deltas(&target, &anchor);
    println!("deltas {:?}", d.to_array());
    println!("decoded {:?}", decode_deltas(&d, &anchor, DEFAULT_DELTA_CLAMP).to_array());

    println!("clipped {:?}", clip_box(&BBox::new(-5.0, -5.0, 3.0, 3.0)?, 64.0, 64.0).to_array());

    let candidates = [
        ScoredBox::new(BBox::new(0.0, 0.0, 10.0, 10.0)?, 0.9),
        ScoredBox::new(BBox::new(0.0, 0.0, 10.0, 6.0)?, 0.8),
        ScoredBox::new(BBox::new(20.0, 20.0, 30.0, 30.0)?, 0.7),
    ];
    for kept in nms(&candidates, 0.5) {
        println!("kept {:?} score {}", kept.bbox.to_array(), kept.score);
    }
    Ok(())
}
