//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls the code under test to compute an expected value.
#![allow(dead_code)]

pub mod grad;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wend::evaluation::PredictionRecord;
use wend::geometry::{BBox, ScoredBox};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Integer corners `[x1, y1, x2, y2]` with positive extent inside `[0, max]`.
pub fn int_corners(rng: &mut impl Rng, max: i64) -> [i64; 4] {
    let x1 = rng.gen_range(0..max);
    let y1 = rng.gen_range(0..max);
    let x2 = rng.gen_range(x1 + 1..=max);
    let y2 = rng.gen_range(y1 + 1..=max);
    [x1, y1, x2, y2]
}

pub fn to_bbox(c: [i64; 4]) -> BBox {
    BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64).unwrap()
}

pub fn int_box(rng: &mut impl Rng, max: i64) -> BBox {
    to_bbox(int_corners(rng, max))
}

/// A box near `base`, each corner moved by at most `spread` whole pixels.
pub fn int_box_near(rng: &mut impl Rng, base: &BBox, spread: i64, max: i64) -> BBox {
    let mut c = [base.x1() as i64, base.y1() as i64, base.x2() as i64, base.y2() as i64];
    for v in &mut c {
        *v = (*v + rng.gen_range(-spread..=spread)).clamp(0, max);
    }
    if c[2] <= c[0] {
        c[2] = (c[0] + 1).min(max);
        c[0] = c[2] - 1;
    }
    if c[3] <= c[1] {
        c[3] = (c[1] + 1).min(max);
        c[1] = c[3] - 1;
    }
    to_bbox(c)
}

fn as_int(b: &BBox) -> [i64; 4] {
    let c = b.to_array().map(|v| v as i64);
    assert_eq!(c.map(|v| v as f64), b.to_array(), "raster oracle needs integer corners");
    c
}

fn covers(c: &[i64; 4], x: i64, y: i64) -> bool {
    x >= c[0] && x < c[2] && y >= c[1] && y < c[3]
}

/// IoU by counting unit pixels covered by each box.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (as_int(a), as_int(b));
    let lo_x = ca[0].min(cb[0]);
    let lo_y = ca[1].min(cb[1]);
    let hi_x = ca[2].max(cb[2]);
    let hi_y = ca[3].max(cb[3]);
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (ia, ib) = (covers(&ca, x, y), covers(&cb, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

/// Greedy suppression by repeated selection of the best survivor.
pub fn nms_oracle(cands: &[ScoredBox], thresh: f64) -> Vec<ScoredBox> {
    let mut alive = vec![true; cands.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..cands.len() {
            if alive[i] && best.map_or(true, |b| cands[i].score > cands[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(cands[b]);
        for j in 0..cands.len() {
            if alive[j] && raster_iou(&cands[b].bbox, &cands[j].bbox) > thresh {
                alive[j] = false;
            }
        }
    }
    out
}

/// One image for the brute-force evaluator.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    pub gt: Vec<BBox>,
    pub class: usize,
    pub pred: PredictionRecord,
}

/// Hit counts for top1, top5@1, top5@k, gtknown@1, gtknown@k.
pub fn brute_force_hits(cases: &[EvalCase], k: usize) -> [usize; 5] {
    let mut hits = [0; 5];
    for c in cases {
        let scores = &c.pred.class_scores;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let rank = order.iter().position(|&i| i == c.class);
        let mut first_correct = None;
        for (r, p) in c.pred.boxes.iter().enumerate() {
            let mut ok = false;
            for g in &c.gt {
                if raster_iou(&p.bbox, g) > 0.5 {
                    ok = true;
                }
            }
            if ok && first_correct.is_none() {
                first_correct = Some(r);
            }
        }
        let loc = |k: usize| first_correct.is_some_and(|r| r < k);
        let flags = [
            rank == Some(0) && loc(1),
            rank.is_some_and(|r| r < 5) && loc(1),
            rank.is_some_and(|r| r < 5) && loc(k),
            loc(1),
            loc(k),
        ];
        for (h, f) in hits.iter_mut().zip(flags) {
            if f {
                *h += 1;
            }
        }
    }
    hits
}

pub fn pct(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Random evaluation instance: up to 3 GT boxes and 8 predictions per
/// image over `num_classes` classes, with frequent near-misses and ties.
pub fn eval_cases(rng: &mut impl Rng, images: usize, num_classes: usize) -> Vec<EvalCase> {
    const SIDE: i64 = 24;
    (0..images)
        .map(|i| {
            let gt: Vec<BBox> = (0..rng.gen_range(1..=3)).map(|_| int_box(rng, SIDE)).collect();
            let mut boxes: Vec<ScoredBox> = (0..rng.gen_range(0..=8))
                .map(|_| {
                    let b = if rng.gen_bool(0.6) {
                        let g = gt[rng.gen_range(0..gt.len())];
                        int_box_near(rng, &g, 3, SIDE)
                    } else {
                        int_box(rng, SIDE)
                    };
                    ScoredBox::new(b, f64::from(rng.gen_range(0..6u8)) / 5.0)
                })
                .collect();
            boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
            let class_scores = (0..num_classes).map(|_| f64::from(rng.gen_range(0..4u8)) / 4.0).collect();
            EvalCase {
                id: format!("img{i:03}"),
                gt,
                class: rng.gen_range(0..num_classes),
                pred: PredictionRecord {
                    id: format!("img{i:03}"),
                    boxes,
                    class_scores,
                },
            }
        })
        .collect()
}
