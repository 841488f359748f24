//! Central finite-difference checks for every loss and tape op.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wend::autodiff::{Tape, Tensor, Var};
use wend::geometry::{decode_deltas, BBox, DeltaVec, DEFAULT_DELTA_CLAMP};
use wend::losses::{
    bce, giou_loss, giou_loss_deltas, quality_loss, smooth_l1, supervised_loss, total_loss, weighted_entropy_loss,
    EntropyScope, LossConfig, RegressionKind, SupervisedBatch,
};

pub const STEP: f64 = 1e-4;
/// Minimum distance of a sample from any kink or branch switch.
pub const MARGIN: f64 = 1e-2;

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Max-norm relative error between an analytic and a numeric gradient.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

fn prob(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(MARGIN..1.0 - MARGIN)
}

fn away_from(rng: &mut ChaCha8Rng, lo: f64, hi: f64, kinks: &[f64]) -> f64 {
    loop {
        let v = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() >= MARGIN) {
            return v;
        }
    }
}

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.gen_range(0.0..20.0);
    let y1 = rng.gen_range(0.0..20.0);
    BBox::new(x1, y1, x1 + rng.gen_range(1.0..12.0), y1 + rng.gen_range(1.0..12.0)).unwrap()
}

/// Every edge of `a` sits at least `MARGIN` from every edge of `b` on the
/// same axis, so no min/max in the GIoU expression is at a switch.
fn edges_separated(a: &BBox, b: &BBox) -> bool {
    let sep = |p: [f64; 2], q: [f64; 2]| p.iter().all(|u| q.iter().all(|v| (u - v).abs() >= MARGIN));
    sep([a.x1(), a.x2()], [b.x1(), b.x2()]) && sep([a.y1(), a.y2()], [b.y1(), b.y2()])
}

fn deltas_flat(t: &[DeltaVec]) -> Vec<f64> {
    t.iter().flat_map(|d| d.to_array()).collect()
}

fn unflatten(x: &[f64]) -> Vec<DeltaVec> {
    x.chunks(4).map(|c| DeltaVec::new(c[0], c[1], c[2], c[3])).collect()
}

fn point_bce(rng: &mut ChaCha8Rng) -> f64 {
    let p = prob(rng);
    let y = rng.gen_range(0..2u8);
    rel_err(&bce(p, y).grad_p, &central_diff(|x| bce(x[0], y).value, &[p]))
}

fn point_quality(rng: &mut ChaCha8Rng) -> f64 {
    let (c, target) = (prob(rng), rng.gen_range(0.0..1.0));
    rel_err(&quality_loss(c, target).grad_p, &central_diff(|x| quality_loss(x[0], target).value, &[c]))
}

fn point_smooth_l1(rng: &mut ChaCha8Rng) -> f64 {
    let beta = rng.gen_range(0.05..1.0);
    let target: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
    let t: [f64; 4] = std::array::from_fn(|k| target[k] + away_from(rng, -2.0, 2.0, &[-beta, beta]));
    let ts = DeltaVec::from_array(target);
    let analytic = smooth_l1(&DeltaVec::from_array(t), &ts, beta).grad_t[0].to_array();
    let f = |x: &[f64]| smooth_l1(&unflatten(x)[0], &ts, beta).value;
    rel_err(&analytic, &central_diff(f, &t))
}

fn point_giou(rng: &mut ChaCha8Rng) -> f64 {
    let (pred, target) = loop {
        let (p, g) = (rand_box(rng), rand_box(rng));
        if edges_separated(&p, &g) {
            break (p, g);
        }
    };
    let f = |x: &[f64]| giou_loss(&BBox::new(x[0], x[1], x[2], x[3]).unwrap(), &target).value;
    rel_err(&giou_loss(&pred, &target).grad, &central_diff(f, &pred.to_array()))
}

fn giou_delta_sample(rng: &mut ChaCha8Rng, anchor: &BBox, target: &BBox) -> DeltaVec {
    loop {
        let t = DeltaVec::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.7..0.7),
            rng.gen_range(-0.7..0.7),
        );
        if edges_separated(&decode_deltas(&t, anchor, DEFAULT_DELTA_CLAMP), target) {
            return t;
        }
    }
}

fn point_giou_deltas(rng: &mut ChaCha8Rng) -> f64 {
    let (anchor, target) = (rand_box(rng), rand_box(rng));
    let t = giou_delta_sample(rng, &anchor, &target);
    let analytic = giou_loss_deltas(&t, &target, &anchor, DEFAULT_DELTA_CLAMP).grad_t[0].to_array();
    let f = |x: &[f64]| giou_loss_deltas(&unflatten(x)[0], &target, &anchor, DEFAULT_DELTA_CLAMP).value;
    rel_err(&analytic, &central_diff(f, &t.to_array()))
}

/// A random supervised batch whose inputs all sit away from branch switches.
struct SupCase {
    p: Vec<f64>,
    labels: Vec<u8>,
    t: Vec<DeltaVec>,
    t_star: Vec<DeltaVec>,
    anchors: Vec<BBox>,
    cfg: LossConfig,
}

fn sup_case(rng: &mut ChaCha8Rng) -> SupCase {
    let n = rng.gen_range(2..8);
    let reg_kind = if rng.gen_bool(0.5) {
        RegressionKind::SmoothL1
    } else {
        RegressionKind::Giou
    };
    let cfg = LossConfig {
        lambda1: rng.gen_range(0.1..2.0),
        lambda2: rng.gen_range(0.1..2.0),
        reg_kind,
        smooth_l1_beta: rng.gen_range(0.05..1.0),
        ..LossConfig::default()
    };
    let mut c = SupCase {
        p: Vec::new(),
        labels: Vec::new(),
        t: Vec::new(),
        t_star: Vec::new(),
        anchors: Vec::new(),
        cfg,
    };
    for i in 0..n {
        let y = u8::from(i == 0 || rng.gen_bool(0.4));
        let anchor = rand_box(rng);
        let target = rand_box(rng);
        let t_star = wend::geometry::encode_deltas(&target, &anchor);
        let t = match reg_kind {
            RegressionKind::Giou => giou_delta_sample(rng, &anchor, &target),
            RegressionKind::SmoothL1 => {
                let b = cfg.smooth_l1_beta;
                let ts = t_star.to_array();
                DeltaVec::from_array(std::array::from_fn(|k| ts[k] + away_from(rng, -1.5, 1.5, &[-b, b])))
            }
        };
        c.p.push(prob(rng));
        c.labels.push(y);
        c.t.push(t);
        c.t_star.push(t_star);
        c.anchors.push(anchor);
    }
    c
}

impl SupCase {
    fn batch<'a>(&'a self, p: &'a [f64], t: &'a [DeltaVec]) -> SupervisedBatch<'a> {
        SupervisedBatch {
            p,
            labels: &self.labels,
            t,
            t_star: &self.t_star,
            anchors: &self.anchors,
        }
    }

    fn inputs(&self) -> Vec<f64> {
        let mut x = self.p.clone();
        x.extend(deltas_flat(&self.t));
        x
    }

    fn split(&self, x: &[f64]) -> (Vec<f64>, Vec<DeltaVec>) {
        let n = self.p.len();
        (x[..n].to_vec(), unflatten(&x[n..]))
    }
}

fn point_supervised(rng: &mut ChaCha8Rng) -> f64 {
    let c = sup_case(rng);
    let l = supervised_loss(&c.batch(&c.p, &c.t), &c.cfg).unwrap();
    let mut analytic = l.grad_p.clone();
    analytic.extend(deltas_flat(&l.grad_t));
    let f = |x: &[f64]| {
        let (p, t) = c.split(x);
        supervised_loss(&c.batch(&p, &t), &c.cfg).unwrap().value
    };
    rel_err(&analytic, &central_diff(f, &c.inputs()))
}

fn we_config(rng: &mut ChaCha8Rng) -> LossConfig {
    let tau1 = rng.gen_range(0.1..0.6);
    LossConfig {
        gamma: rng.gen_range(0.5..6.0),
        alpha: rng.gen_range(0.05..0.95),
        tau1,
        tau2: tau1 + rng.gen_range(0.0..0.3),
        we_scope: EntropyScope::AllOutputs,
        ..LossConfig::default()
    }
}

fn we_probs(rng: &mut ChaCha8Rng, cfg: &LossConfig, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| away_from(rng, MARGIN, 1.0 - MARGIN, &[cfg.tau1, cfg.tau2]))
        .collect()
}

fn point_weighted_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = we_config(rng);
    let n = rng.gen_range(1..16);
    let p = we_probs(rng, &cfg, n);
    let f = |x: &[f64]| weighted_entropy_loss(x, &cfg).value;
    rel_err(&weighted_entropy_loss(&p, &cfg).grad_p, &central_diff(f, &p))
}

fn point_total(rng: &mut ChaCha8Rng) -> f64 {
    let mut c = sup_case(rng);
    let we = we_config(rng);
    c.cfg = LossConfig {
        gamma: we.gamma,
        alpha: we.alpha,
        tau1: we.tau1,
        tau2: we.tau2,
        eta: rng.gen_range(0.0..4.0),
        ..c.cfg
    };
    c.p = we_probs(rng, &c.cfg, c.p.len());
    let eval = |p: &[f64], t: &[DeltaVec]| {
        let sup = supervised_loss(&c.batch(p, t), &c.cfg).unwrap();
        total_loss(&sup, &weighted_entropy_loss(p, &c.cfg), &c.cfg)
    };
    let l = eval(&c.p, &c.t);
    let mut analytic = l.grad_p.clone();
    analytic.extend(deltas_flat(&l.grad_t));
    let f = |x: &[f64]| {
        let (p, t) = c.split(x);
        eval(&p, &t).value
    };
    rel_err(&analytic, &central_diff(f, &c.inputs()))
}

/// Inputs of a tape check: shapes and starting values of each leaf.
type Leaves = Vec<Tensor>;
type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduce `y` to a scalar with fixed pseudo-random weights.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = normal(&mut super::rng(seed), &shape);
    let w = tape.leaf(&w);
    let yw = tape.mul(y, w).unwrap();
    tape.sum(yw)
}

fn eval_tape(leaves: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    tape.value(out)[0]
}

fn check_tape(leaves: Leaves, build: &Build) -> f64 {
    let leaves: Vec<Tensor> = leaves.into_iter().map(Tensor::requiring_grad).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&leaves)
        .flat_map(|(&v, t)| grads.wrt(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let flat: Vec<f64> = leaves.iter().flat_map(|t| t.data().to_vec()).collect();
    let f = |x: &[f64]| {
        let mut off = 0;
        let probe: Vec<Tensor> = leaves
            .iter()
            .map(|t| {
                let v = Tensor::from_vec(t.shape(), x[off..off + t.len()].to_vec()).unwrap();
                off += t.len();
                v
            })
            .collect();
        eval_tape(&probe, build)
    };
    rel_err(&analytic, &central_diff(f, &flat))
}

fn point_conv2d(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4));
    let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
    let k = rng.gen_range(1..4usize);
    let stride = rng.gen_range(1..3);
    let pad = rng.gen_range(0..2);
    let seed = rng.gen();
    let leaves = vec![normal(rng, &[n, c, h, w]), normal(rng, &[o, c, k, k]), normal(rng, &[o])];
    check_tape(leaves, &move |tape, v| {
        let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
        project(tape, y, seed)
    })
}

fn point_linear(rng: &mut ChaCha8Rng) -> f64 {
    let (n, i, o) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5));
    let seed = rng.gen();
    let leaves = vec![normal(rng, &[n, i]), normal(rng, &[o, i]), normal(rng, &[o])];
    check_tape(leaves, &move |tape, v| {
        let y = tape.linear(v[0], v[1], Some(v[2])).unwrap();
        project(tape, y, seed)
    })
}

fn unary_point(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var) -> Var, kinks: &[f64]) -> f64 {
    let n = rng.gen_range(1..12);
    let data = (0..n).map(|_| away_from(rng, -3.0, 3.0, kinks)).collect();
    let seed = rng.gen();
    let x = Tensor::from_vec(&[n], data).unwrap();
    check_tape(vec![x], &move |tape, v| {
        let y = op(tape, v[0]);
        project(tape, y, seed)
    })
}

fn point_relu(rng: &mut ChaCha8Rng) -> f64 {
    unary_point(rng, Tape::relu, &[0.0])
}

fn point_sigmoid(rng: &mut ChaCha8Rng) -> f64 {
    unary_point(rng, Tape::sigmoid, &[])
}

fn point_add_scalar(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.gen_range(-2.0..2.0);
    let seed = rng.gen();
    check_tape(vec![normal(rng, &[3, 4])], &move |tape, v| {
        let y = tape.add_scalar(v[0], c);
        // squared so the constant shift shows up in the gradient
        let y2 = tape.mul(y, y).unwrap();
        project(tape, y2, seed)
    })
}

fn point_mul_scalar(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.gen_range(-2.0..2.0);
    let seed = rng.gen();
    check_tape(vec![normal(rng, &[5])], &move |tape, v| {
        let y = tape.mul_scalar(v[0], c);
        project(tape, y, seed)
    })
}

fn binary_point(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var, Var) -> wend::Result<Var>) -> f64 {
    let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
    let seed = rng.gen();
    check_tape(vec![normal(rng, &shape), normal(rng, &shape)], &move |tape, v| {
        let y = op(tape, v[0], v[1]).unwrap();
        project(tape, y, seed)
    })
}

fn point_add(rng: &mut ChaCha8Rng) -> f64 {
    binary_point(rng, Tape::add)
}

fn point_mul(rng: &mut ChaCha8Rng) -> f64 {
    binary_point(rng, Tape::mul)
}

fn point_sum(rng: &mut ChaCha8Rng) -> f64 {
    check_tape(vec![normal(rng, &[2, 3, 2])], &|tape, v| {
        let s = tape.sigmoid(v[0]);
        tape.sum(s)
    })
}

fn point_mean(rng: &mut ChaCha8Rng) -> f64 {
    check_tape(vec![normal(rng, &[4, 3])], &|tape, v| {
        let s = tape.sigmoid(v[0]);
        tape.mean(s)
    })
}

fn point_reshape(rng: &mut ChaCha8Rng) -> f64 {
    let seed = rng.gen();
    check_tape(vec![normal(rng, &[2, 6])], &move |tape, v| {
        let r = tape.reshape(v[0], &[3, 4]).unwrap();
        project(tape, r, seed)
    })
}

fn point_slice(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4)];
    let axis = rng.gen_range(0..3);
    let start = rng.gen_range(0..shape[axis]);
    let len = rng.gen_range(1..=shape[axis] - start);
    let seed = rng.gen();
    check_tape(vec![normal(rng, &shape)], &move |tape, v| {
        let s = tape.slice(v[0], axis, start, len).unwrap();
        project(tape, s, seed)
    })
}

fn point_global_avg_pool(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5)];
    let seed = rng.gen();
    check_tape(vec![normal(rng, &shape)], &move |tape, v| {
        let g = tape.global_avg_pool(v[0]).unwrap();
        project(tape, g, seed)
    })
}

fn point_custom_scalar(rng: &mut ChaCha8Rng) -> f64 {
    check_tape(vec![normal(rng, &[6])], &|tape, v| {
        // sum of sin over a sigmoid, with its derivative supplied by hand
        let s = tape.sigmoid(v[0]);
        let vals = tape.value(s).to_vec();
        let value = vals.iter().map(|u| u.sin()).sum();
        let local = vals.iter().map(|u| u.cos()).collect();
        tape.custom_scalar(value, vec![(s, local)]).unwrap()
    })
}

pub type Point = fn(&mut ChaCha8Rng) -> f64;

/// Every checked function with its point sampler.
pub const SUITE: &[(&str, Point)] = &[
    ("bce", point_bce),
    ("quality_loss", point_quality),
    ("smooth_l1", point_smooth_l1),
    ("giou_loss", point_giou),
    ("giou_loss_deltas", point_giou_deltas),
    ("supervised_loss", point_supervised),
    ("weighted_entropy_loss", point_weighted_entropy),
    ("total_loss", point_total),
    ("conv2d", point_conv2d),
    ("linear", point_linear),
    ("relu", point_relu),
    ("sigmoid", point_sigmoid),
    ("add_scalar", point_add_scalar),
    ("mul_scalar", point_mul_scalar),
    ("add", point_add),
    ("mul", point_mul),
    ("sum", point_sum),
    ("mean", point_mean),
    ("reshape", point_reshape),
    ("slice", point_slice),
    ("global_avg_pool", point_global_avg_pool),
    ("custom_scalar", point_custom_scalar),
];

/// Worst relative error of `point` over `points` samples.
pub fn worst(point: Point, points: usize, seed: u64) -> f64 {
    let mut rng = super::rng(seed);
    (0..points).map(|_| point(&mut rng)).fold(0.0, f64::max)
}
