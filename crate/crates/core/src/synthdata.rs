//! Deterministic synthetic scenes with noisy pseudo boxes and simulated
//! classifier scores.
//!
//! Every image is a pure function of `(dataset seed, split, index)`: the
//! per-image seed is a splitmix hash of those, and each stage (layout,
//! rendering, corruption, class scores) draws from its own derived stream.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, BBox};
use crate::image::Image;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of a stream keyed by `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(mix64(base) ^ index)
}

fn rng_for(seed: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage))
}

/// Shape classes. The first three form the default label set; all ten are
/// used by the 10-class variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
    Frame,
    WideEllipse,
    TallEllipse,
    InvertedTriangle,
}

impl Shape {
    pub const ALL: [Shape; 10] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Ring,
        Shape::Cross,
        Shape::Frame,
        Shape::WideEllipse,
        Shape::TallEllipse,
        Shape::InvertedTriangle,
    ];

    pub fn from_class(class: usize) -> Result<Shape> {
        Shape::ALL
            .get(class)
            .copied()
            .ok_or_else(|| Error::invalid("class", format!("{class} >= {}", Shape::ALL.len())))
    }

    /// Whether the point `(u, v)`, relative to the object center and scaled
    /// so the nominal extent is `[-1, 1]^2`, is covered.
    fn covers(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Circle => r2 <= 1.0,
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            // apex at the top, base at the bottom
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            Shape::InvertedTriangle => (-1.0..=1.0).contains(&v) && u.abs() <= (1.0 - v) / 2.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ring => (0.36..=1.0).contains(&r2),
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Frame => u.abs().max(v.abs()) <= 1.0 && u.abs().max(v.abs()) >= 0.6,
            Shape::WideEllipse => u * u + 4.0 * v * v <= 1.0,
            Shape::TallEllipse => 4.0 * u * u + v * v <= 1.0,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Frame => "frame",
            Shape::WideEllipse => "wide_ellipse",
            Shape::TallEllipse => "tall_ellipse",
            Shape::InvertedTriangle => "inverted_triangle",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    /// Side of the nominal square extent, in pixels.
    pub size: f64,
    pub intensity: u8,
}

impl ObjectSpec {
    pub fn nominal_box(&self) -> Result<BBox> {
        BBox::from_center(self.cx, self.cy, self.size, self.size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub base: u8,
    /// Std of additive per-pixel Gaussian noise, in intensity units.
    pub noise: f64,
    /// Direction of the linear ramp, radians.
    pub gradient_angle: f64,
    /// Peak-to-peak ramp amplitude across the image, in intensity units.
    pub gradient_amplitude: f64,
    /// Small high-contrast blobs drawn under the objects.
    pub distractors: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: (usize, usize),
    pub channels: usize,
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
}

/// Maximum pairwise IoU between object extents in one scene.
pub const MAX_OBJECT_OVERLAP: f64 = 0.2;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        if w == 0 || h == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config(format!(
                "scene {w}x{h} with {} channels",
                self.channels
            )));
        }
        if self.objects.is_empty() {
            return Err(Error::Config("scene without objects".into()));
        }
        let boxes = self
            .objects
            .iter()
            .map(|o| {
                if !(o.size >= 2.0) {
                    return Err(Error::Config(format!("object size {} < 2", o.size)));
                }
                let b = o.nominal_box()?;
                if b.x1() < 0.0 || b.y1() < 0.0 || b.x2() > w as f64 || b.y2() > h as f64 {
                    return Err(Error::Config(format!("object {b:?} leaves the {w}x{h} image")));
                }
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                let o = iou(&boxes[i], &boxes[j]);
                if o >= MAX_OBJECT_OVERLAP {
                    return Err(Error::Config(format!("objects {i} and {j} overlap at IoU {o:.3}")));
                }
            }
        }
        if !(self.background.noise >= 0.0) {
            return Err(Error::Config(format!("noise {}", self.background.noise)));
        }
        Ok(())
    }
}

/// A rendered scene with its tight ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub gt_boxes: Vec<BBox>,
    pub gt_classes: Vec<usize>,
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Rasterize a scene. Pixel `(x, y)` is covered by a shape when its
/// center `(x + 0.5, y + 0.5)` is; ground-truth boxes are the tight pixel
/// bounds of each shape.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = spec.image_size;
    let bg = &spec.background;
    let mut rng = rng_for(seed, 0);
    let (ca, sa) = (bg.gradient_angle.cos(), bg.gradient_angle.sin());
    let span = (w as f64 * ca.abs() + h as f64 * sa.abs()).max(1.0);
    let mut plane = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let along = ((x as f64 + 0.5 - w as f64 / 2.0) * ca + (y as f64 + 0.5 - h as f64 / 2.0) * sa) / span;
            let n: f64 = rng.sample(StandardNormal);
            plane[y * w + x] = f64::from(bg.base) + bg.gradient_amplitude * along + bg.noise * n;
        }
    }
    for _ in 0..bg.distractors {
        let r = rng.gen_range(1.0..3.0f64);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let v = if rng.gen_bool(0.5) { rng.gen_range(0.0..30.0) } else { rng.gen_range(215.0..255.0) };
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    plane[y * w + x] = v;
                }
            }
        }
    }

    let mut gt_boxes = Vec::with_capacity(spec.objects.len());
    let mut gt_classes = Vec::with_capacity(spec.objects.len());
    for o in &spec.objects {
        let half = o.size / 2.0;
        let (x0, x1) = ((o.cx - half).floor() as usize, ((o.cx + half).ceil() as usize).min(w));
        let (y0, y1) = ((o.cy - half).floor() as usize, ((o.cy + half).ceil() as usize).min(h));
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in y0..y1 {
            for x in x0..x1 {
                let u = (x as f64 + 0.5 - o.cx) / half;
                let v = (y as f64 + 0.5 - o.cy) / half;
                if o.shape.covers(u, v) {
                    plane[y * w + x] = f64::from(o.intensity);
                    bounds = Some(match bounds {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        let (a, b, c, d) = bounds.ok_or_else(|| Error::Config(format!("object at ({}, {}) covers no pixel", o.cx, o.cy)))?;
        gt_boxes.push(BBox::new(a as f64, b as f64, (c + 1) as f64, (d + 1) as f64)?);
        gt_classes.push(Shape::ALL.iter().position(|s| *s == o.shape).expect("listed shape"));
    }

    let pixels = plane
        .iter()
        .flat_map(|&v| std::iter::repeat(to_u8(v)).take(spec.channels))
        .collect();
    Ok(Scene {
        image: Image::new(w, h, spec.channels, pixels)?,
        gt_boxes,
        gt_classes,
    })
}

/// Ranges from which scene layouts are sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub image_size: (usize, usize),
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub num_classes: usize,
    pub noise: f64,
    pub max_distractors: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            channels: 1,
            min_objects: 1,
            max_objects: 3,
            min_size: 14.0,
            max_size: 30.0,
            num_classes: 3,
            noise: 8.0,
            max_distractors: 4,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.min_size >= 2.0 && self.min_size <= self.max_size && self.max_size <= w.min(h) as f64) {
            return Err(Error::Config(format!(
                "object size range {}..={} for {w}x{h}",
                self.min_size, self.max_size
            )));
        }
        if !(2..=Shape::ALL.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes {} not in 2..=10", self.num_classes)));
        }
        if !(self.channels == 1 || self.channels == 3) || !(self.noise >= 0.0) {
            return Err(Error::Config(format!("channels {}, noise {}", self.channels, self.noise)));
        }
        Ok(())
    }
}

/// Draw a valid layout. Objects are placed by rejection sampling; if a
/// scene cannot fit the requested count after many attempts it keeps the
/// objects placed so far (at least one).
pub fn sample_scene_spec(params: &SceneParams, seed: u64) -> Result<SceneSpec> {
    params.validate()?;
    let mut rng = rng_for(seed, 1);
    let (w, h) = params.image_size;
    let count = rng.gen_range(params.min_objects..=params.max_objects);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count && attempts < 1000 {
        attempts += 1;
        let size = rng.gen_range(params.min_size..=params.max_size).round();
        let cx = rng.gen_range(size / 2.0..=w as f64 - size / 2.0).round();
        let cy = rng.gen_range(size / 2.0..=h as f64 - size / 2.0).round();
        let shape = Shape::ALL[rng.gen_range(0..params.num_classes)];
        let intensity = rng.gen_range(170..=250u8);
        let cand = ObjectSpec {
            shape,
            cx,
            cy,
            size,
            intensity,
        };
        let b = cand.nominal_box()?;
        let fits = objects
            .iter()
            .all(|o| iou(&o.nominal_box().expect("placed"), &b) < MAX_OBJECT_OVERLAP);
        if fits {
            objects.push(cand);
        }
    }
    let background = Background {
        base: rng.gen_range(40..=100),
        noise: params.noise,
        gradient_angle: rng.gen_range(0.0..std::f64::consts::TAU),
        gradient_amplitude: rng.gen_range(0.0..40.0),
        distractors: rng.gen_range(0..=params.max_distractors),
    };
    let spec = SceneSpec {
        image_size: params.image_size,
        channels: params.channels,
        objects,
        background,
    };
    spec.validate()?;
    Ok(spec)
}

/// Pseudo-box corruption model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Std of center jitter (as a fraction of box size) and of log-size jitter.
    pub jitter_sigma: f64,
    pub wrong_box_prob: f64,
    pub drop_prob: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        jitter_sigma: 0.0,
        wrong_box_prob: 0.0,
        drop_prob: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("wrong_box_prob", self.wrong_box_prob), ("drop_prob", self.drop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} outside [0, 1]")));
            }
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::invalid("jitter_sigma", format!("{}", self.jitter_sigma)));
        }
        Ok(())
    }
}

/// How a pseudo box came about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Exact copy of a ground-truth box.
    Exact,
    Jittered,
    /// Random background box replacing the object.
    Wrong,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoBox {
    pub bbox: BBox,
    pub provenance: Provenance,
}

/// Largest IoU a wrong box may have with any ground-truth box.
pub const WRONG_BOX_MAX_IOU: f64 = 0.1;

fn wrong_box<R: Rng>(gt: &[BBox], width: f64, height: f64, rng: &mut R) -> BBox {
    let ok = |b: &BBox| gt.iter().all(|g| iou(b, g) <= WRONG_BOX_MAX_IOU);
    let max_side = (width.min(height) / 2.0).max(2.0);
    for _ in 0..200 {
        let bw = rng.gen_range(1.0..=max_side);
        let bh = rng.gen_range(1.0..=max_side);
        let x = rng.gen_range(0.0..=width - bw);
        let y = rng.gen_range(0.0..=height - bh);
        let b = BBox::new(x, y, x + bw, y + bh).expect("positive extent");
        if ok(&b) {
            return b;
        }
    }
    // crowded image: scan small boxes, then fall back to a single pixel
    let side = 4.0f64.min(width).min(height);
    let mut y = 0.0;
    while y + side <= height {
        let mut x = 0.0;
        while x + side <= width {
            let b = BBox::new(x, y, x + side, y + side).expect("positive extent");
            if ok(&b) {
                return b;
            }
            x += 1.0;
        }
        y += 1.0;
    }
    BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box")
}

/// Corrupt ground-truth boxes into pseudo boxes: each box is dropped with
/// `drop_prob`, otherwise replaced by a wrong box with `wrong_box_prob`,
/// otherwise jittered. Results are clipped to the image.
pub fn corrupt_boxes(
    gt_boxes: &[BBox],
    noise: &NoiseModel,
    image_size: (usize, usize),
    seed: u64,
) -> Result<Vec<PseudoBox>> {
    noise.validate()?;
    let (width, height) = (image_size.0 as f64, image_size.1 as f64);
    let mut rng = rng_for(seed, 2);
    let jitter = Normal::new(0.0, noise.jitter_sigma.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut out = Vec::with_capacity(gt_boxes.len());
    for g in gt_boxes {
        let u_drop: f64 = rng.gen();
        let u_wrong: f64 = rng.gen();
        if u_drop < noise.drop_prob {
            continue;
        }
        if u_wrong < noise.wrong_box_prob {
            out.push(PseudoBox {
                bbox: wrong_box(gt_boxes, width, height, &mut rng),
                provenance: Provenance::Wrong,
            });
            continue;
        }
        if noise.jitter_sigma == 0.0 {
            out.push(PseudoBox {
                bbox: clip_box(g, width, height),
                provenance: Provenance::Exact,
            });
            continue;
        }
        let (cx, cy) = g.center();
        let (w, h) = (g.width(), g.height());
        let [ex, ey, ew, eh]: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
        let b = BBox::from_center(cx + ex * w, cy + ey * h, w * ew.exp(), h * eh.exp())?;
        out.push(PseudoBox {
            bbox: clip_box(&b, width, height),
            provenance: Provenance::Jittered,
        });
    }
    Ok(out)
}

/// Target accuracies of the simulated classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScoreModel {
    pub top1_acc: f64,
    pub top5_acc: f64,
}

impl Default for ClassScoreModel {
    fn default() -> Self {
        Self {
            top1_acc: 0.8,
            top5_acc: 0.95,
        }
    }
}

impl ClassScoreModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.top1_acc) || !(0.0..=1.0).contains(&self.top5_acc) {
            return Err(Error::Config(format!(
                "accuracies {} / {} outside [0, 1]",
                self.top1_acc, self.top5_acc
            )));
        }
        if self.top5_acc < self.top1_acc {
            return Err(Error::Config(format!(
                "top5_acc {} < top1_acc {}",
                self.top5_acc, self.top1_acc
            )));
        }
        Ok(())
    }
}

/// Softmax-like scores whose ranking puts `gt_class` first with
/// probability `top1_acc` and within the first five with probability
/// `top5_acc`. With five or fewer classes every rank is a top-5 rank.
pub fn simulate_class_scores(
    gt_class: usize,
    model: &ClassScoreModel,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    model.validate()?;
    if num_classes < 2 || gt_class >= num_classes {
        return Err(Error::invalid(
            "num_classes",
            format!("class {gt_class} among {num_classes} classes"),
        ));
    }
    let mut rng = rng_for(seed, 3);
    let u: f64 = rng.gen();
    let top5_end = num_classes.min(5);
    let rank = if u < model.top1_acc {
        0
    } else if u < model.top5_acc || num_classes <= 5 {
        rng.gen_range(1..top5_end)
    } else {
        rng.gen_range(5..num_classes)
    };
    let mut others: Vec<usize> = (0..num_classes).filter(|&c| c != gt_class).collect();
    others.shuffle(&mut rng);
    let mut order = others;
    order.insert(rank, gt_class);

    let mut logits: Vec<f64> = (0..num_classes).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
    logits.sort_by(|a, b| b.total_cmp(a));
    for i in 1..logits.len() {
        // keep the ranking strict
        if logits[i] >= logits[i - 1] - 1e-6 {
            logits[i] = logits[i - 1] - 1e-3;
        }
    }
    let z: f64 = logits.iter().map(|l| (l - logits[0]).exp()).sum();
    let mut scores = vec![0.0; num_classes];
    for (r, &c) in order.iter().enumerate() {
        scores[c] = (logits[r] - logits[0]).exp() / z;
    }
    Ok(scores)
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub scene: SceneParams,
    pub noise: NoiseModel,
    pub class_scores: ClassScoreModel,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 2000,
            test_count: 500,
            scene: SceneParams::default(),
            noise: NoiseModel {
                jitter_sigma: 0.1,
                wrong_box_prob: 0.25,
                drop_prob: 0.0,
            },
            class_scores: ClassScoreModel::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.noise.validate()?;
        self.class_scores.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Test => 0x7465_7374_0000_0000,
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

/// One generated image with labels, in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub gt_boxes: Vec<BBox>,
    pub gt_classes: Vec<usize>,
    pub pseudo: Vec<PseudoBox>,
    pub class_scores: Vec<f64>,
}

impl Sample {
    pub fn pseudo_boxes(&self) -> Vec<BBox> {
        self.pseudo.iter().map(|p| p.bbox).collect()
    }

    /// Image-level label: the class of the first object.
    pub fn label(&self) -> usize {
        self.gt_classes[0]
    }
}

pub fn generate_sample(cfg: &DataConfig, split: Split, index: usize) -> Result<Sample> {
    let seed = derive_seed(cfg.seed ^ split.tag(), index as u64);
    let spec = sample_scene_spec(&cfg.scene, seed)?;
    let scene = render_scene(&spec, seed)?;
    let pseudo = corrupt_boxes(&scene.gt_boxes, &cfg.noise, cfg.scene.image_size, seed)?;
    let class_scores = simulate_class_scores(scene.gt_classes[0], &cfg.class_scores, cfg.scene.num_classes, seed)?;
    Ok(Sample {
        id: format!("{}_{index:06}", split.name()),
        image: scene.image,
        gt_boxes: scene.gt_boxes,
        gt_classes: scene.gt_classes,
        pseudo,
        class_scores,
    })
}

pub fn generate_split(cfg: &DataConfig, split: Split) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let count = match split {
        Split::Train => cfg.train_count,
        Split::Test => cfg.test_count,
    };
    (0..count).map(|i| generate_sample(cfg, split, i)).collect()
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub gt_boxes: Vec<BBox>,
    pub gt_classes: Vec<usize>,
    pub pseudo_boxes: Vec<BBox>,
    pub class_scores_path: String,
    pub provenance: Vec<Provenance>,
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            if rec.provenance.len() != rec.pseudo_boxes.len() || rec.gt_boxes.len() != rec.gt_classes.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "list lengths disagree".into(),
                });
            }
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn image(&self, rec: &ManifestRecord) -> Result<Image> {
        Image::load_ppm(&self.root.join(&rec.image_path))
    }

    pub fn class_scores(&self, rec: &ManifestRecord) -> Result<Vec<f64>> {
        let path = self.root.join(&rec.class_scores_path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Reassemble in-memory samples from disk.
    pub fn samples(&self) -> Result<Vec<Sample>> {
        self.records
            .iter()
            .map(|r| {
                Ok(Sample {
                    id: r.id.clone(),
                    image: self.image(r)?,
                    gt_boxes: r.gt_boxes.clone(),
                    gt_classes: r.gt_classes.clone(),
                    pseudo: r
                        .pseudo_boxes
                        .iter()
                        .zip(&r.provenance)
                        .map(|(&bbox, &provenance)| PseudoBox { bbox, provenance })
                        .collect(),
                    class_scores: self.class_scores(r)?,
                })
            })
            .collect()
    }
}

/// Manifest file name of a split inside a dataset directory.
pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Write both splits under `dir`: `<split>.jsonl`, `images/<id>.ppm`,
/// `scores/<id>.json`. Returns the manifest paths.
pub fn write_dataset(cfg: &DataConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    for sub in ["images", "scores"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut written = Vec::new();
    for split in [Split::Train, Split::Test] {
        let path = manifest_path(dir, split);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for sample in generate_split(cfg, split)? {
            let rec = write_sample(&sample, dir)?;
            let line = serde_json::to_string(&rec).expect("manifest records serialize");
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn write_sample(sample: &Sample, dir: &Path) -> Result<ManifestRecord> {
    let image_path = format!("images/{}.ppm", sample.id);
    sample.image.save_ppm(&dir.join(&image_path))?;
    let class_scores_path = format!("scores/{}.json", sample.id);
    let sp = dir.join(&class_scores_path);
    let json = serde_json::to_string(&sample.class_scores).expect("finite scores serialize");
    fs::write(&sp, json).map_err(|e| Error::io(&sp, e))?;
    Ok(ManifestRecord {
        id: sample.id.clone(),
        image_path,
        gt_boxes: sample.gt_boxes.clone(),
        gt_classes: sample.gt_classes.clone(),
        pseudo_boxes: sample.pseudo_boxes(),
        class_scores_path,
        provenance: sample.pseudo.iter().map(|p| p.provenance).collect(),
    })
}
