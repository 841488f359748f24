use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{images_to_tensor, quality_target, Backbone, ConvLayer, DetectorConfig};
use crate::assignment::{assign_labels, generate_anchors, sample_minibatch, AnchorSet};
use crate::autodiff::{sgd_step, OptimizerState, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode_deltas, nms, BBox, DeltaVec, ScoredBox, DEFAULT_DELTA_CLAMP};
use crate::image::Image;
use crate::losses::{
    quality_loss, supervised_loss, total_loss, weighted_entropy_loss, EntropyScope, LossConfig,
    LossValue, SupervisedBatch,
};

/// Raw per-anchor predictions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub p: Vec<f64>,
    pub deltas: Vec<DeltaVec>,
    pub quality: Option<Vec<f64>>,
}

/// Loss values of one step, averaged over the images in it.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub sup: f64,
    pub unsup: f64,
    pub total: f64,
}

/// Binary-class detector: backbone plus per-cell 1x1 heads.
#[derive(Clone, Debug)]
pub struct BcdModel {
    cfg: DetectorConfig,
    loss_cfg: LossConfig,
    weighted_entropy: bool,
    anchors: AnchorSet,
    params: ParamSet,
    backbone: Backbone,
    cls: ConvLayer,
    reg: ConvLayer,
    quality: Option<ConvLayer>,
}

struct HeadVars {
    p: Var,
    reg: Var,
    quality: Option<Var>,
}

impl BcdModel {
    pub fn new(cfg: DetectorConfig, loss_cfg: LossConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        loss_cfg.validate()?;
        let anchors = generate_anchors(cfg.image_size, cfg.stride(), &cfg.anchor_scales, &cfg.anchor_ratios)?;
        let a = anchors.per_location();
        let feat = *cfg.widths.last().expect("validated non-empty");

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, &cfg, &mut rng);
        let head = cfg.head_lr_mult;
        let prior = (0.01f64 / 0.99).ln();
        let cls = ConvLayer::new(&mut params, "cls", [a, feat, 1, 1], 0.01, prior, head, &mut rng);
        let reg = ConvLayer::new(&mut params, "reg", [4 * a, feat, 1, 1], 0.01, 0.0, head, &mut rng);
        let quality = cfg
            .quality
            .map(|_| ConvLayer::new(&mut params, "quality", [a, feat, 1, 1], 0.01, 0.0, head, &mut rng));

        Ok(Self {
            cfg,
            loss_cfg,
            weighted_entropy: true,
            anchors,
            params,
            backbone,
            cls,
            reg,
            quality,
        })
    }

    /// Enable or disable the weighted-entropy term. Disabled, training
    /// optimizes the scaled supervised loss alone.
    pub fn with_weighted_entropy(mut self, on: bool) -> Self {
        self.weighted_entropy = on;
        self
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }
    pub fn loss_config(&self) -> &LossConfig {
        &self.loss_cfg
    }
    pub fn weighted_entropy(&self) -> bool {
        self.weighted_entropy
    }
    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }
    pub fn params(&self) -> &ParamSet {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn heads(&self, tape: &mut Tape, images: &[&Image]) -> Result<HeadVars> {
        let x = tape.leaf(&images_to_tensor(images, &self.cfg)?);
        let feat = self.backbone.forward(tape, &self.params, x)?;
        let logits = self.cls.apply(tape, &self.params, feat, 1, 0)?;
        let p = tape.sigmoid(logits);
        let reg = self.reg.apply(tape, &self.params, feat, 1, 0)?;
        let quality = match &self.quality {
            Some(q) => {
                let z = q.apply(tape, &self.params, feat, 1, 0)?;
                Some(tape.sigmoid(z))
            }
            None => None,
        };
        Ok(HeadVars { p, reg, quality })
    }

    /// Flat offset of anchor `i` of image `n` in a `[N, A*k, gh, gw]` map,
    /// for component `c` of `k`.
    fn offset(&self, n: usize, i: usize, k: usize, c: usize) -> usize {
        let a = self.anchors.per_location();
        let (gw, gh) = self.anchors.grid();
        let cells = gw * gh;
        let (l, j) = (i / a, i % a);
        ((n * a + j) * k + c) * cells + l
    }

    fn unpack(&self, tape: &Tape, vars: &HeadVars, n: usize) -> DetectorOutput {
        let count = self.anchors.len();
        let pv = tape.value(vars.p);
        let rv = tape.value(vars.reg);
        let p = (0..count).map(|i| pv[self.offset(n, i, 1, 0)]).collect();
        let deltas = (0..count)
            .map(|i| {
                DeltaVec::new(
                    rv[self.offset(n, i, 4, 0)],
                    rv[self.offset(n, i, 4, 1)],
                    rv[self.offset(n, i, 4, 2)],
                    rv[self.offset(n, i, 4, 3)],
                )
            })
            .collect();
        let quality = vars.quality.map(|q| {
            let qv = tape.value(q);
            (0..count).map(|i| qv[self.offset(n, i, 1, 0)]).collect()
        });
        DetectorOutput { p, deltas, quality }
    }

    pub fn forward(&self, image: &Image) -> Result<DetectorOutput> {
        Ok(self.forward_batch(&[image])?.remove(0))
    }

    pub fn forward_batch(&self, images: &[&Image]) -> Result<Vec<DetectorOutput>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.heads(&mut tape, images)?;
        Ok((0..images.len()).map(|n| self.unpack(&tape, &vars, n)).collect())
    }

    /// Boxes from raw outputs: decode, clip, score, threshold, suppress,
    /// truncate.
    pub fn postprocess(
        &self,
        out: &DetectorOutput,
        score_thresh: f64,
        nms_thresh: f64,
        max_outputs: usize,
    ) -> Vec<ScoredBox> {
        let (w, h) = self.cfg.image_size;
        let candidates: Vec<ScoredBox> = self
            .anchors
            .anchors()
            .iter()
            .enumerate()
            .filter_map(|(i, anchor)| {
                let score = match &out.quality {
                    Some(q) => out.p[i] * q[i],
                    None => out.p[i],
                };
                (score > score_thresh).then(|| {
                    let b = decode_deltas(&out.deltas[i], anchor, DEFAULT_DELTA_CLAMP);
                    ScoredBox::new(clip_box(&b, w as f64, h as f64), score)
                })
            })
            .collect();
        let mut kept = nms(&candidates, nms_thresh);
        kept.truncate(max_outputs);
        kept
    }

    pub fn predict(
        &self,
        image: &Image,
        score_thresh: f64,
        nms_thresh: f64,
        max_outputs: usize,
    ) -> Result<Vec<ScoredBox>> {
        check_unit("score_thresh", score_thresh)?;
        check_unit("nms_thresh", nms_thresh)?;
        let out = self.forward(image)?;
        Ok(self.postprocess(&out, score_thresh, nms_thresh, max_outputs))
    }

    /// Build the step loss on a fresh tape. Returns the tape, the loss node
    /// and the image-averaged loss values.
    fn build_loss(&self, batch: &[(&Image, &[BBox])], seed: u64) -> Result<(Tape, Var, StepLosses)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let images: Vec<&Image> = batch.iter().map(|(img, _)| *img).collect();
        let mut tape = Tape::new();
        let vars = self.heads(&mut tape, &images)?;
        let count = self.anchors.len();
        let scale = 1.0 / batch.len() as f64;

        let mut grad_p = vec![0.0; tape.value(vars.p).len()];
        let mut grad_reg = vec![0.0; tape.value(vars.reg).len()];
        let mut grad_q = vars.quality.map(|q| vec![0.0; tape.value(q).len()]);
        let mut sums = StepLosses::default();

        for (n, (_, boxes)) in batch.iter().enumerate() {
            let out = self.unpack(&tape, &vars, n);
            let assignment = assign_labels(&self.anchors, boxes, self.cfg.fg_thresh, self.cfg.bg_thresh)?;
            let image_seed = seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let sample = match sample_minibatch(
                &assignment,
                &self.anchors,
                boxes,
                self.cfg.sample_size,
                self.cfg.sample_ratio,
                image_seed,
            ) {
                Ok(s) => Some(s),
                Err(Error::EmptyBatch) => None,
                Err(e) => return Err(e),
            };

            let mut sup = LossValue::zero();
            if let Some(s) = &sample {
                let p: Vec<f64> = s.indices.iter().map(|&i| out.p[i]).collect();
                let t: Vec<DeltaVec> = s.indices.iter().map(|&i| out.deltas[i]).collect();
                let t_star: Vec<DeltaVec> = s.target_deltas.iter().map(|d| d.unwrap_or(DeltaVec::ZERO)).collect();
                let anchors: Vec<BBox> = s.indices.iter().map(|&i| self.anchors.anchors()[i]).collect();
                let sb = SupervisedBatch {
                    p: &p,
                    labels: &s.target_labels,
                    t: &t,
                    t_star: &t_star,
                    anchors: &anchors,
                };
                sup = supervised_loss(&sb, &self.loss_cfg)?.scatter(&s.indices, count);

                if let (Some(kind), Some(qout), Some(gq)) = (self.cfg.quality, &out.quality, grad_q.as_mut()) {
                    let positives: Vec<(usize, usize)> = s
                        .indices
                        .iter()
                        .zip(&s.matched_gt)
                        .filter_map(|(&i, m)| m.map(|g| (i, g)))
                        .collect();
                    if !positives.is_empty() {
                        let w = 1.0 / positives.len() as f64;
                        let eta = self.loss_cfg.eta;
                        for (i, g) in positives {
                            let anchor = &self.anchors.anchors()[i];
                            let pred = decode_deltas(&out.deltas[i], anchor, DEFAULT_DELTA_CLAMP);
                            let target = quality_target(anchor, &pred, &boxes[g], kind);
                            let l = quality_loss(qout[i], target);
                            sup.value += w * l.value;
                            gq[self.offset(n, i, 1, 0)] += scale * eta * w * l.grad_p[0];
                        }
                    }
                }
            }

            let unsup = if !self.weighted_entropy {
                LossValue::zero()
            } else {
                match (self.loss_cfg.we_scope, &sample) {
                    (EntropyScope::AllOutputs, _) => weighted_entropy_loss(&out.p, &self.loss_cfg),
                    (EntropyScope::Minibatch, Some(s)) => {
                        let p: Vec<f64> = s.indices.iter().map(|&i| out.p[i]).collect();
                        weighted_entropy_loss(&p, &self.loss_cfg).scatter(&s.indices, count)
                    }
                    (EntropyScope::Minibatch, None) => LossValue::zero(),
                }
            };
            let total = total_loss(&sup, &unsup, &self.loss_cfg);
            sums.sup += sup.value;
            sums.unsup += unsup.value;
            sums.total += total.value;

            for (i, g) in total.grad_p.iter().enumerate() {
                grad_p[self.offset(n, i, 1, 0)] += scale * g;
            }
            for (i, g) in total.grad_t.iter().enumerate() {
                for (c, v) in g.to_array().into_iter().enumerate() {
                    grad_reg[self.offset(n, i, 4, c)] += scale * v;
                }
            }
        }

        let mut inputs = vec![(vars.p, grad_p), (vars.reg, grad_reg)];
        if let (Some(q), Some(g)) = (vars.quality, grad_q) {
            inputs.push((q, g));
        }
        let losses = StepLosses {
            sup: scale * sums.sup,
            unsup: scale * sums.unsup,
            total: scale * sums.total,
        };
        let loss = tape.custom_scalar(losses.total, inputs)?;
        Ok((tape, loss, losses))
    }

    /// Loss values of a batch without touching gradients.
    pub fn loss(&self, batch: &[(&Image, &[BBox])], seed: u64) -> Result<StepLosses> {
        Ok(self.build_loss(batch, seed)?.2)
    }

    /// Loss values of a batch, accumulating parameter gradients.
    pub fn loss_and_backward(&mut self, batch: &[(&Image, &[BBox])], seed: u64) -> Result<StepLosses> {
        let (tape, loss, losses) = self.build_loss(batch, seed)?;
        tape.backward_into(loss, &mut self.params)?;
        Ok(losses)
    }

    /// One optimizer step on a batch of `(image, pseudo boxes)`. `seed`
    /// drives minibatch sampling.
    pub fn train_step(
        &mut self,
        batch: &[(&Image, &[BBox])],
        seed: u64,
        optim: &mut OptimizerState,
        lr: f64,
    ) -> Result<StepLosses> {
        self.params.zero_grad();
        let losses = self.loss_and_backward(batch, seed)?;
        sgd_step(&mut self.params, optim, lr)?;
        Ok(losses)
    }

    pub fn load_params(&mut self, records: &[(String, crate::autodiff::Tensor)]) -> Result<()> {
        self.params.load(records)
    }
}

fn check_unit(arg: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(arg, format!("{v} outside [0, 1]")))
    }
}
