use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{images_to_tensor, Backbone, DetectorConfig};
use crate::autodiff::{sgd_step, OptimizerState, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, BBox, ScoredBox};
use crate::image::Image;
use crate::losses::smooth_l1_4;

/// Single-box regressor: backbone, global average pooling, and a linear
/// layer emitting `(cx, cy, w, h)` normalized to the image size.
#[derive(Clone, Debug)]
pub struct ScrModel {
    cfg: DetectorConfig,
    beta: f64,
    params: ParamSet,
    backbone: Backbone,
    weight: ParamId,
    bias: ParamId,
}

impl ScrModel {
    pub fn new(cfg: DetectorConfig, smooth_l1_beta: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !(smooth_l1_beta > 0.0) {
            return Err(Error::invalid("smooth_l1_beta", format!("{smooth_l1_beta} <= 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, &cfg, &mut rng);
        let feat = *cfg.widths.last().expect("validated non-empty");
        let dist = Normal::new(0.0, 0.01).expect("positive std");
        let w = (0..4 * feat).map(|_| dist.sample(&mut rng)).collect();
        let weight = params.add("box.weight", Tensor::from_vec(&[4, feat], w)?, cfg.head_lr_mult, true);
        // start from a centered box covering half of each side
        let bias = params.add("box.bias", Tensor::zeros(&[4]), cfg.head_lr_mult, false);
        Ok(Self {
            cfg,
            beta: smooth_l1_beta,
            params,
            backbone,
            weight,
            bias,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }
    pub fn params(&self) -> &ParamSet {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn outputs(&self, tape: &mut Tape, images: &[&Image]) -> Result<Var> {
        let x = tape.leaf(&images_to_tensor(images, &self.cfg)?);
        let feat = self.backbone.forward(tape, &self.params, x)?;
        let pooled = tape.global_avg_pool(feat)?;
        let w = tape.param(&self.params, self.weight);
        let b = tape.param(&self.params, self.bias);
        let z = tape.linear(pooled, w, Some(b))?;
        Ok(tape.sigmoid(z))
    }

    /// Normalized `(cx, cy, w, h)` per image.
    pub fn forward_normalized(&self, images: &[&Image]) -> Result<Vec<[f64; 4]>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let out = self.outputs(&mut tape, images)?;
        Ok(tape
            .value(out)
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect())
    }

    fn to_box(&self, v: [f64; 4]) -> BBox {
        let (w, h) = (self.cfg.image_size.0 as f64, self.cfg.image_size.1 as f64);
        let b = BBox::from_center(v[0] * w, v[1] * h, v[2] * w, v[3] * h)
            .unwrap_or_else(|_| BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box"));
        clip_box(&b, w, h)
    }

    /// The single predicted box, in pixels and clipped to the image.
    pub fn predict(&self, image: &Image) -> Result<BBox> {
        Ok(self.to_box(self.forward_normalized(&[image])?[0]))
    }

    /// Same as [`ScrModel::predict`] with score 1, for prediction files.
    pub fn predict_scored(&self, images: &[&Image]) -> Result<Vec<ScoredBox>> {
        Ok(self
            .forward_normalized(images)?
            .into_iter()
            .map(|v| ScoredBox::new(self.to_box(v), 1.0))
            .collect())
    }

    fn target(&self, b: &BBox) -> [f64; 4] {
        let (w, h) = (self.cfg.image_size.0 as f64, self.cfg.image_size.1 as f64);
        let (cx, cy) = b.center();
        [cx / w, cy / h, b.width() / w, b.height() / h]
    }

    fn build_loss(&self, batch: &[(&Image, &[BBox])]) -> Result<Option<(Tape, Var, f64)>> {
        // images without any pseudo box carry no target and are skipped
        let kept: Vec<(&Image, &BBox)> = batch.iter().filter_map(|(img, b)| b.first().map(|b| (*img, b))).collect();
        if kept.is_empty() {
            return Ok(None);
        }
        let images: Vec<&Image> = kept.iter().map(|(i, _)| *i).collect();
        let mut tape = Tape::new();
        let out = self.outputs(&mut tape, &images)?;
        let scale = 1.0 / kept.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; 4 * kept.len()];
        for (n, (_, b)) in kept.iter().enumerate() {
            let v = tape.value(out);
            let pred = [v[4 * n], v[4 * n + 1], v[4 * n + 2], v[4 * n + 3]];
            let (l, g) = smooth_l1_4(pred, self.target(b), self.beta);
            value += scale * l;
            for k in 0..4 {
                grad[4 * n + k] = scale * g[k];
            }
        }
        let loss = tape.custom_scalar(value, vec![(out, grad)])?;
        Ok(Some((tape, loss, value)))
    }

    /// Smooth-L1 loss on the first pseudo box of each image; `None` when
    /// no image in the batch has one.
    pub fn loss(&self, batch: &[(&Image, &[BBox])]) -> Result<Option<f64>> {
        Ok(self.build_loss(batch)?.map(|(_, _, v)| v))
    }

    /// One optimizer step; a batch without any pseudo box is a no-op.
    pub fn train_step(
        &mut self,
        batch: &[(&Image, &[BBox])],
        optim: &mut OptimizerState,
        lr: f64,
    ) -> Result<Option<f64>> {
        let Some((tape, loss, value)) = self.build_loss(batch)? else {
            return Ok(None);
        };
        self.params.zero_grad();
        tape.backward_into(loss, &mut self.params)?;
        sgd_step(&mut self.params, optim, lr)?;
        Ok(Some(value))
    }

    pub fn load_params(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        self.params.load(records)
    }
}
