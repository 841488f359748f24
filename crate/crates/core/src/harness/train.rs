use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EvalConfig, ModelKind, RunConfig};
use crate::autodiff::{checkpoint, OptimizerState, ParamSet};
use crate::detector::{BcdModel, ScrModel};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, metrics_csv, write_predictions, GroundTruth, MetricsReport, PredictionRecord};
use crate::geometry::BBox;
use crate::image::Image;
use crate::synthdata::{derive_seed, manifest_path, Manifest, Sample, Split};

/// A model fitted by [`train_samples`].
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Bcd(BcdModel),
    Scr(ScrModel),
}

const PREDICT_CHUNK: usize = 64;

impl TrainedModel {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.model {
            ModelKind::Bcd | ModelKind::BcdNoWe => TrainedModel::Bcd(
                BcdModel::new(cfg.detector.clone(), cfg.loss, cfg.seed)?
                    .with_weighted_entropy(cfg.model == ModelKind::Bcd),
            ),
            ModelKind::Scr => TrainedModel::Scr(ScrModel::new(cfg.detector.clone(), cfg.loss.smooth_l1_beta, cfg.seed)?),
        })
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            TrainedModel::Bcd(m) => m.params(),
            TrainedModel::Scr(m) => m.params(),
        }
    }

    pub fn load_params(&mut self, records: &[(String, crate::autodiff::Tensor)]) -> Result<()> {
        match self {
            TrainedModel::Bcd(m) => m.load_params(records),
            TrainedModel::Scr(m) => m.load_params(records),
        }
    }

    /// Prediction records for `samples`, carrying their class scores.
    pub fn predict_records(&self, samples: &[Sample], eval: &EvalConfig) -> Result<Vec<PredictionRecord>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let boxes = match self {
                TrainedModel::Bcd(m) => m
                    .forward_batch(&images)?
                    .iter()
                    .map(|o| m.postprocess(o, eval.score_thresh, eval.nms_thresh, eval.max_outputs))
                    .collect::<Vec<_>>(),
                TrainedModel::Scr(m) => m.predict_scored(&images)?.into_iter().map(|b| vec![b]).collect(),
            };
            out.extend(chunk.iter().zip(boxes).map(|(s, boxes)| PredictionRecord {
                id: s.id.clone(),
                boxes,
                class_scores: s.class_scores.clone(),
            }));
        }
        Ok(out)
    }
}

pub fn ground_truths(samples: &[Sample]) -> Vec<GroundTruth<'_>> {
    samples
        .iter()
        .map(|s| GroundTruth {
            id: &s.id,
            boxes: &s.gt_boxes,
            class: s.label(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sup: f64,
    pub unsup: f64,
    pub total: f64,
    pub gtknown_single: f64,
    pub gtknown_multi: f64,
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub model: ModelKind,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: MetricsReport,
    /// Seconds; kept out of the CSV so that stays reproducible.
    pub wall_time: f64,
}

pub const RECORD_HEADER: &str = "epoch,sup,unsup,total,gtknown_single,gtknown_multi";

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{RECORD_HEADER}\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{},{:.9e},{:.9e},{:.9e},{:.4},{:.4}",
                e.epoch, e.sup, e.unsup, e.total, e.gtknown_single, e.gtknown_multi
            )
            .expect("writing to a String");
        }
        s
    }
}

/// Train on in-memory samples, evaluating on `test` after every epoch.
pub fn train_samples(cfg: &RunConfig, train: &[Sample], test: &[Sample]) -> Result<(TrainedModel, RunRecord)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let start = Instant::now();
    let mut model = TrainedModel::build(cfg)?;
    let o = &cfg.optim;
    let mut optim =
        OptimizerState::new(model.params(), o.base_lr, o.epochs).with_momentum(o.momentum, o.weight_decay);
    let pseudo: Vec<Vec<BBox>> = train.iter().map(Sample::pseudo_boxes).collect();
    let gts = ground_truths(test);
    let k_multi = cfg.eval.k_multi();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(o.epochs);
    let mut step = 0u64;

    for epoch in 0..o.epochs {
        optim.epoch = epoch;
        let lr = optim.current_lr()?;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 << 32 | epoch as u64)));
        let (mut sup, mut unsup, mut total, mut counted) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(o.batch_size) {
            let batch: Vec<(&Image, &[BBox])> = idx.iter().map(|&i| (&train[i].image, pseudo[i].as_slice())).collect();
            match &mut model {
                TrainedModel::Bcd(m) => {
                    let l = m.train_step(&batch, derive_seed(cfg.seed, step), &mut optim, lr)?;
                    sup += l.sup;
                    unsup += l.unsup;
                    total += l.total;
                    counted += 1;
                }
                TrainedModel::Scr(m) => {
                    if let Some(l) = m.train_step(&batch, &mut optim, lr)? {
                        sup += l;
                        total += l;
                        counted += 1;
                    }
                }
            }
            step += 1;
        }
        let n = counted.max(1) as f64;
        let preds = model.predict_records(test, &cfg.eval)?;
        let m = evaluate(&gts, &preds, k_multi)?;
        epochs.push(EpochRecord {
            epoch,
            sup: sup / n,
            unsup: unsup / n,
            total: total / n,
            gtknown_single: m.gtknown_single,
            gtknown_multi: m.gtknown_multi,
        });
    }

    let preds = model.predict_records(test, &cfg.eval)?;
    let final_metrics = evaluate(&gts, &preds, k_multi)?;
    let record = RunRecord {
        model: cfg.model,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        epochs,
        final_metrics,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((model, record))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.txt";
    pub const RECORD: &str = "record.csv";
    pub const METRICS: &str = "metrics.csv";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const SUMMARY: &str = "summary.txt";
    pub const WALL_TIME: &str = "wall_time.txt";
}

/// Persist a finished run: effective config, per-epoch record, final
/// metrics, test predictions, checkpoint and summary.
pub fn write_run(cfg: &RunConfig, model: &TrainedModel, record: &RunRecord, test: &[Sample]) -> Result<()> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(files::CONFIG), cfg.to_text())?;
    write(&dir.join(files::RECORD), record.to_csv())?;
    let preds = model.predict_records(test, &cfg.eval)?;
    write(&dir.join(files::METRICS), metrics_csv(&ground_truths(test), &preds, &cfg.eval.ks)?)?;
    write_predictions(&dir.join(files::PREDICTIONS), &preds)?;
    checkpoint::save(&dir.join(files::CHECKPOINT), model.params())?;
    write(
        &dir.join(files::SUMMARY),
        format!(
            "model={}\nseed={}\nconfig_hash={}\nepochs={}\n",
            record.model,
            record.seed,
            record.config_hash,
            record.epochs.len()
        ),
    )?;
    write(&dir.join(files::WALL_TIME), format!("{:.3}\n", record.wall_time))
}

pub fn load_split(data_dir: &Path, split: Split) -> Result<Vec<Sample>> {
    Manifest::load(&manifest_path(data_dir, split))?.samples()
}

/// Train on the dataset in `cfg.data_dir` and write the run to `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let train = load_split(&cfg.data_dir, Split::Train)?;
    let test = load_split(&cfg.data_dir, Split::Test)?;
    let (model, record) = train_samples(cfg, &train, &test)?;
    write_run(cfg, &model, &record, &test)?;
    Ok(record)
}
