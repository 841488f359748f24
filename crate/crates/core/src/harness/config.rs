use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::assignment::SampleRatio;
use crate::detector::{DetectorConfig, QualityKind};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::synthdata::DataConfig;

/// Which model a training run fits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Bcd,
    /// Detector trained on the scaled supervised loss alone.
    BcdNoWe,
    Scr,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Bcd => "bcd",
            ModelKind::BcdNoWe => "bcd-no-we",
            ModelKind::Scr => "scr",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bcd" => Ok(ModelKind::Bcd),
            "bcd-no-we" | "bcd_no_we" => Ok(ModelKind::BcdNoWe),
            "scr" => Ok(ModelKind::Scr),
            other => Err(Error::invalid("model", format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.004,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_outputs: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.0,
            nms_thresh: 0.5,
            max_outputs: 5,
            ks: vec![1, 5],
        }
    }
}

impl EvalConfig {
    /// Box budget of the multi-box metrics: the largest configured `k`.
    pub fn k_multi(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }
}

/// Complete description of a run. Every field has a `section.name` key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelKind,
    /// Directory holding `train.jsonl` and `test.jsonl`.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelKind::Bcd,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s)).collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one `section.name` key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.model" => self.model = v.parse()?,
            "run.data_dir" => self.data_dir = PathBuf::from(v),
            "run.out_dir" => self.out_dir = PathBuf::from(v),

            "data.seed" => self.data.seed = parse(key, v)?,
            "data.train_count" => self.data.train_count = parse(key, v)?,
            "data.test_count" => self.data.test_count = parse(key, v)?,
            "data.image_size" => {
                let s: usize = parse(key, v)?;
                self.data.scene.image_size = (s, s);
                self.detector.image_size = (s, s);
            }
            "data.channels" => {
                self.data.scene.channels = parse(key, v)?;
                self.detector.channels = self.data.scene.channels;
            }
            "data.min_objects" => self.data.scene.min_objects = parse(key, v)?,
            "data.max_objects" => self.data.scene.max_objects = parse(key, v)?,
            "data.min_size" => self.data.scene.min_size = parse(key, v)?,
            "data.max_size" => self.data.scene.max_size = parse(key, v)?,
            "data.num_classes" => self.data.scene.num_classes = parse(key, v)?,
            "data.pixel_noise" => self.data.scene.noise = parse(key, v)?,
            "data.max_distractors" => self.data.scene.max_distractors = parse(key, v)?,
            "data.jitter_sigma" => self.data.noise.jitter_sigma = parse(key, v)?,
            "data.wrong_box_prob" => self.data.noise.wrong_box_prob = parse(key, v)?,
            "data.drop_prob" => self.data.noise.drop_prob = parse(key, v)?,
            "data.top1_acc" => self.data.class_scores.top1_acc = parse(key, v)?,
            "data.top5_acc" => self.data.class_scores.top5_acc = parse(key, v)?,

            "model.widths" => self.detector.widths = parse_list(key, v)?,
            "model.anchor_scales" => self.detector.anchor_scales = parse_list(key, v)?,
            "model.anchor_ratios" => self.detector.anchor_ratios = parse_list(key, v)?,
            "model.quality" => {
                self.detector.quality = match v {
                    "none" => None,
                    other => Some(other.parse::<QualityKind>()?),
                }
            }
            "model.head_lr_mult" => self.detector.head_lr_mult = parse(key, v)?,
            "model.fg_thresh" => self.detector.fg_thresh = parse(key, v)?,
            "model.bg_thresh" => self.detector.bg_thresh = parse(key, v)?,
            "model.sample_size" => self.detector.sample_size = parse(key, v)?,
            "model.ratio" => self.detector.sample_ratio = v.parse::<SampleRatio>()?,

            "loss.lambda1" => self.loss.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.loss.lambda2 = parse(key, v)?,
            "loss.gamma" => self.loss.gamma = parse(key, v)?,
            "loss.alpha" => self.loss.alpha = parse(key, v)?,
            "loss.tau" => {
                let t: f64 = parse(key, v)?;
                self.loss.tau1 = t;
                self.loss.tau2 = t;
            }
            "loss.tau1" => self.loss.tau1 = parse(key, v)?,
            "loss.tau2" => self.loss.tau2 = parse(key, v)?,
            "loss.eta" => self.loss.eta = parse(key, v)?,
            "loss.reg" => self.loss.reg_kind = v.parse()?,
            "loss.smooth_l1_beta" => self.loss.smooth_l1_beta = parse(key, v)?,
            "loss.we_scope" => self.loss.we_scope = v.parse()?,

            "optim.base_lr" => self.optim.base_lr = parse(key, v)?,
            "optim.momentum" => self.optim.momentum = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.epochs" => self.optim.epochs = parse(key, v)?,
            "optim.batch_size" => self.optim.batch_size = parse(key, v)?,

            "eval.score_thresh" => self.eval.score_thresh = parse(key, v)?,
            "eval.nms_thresh" => self.eval.nms_thresh = parse(key, v)?,
            "eval.max_outputs" => self.eval.max_outputs = parse(key, v)?,
            "eval.k" => self.eval.ks = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
            self.set(k.trim(), v).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Every key with its effective value, in a fixed order. Feeding this
    /// back through [`RunConfig::apply_text`] reproduces the config.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let m = &self.detector;
        let l = &self.loss;
        let o = &self.optim;
        let e = &self.eval;
        let (w, _) = d.scene.image_size;
        let quality = m.quality.map_or("none".to_string(), |q| q.to_string());
        let lines = [
            format!("run.seed={}", self.seed),
            format!("run.model={}", self.model),
            format!("run.data_dir={}", self.data_dir.display()),
            format!("run.out_dir={}", self.out_dir.display()),
            format!("data.seed={}", d.seed),
            format!("data.train_count={}", d.train_count),
            format!("data.test_count={}", d.test_count),
            format!("data.image_size={w}"),
            format!("data.channels={}", d.scene.channels),
            format!("data.min_objects={}", d.scene.min_objects),
            format!("data.max_objects={}", d.scene.max_objects),
            format!("data.min_size={}", d.scene.min_size),
            format!("data.max_size={}", d.scene.max_size),
            format!("data.num_classes={}", d.scene.num_classes),
            format!("data.pixel_noise={}", d.scene.noise),
            format!("data.max_distractors={}", d.scene.max_distractors),
            format!("data.jitter_sigma={}", d.noise.jitter_sigma),
            format!("data.wrong_box_prob={}", d.noise.wrong_box_prob),
            format!("data.drop_prob={}", d.noise.drop_prob),
            format!("data.top1_acc={}", d.class_scores.top1_acc),
            format!("data.top5_acc={}", d.class_scores.top5_acc),
            format!("model.widths={}", join(&m.widths)),
            format!("model.anchor_scales={}", join(&m.anchor_scales)),
            format!("model.anchor_ratios={}", join(&m.anchor_ratios)),
            format!("model.quality={quality}"),
            format!("model.head_lr_mult={}", m.head_lr_mult),
            format!("model.fg_thresh={}", m.fg_thresh),
            format!("model.bg_thresh={}", m.bg_thresh),
            format!("model.sample_size={}", m.sample_size),
            format!("model.ratio={}", m.sample_ratio),
            format!("loss.lambda1={}", l.lambda1),
            format!("loss.lambda2={}", l.lambda2),
            format!("loss.gamma={}", l.gamma),
            format!("loss.alpha={}", l.alpha),
            format!("loss.tau1={}", l.tau1),
            format!("loss.tau2={}", l.tau2),
            format!("loss.eta={}", l.eta),
            format!("loss.reg={}", l.reg_kind),
            format!("loss.smooth_l1_beta={}", l.smooth_l1_beta),
            format!("loss.we_scope={}", l.we_scope),
            format!("optim.base_lr={}", o.base_lr),
            format!("optim.momentum={}", o.momentum),
            format!("optim.weight_decay={}", o.weight_decay),
            format!("optim.epochs={}", o.epochs),
            format!("optim.batch_size={}", o.batch_size),
            format!("eval.score_thresh={}", e.score_thresh),
            format!("eval.nms_thresh={}", e.nms_thresh),
            format!("eval.max_outputs={}", e.max_outputs),
            format!("eval.k={}", join(&e.ks)),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Hash of everything that influences results. Output paths are left
    /// out so identical runs in different directories share a hash.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("run.out_dir=") && !l.starts_with("run.data_dir="))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.detector.validate()?;
        self.loss.validate()?;
        if self.detector.image_size != self.data.scene.image_size || self.detector.channels != self.data.scene.channels {
            return Err(Error::Config("model and data disagree on image geometry".into()));
        }
        let o = &self.optim;
        if !(o.base_lr > 0.0) || o.epochs == 0 || o.batch_size == 0 {
            return Err(Error::Config(format!(
                "optimizer: base_lr {}, epochs {}, batch_size {}",
                o.base_lr, o.epochs, o.batch_size
            )));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "optimizer: momentum {}, weight_decay {}",
                o.momentum, o.weight_decay
            )));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.score_thresh) || !(0.0..=1.0).contains(&e.nms_thresh) {
            return Err(Error::Config(format!(
                "eval thresholds {} / {} outside [0, 1]",
                e.score_thresh, e.nms_thresh
            )));
        }
        if e.max_outputs == 0 || e.ks.is_empty() || e.ks.contains(&0) {
            return Err(Error::Config(format!(
                "eval: max_outputs {}, k {:?}",
                e.max_outputs, e.ks
            )));
        }
        Ok(())
    }
}
