use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::str::FromStr;

use super::config::RunConfig;
use super::train::{files, load_split, train_samples, write_run, EpochRecord, RunRecord, RECORD_HEADER};
use crate::error::{Error, Result};
use crate::evaluation::{metrics_csv, read_predictions, GroundTruth, MetricsReport};
use crate::geometry::BBox;
use crate::image::Image;
use crate::synthdata::{write_dataset, Manifest, Sample, Split};

/// Generate both splits into `cfg.data_dir` and echo the config there.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.data.validate()?;
    let paths = write_dataset(&cfg.data, &cfg.data_dir)?;
    let echo = cfg.data_dir.join(files::CONFIG);
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))?;
    Ok(paths)
}

/// Metrics CSV for a manifest and a predictions file.
pub fn cmd_eval(manifest: &Path, predictions: &Path, ks: &[usize]) -> Result<String> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("k", format!("{ks:?}: need values >= 1")));
    }
    let m = Manifest::load(manifest)?;
    let preds = read_predictions(predictions)?;
    let gts: Vec<GroundTruth<'_>> = m.records.iter().map(GroundTruth::from).collect();
    metrics_csv(&gts, &preds, ks)
}

/// Intensity of ground-truth outlines.
pub const GT_INTENSITY: u8 = 255;
/// Intensity of predicted-box outlines.
pub const PRED_INTENSITY: u8 = 128;

/// Pixel columns `x1..x2` and rows `y1..y2` covered by a box, clamped to
/// the image. `None` when the box misses the image.
fn pixel_span(b: &BBox, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
    let x0 = b.x1().floor().max(0.0) as usize;
    let y0 = b.y1().floor().max(0.0) as usize;
    let x1 = (b.x2().ceil() as usize).min(w);
    let y1 = (b.y2().ceil() as usize).min(h);
    (x0 < x1 && y0 < y1).then(|| (x0, y0, x1 - 1, y1 - 1))
}

/// Draw the 1-pixel perimeter of `b` onto its boundary rows and columns.
pub fn draw_outline(img: &mut Image, b: &BBox, value: u8) {
    let Some((x0, y0, x1, y1)) = pixel_span(b, img.width(), img.height()) else {
        return;
    };
    for x in x0..=x1 {
        img.put(x, y0, value);
        img.put(x, y1, value);
    }
    for y in y0..=y1 {
        img.put(x0, y, value);
        img.put(x1, y, value);
    }
}

/// Re-emit every manifest image with predicted and ground-truth outlines.
/// Images without a prediction record get ground truth only.
pub fn cmd_render_overlays(manifest: &Path, predictions: &Path, out_dir: &Path) -> Result<usize> {
    let m = Manifest::load(manifest)?;
    let preds = read_predictions(predictions)?;
    let by_id: HashMap<&str, _> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for rec in &m.records {
        let mut img = m.image(rec)?;
        if let Some(p) = by_id.get(rec.id.as_str()) {
            for b in &p.boxes {
                draw_outline(&mut img, &b.bbox, PRED_INTENSITY);
            }
        }
        for g in &rec.gt_boxes {
            draw_outline(&mut img, g, GT_INTENSITY);
        }
        img.save_ppm(&out_dir.join(format!("{}.ppm", rec.id)))?;
    }
    Ok(m.records.len())
}

/// Ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Eta,
    /// Values like `6:0.1` set `gamma` and `alpha` together.
    GammaAlpha,
    /// Sets both entropy thresholds.
    Tau,
    /// Positive-to-negative sampling ratio, `1:4`.
    Ratio,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Eta => "eta",
            SweepAxis::GammaAlpha => "gamma_alpha",
            SweepAxis::Tau => "tau",
            SweepAxis::Ratio => "ratio",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(SweepAxis::Eta),
            "gamma_alpha" => Ok(SweepAxis::GammaAlpha),
            "tau" => Ok(SweepAxis::Tau),
            "ratio" => Ok(SweepAxis::Ratio),
            other => Err(Error::invalid("axis", format!("unknown axis `{other}`"))),
        }
    }
}

impl SweepAxis {
    pub fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        match self {
            SweepAxis::Eta => cfg.set("loss.eta", value),
            SweepAxis::Tau => cfg.set("loss.tau", value),
            SweepAxis::Ratio => cfg.set("model.ratio", value),
            SweepAxis::GammaAlpha => {
                let (g, a) = value
                    .split_once(':')
                    .ok_or_else(|| Error::invalid("gamma_alpha", format!("expected GAMMA:ALPHA, got `{value}`")))?;
                cfg.set("loss.gamma", g)?;
                cfg.set("loss.alpha", a)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    /// `Err` holds the failure message of a run that did not finish.
    pub outcome: std::result::Result<RunRecord, String>,
}

/// How sweep runs execute.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Execution {
    #[default]
    Sequential,
    /// One worker process per run, at most `jobs` at a time. `exe` must
    /// accept `train --config PATH`.
    Processes { exe: PathBuf, jobs: usize },
}

pub const SWEEP_FILE: &str = "sweep.csv";
pub const CURVES_FILE: &str = "curves.csv";

fn run_dir(base: &Path, axis: SweepAxis, value: &str, seed: u64) -> PathBuf {
    let v: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    base.join(format!("{axis}={v}-seed{seed}"))
}

/// Validate every value and reserve every output path before any run.
fn plan(base: &RunConfig, axis: SweepAxis, values: &[String], seeds: &[u64]) -> Result<Vec<(String, u64, RunConfig)>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let mut seen = HashSet::new();
    for f in [SWEEP_FILE, CURVES_FILE] {
        let p = base.out_dir.join(f);
        if p.exists() {
            return Err(Error::PathCollision(p));
        }
    }
    let mut out = Vec::new();
    for v in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, v)?;
            cfg.seed = seed;
            cfg.out_dir = run_dir(&base.out_dir, axis, v, seed);
            cfg.validate()?;
            if cfg.out_dir.exists() || !seen.insert(cfg.out_dir.clone()) {
                return Err(Error::PathCollision(cfg.out_dir));
            }
            out.push((v.clone(), seed, cfg));
        }
    }
    Ok(out)
}

/// Run every `value x seed` combination on in-memory data and write the
/// aggregate tables. Individual failures are recorded, not raised.
pub fn sweep_samples(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    train: &[Sample],
    test: &[Sample],
) -> Result<Vec<SweepRun>> {
    let runs = plan(base, axis, values, seeds)?;
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let results = runs
        .into_iter()
        .map(|(value, seed, cfg)| {
            let outcome = train_samples(&cfg, train, test)
                .and_then(|(model, record)| write_run(&cfg, &model, &record, test).map(|_| record))
                .map_err(|e| e.to_string());
            SweepRun {
                value,
                seed,
                dir: cfg.out_dir,
                outcome,
            }
        })
        .collect::<Vec<_>>();
    write_tables(&base.out_dir, axis, &results)?;
    Ok(results)
}

/// Sweep over the dataset in `base.data_dir`.
pub fn cmd_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    exec: &Execution,
) -> Result<Vec<SweepRun>> {
    match exec {
        Execution::Sequential => {
            let train = load_split(&base.data_dir, Split::Train)?;
            let test = load_split(&base.data_dir, Split::Test)?;
            sweep_samples(base, axis, values, seeds, &train, &test)
        }
        Execution::Processes { exe, jobs } => {
            let runs = plan(base, axis, values, seeds)?;
            let results = run_workers(exe, (*jobs).max(1), runs)?;
            write_tables(&base.out_dir, axis, &results)?;
            Ok(results)
        }
    }
}

fn run_workers(exe: &Path, jobs: usize, runs: Vec<(String, u64, RunConfig)>) -> Result<Vec<SweepRun>> {
    let mut results: Vec<Option<SweepRun>> = vec![None; runs.len()];
    let mut active: Vec<(usize, Child)> = Vec::new();
    let mut pending = runs.iter().enumerate();
    loop {
        while active.len() < jobs {
            let Some((i, (_, _, cfg))) = pending.next() else { break };
            fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            let cfg_path = cfg.out_dir.join(files::CONFIG);
            fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
            let child = Command::new(exe)
                .arg("train")
                .arg("--config")
                .arg(&cfg_path)
                .stdout(std::process::Stdio::null())
                .spawn()
                .map_err(|e| Error::io(exe, e))?;
            active.push((i, child));
        }
        let Some((i, mut child)) = (!active.is_empty()).then(|| active.remove(0)) else { break };
        let status = child.wait().map_err(|e| Error::io(exe, e))?;
        let (value, seed, cfg) = &runs[i];
        let outcome = if status.success() {
            read_run(&cfg.out_dir).map_err(|e| e.to_string())
        } else {
            Err(format!("worker exited with {status}"))
        };
        results[i] = Some(SweepRun {
            value: value.clone(),
            seed: *seed,
            dir: cfg.out_dir.clone(),
            outcome,
        });
    }
    Ok(results.into_iter().map(|r| r.expect("every run joined")).collect())
}

/// Reload the record of a finished run directory.
pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let bad = |name: &str, line: usize, msg: String| Error::Parse {
        path: dir.join(name),
        line,
        msg,
    };

    let summary = read(files::SUMMARY)?;
    let fields: HashMap<&str, &str> = summary.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| bad(files::SUMMARY, 1, format!("missing `{k}`")))
    };
    let model = get("model")?.parse()?;
    let seed = get("seed")?
        .parse()
        .map_err(|_| bad(files::SUMMARY, 1, "bad seed".into()))?;
    let config_hash = get("config_hash")?.to_string();

    let record = read(files::RECORD)?;
    let mut lines = record.lines();
    if lines.next() != Some(RECORD_HEADER) {
        return Err(bad(files::RECORD, 1, "unexpected header".into()));
    }
    let epochs = lines
        .enumerate()
        .map(|(i, l)| {
            let v: Vec<&str> = l.split(',').collect();
            let num = |j: usize| -> Result<f64> {
                v.get(j)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(files::RECORD, i + 2, format!("bad field {j}")))
            };
            Ok(EpochRecord {
                epoch: num(0)? as usize,
                sup: num(1)?,
                unsup: num(2)?,
                total: num(3)?,
                gtknown_single: num(4)?,
                gtknown_multi: num(5)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let metrics = read(files::METRICS)?;
    let rows: HashMap<&str, (f64, usize)> = metrics
        .lines()
        .skip(1)
        .filter_map(|l| {
            let mut it = l.split(',');
            Some((it.next()?, (it.next()?.parse().ok()?, it.next()?.parse().ok()?)))
        })
        .collect();
    let multi_k = rows
        .keys()
        .filter_map(|k| k.strip_prefix("gtknown_k")?.parse::<usize>().ok())
        .max()
        .unwrap_or(1);
    let val = |k: &str| rows.get(k).map(|r| r.0).ok_or_else(|| bad(files::METRICS, 1, format!("missing `{k}`")));
    let final_metrics = MetricsReport {
        top1_loc: val("top1_loc")?,
        top5_loc_single: val("top5_loc_k1")?,
        top5_loc_multi: val(&format!("top5_loc_k{multi_k}"))?,
        gtknown_single: val("gtknown_k1")?,
        gtknown_multi: val(&format!("gtknown_k{multi_k}"))?,
        count: rows.get("top1_loc").map_or(0, |r| r.1),
    };
    let wall_time = read(files::WALL_TIME)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0.0);
    Ok(RunRecord {
        model,
        seed,
        config_hash,
        epochs,
        final_metrics,
        wall_time,
    })
}

pub const SWEEP_HEADER: &str =
    "axis,value,seed,status,epochs,final_total,top1_loc,top5_loc_single,top5_loc_multi,gtknown_single,gtknown_multi";
pub const CURVES_HEADER: &str = "axis,value,seed,epoch,sup,unsup,total,gtknown_single,gtknown_multi";

fn write_tables(dir: &Path, axis: SweepAxis, runs: &[SweepRun]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut table = format!("{SWEEP_HEADER}\n");
    let mut curves = format!("{CURVES_HEADER}\n");
    for r in runs {
        match &r.outcome {
            Ok(rec) => {
                let m = &rec.final_metrics;
                let last = rec.epochs.last().map_or(f64::NAN, |e| e.total);
                table.push_str(&format!(
                    "{axis},{},{},ok,{},{last:.9e},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    r.value,
                    r.seed,
                    rec.epochs.len(),
                    m.top1_loc,
                    m.top5_loc_single,
                    m.top5_loc_multi,
                    m.gtknown_single,
                    m.gtknown_multi
                ));
                for e in &rec.epochs {
                    curves.push_str(&format!(
                        "{axis},{},{},{},{:.9e},{:.9e},{:.9e},{:.4},{:.4}\n",
                        r.value, r.seed, e.epoch, e.sup, e.unsup, e.total, e.gtknown_single, e.gtknown_multi
                    ));
                }
            }
            Err(msg) => {
                let msg: String = msg.chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
                table.push_str(&format!("{axis},{},{},failed: {msg},0,,,,,,\n", r.value, r.seed));
            }
        }
    }
    for (name, text) in [(SWEEP_FILE, table), (CURVES_FILE, curves)] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
