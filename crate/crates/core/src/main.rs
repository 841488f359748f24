use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wend::harness::{self, Execution, RunConfig, SweepAxis};

#[derive(Parser)]
#[command(name = "wend", about = "Noisy-pseudo-box detector training and localization metrics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra overrides, repeatable: --set loss.gamma=4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct LossFlags {
    #[arg(long, allow_negative_numbers = true)]
    eta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Sampling ratio POS:NEG.
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/test splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        loss: LossFlags,
    },
    /// Score a predictions file against a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Comma-separated box budgets.
        #[arg(long, default_value = "1,5", value_delimiter = ',')]
        k: Vec<usize>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One training run per axis value and seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        loss: LossFlags,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Run up to N worker processes at once.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Draw ground-truth and predicted boxes onto the manifest images.
    Render {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// File config, then flags, then `--set` overrides. `--out` names the
/// dataset directory for gen-data and the run directory otherwise.
fn build_config(common: &Common, loss: Option<&LossFlags>) -> wend::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        if loss.is_some() {
            cfg.out_dir = o.clone();
        } else {
            cfg.data_dir = o.clone();
        }
    }
    if let Some(l) = loss {
        if let Some(d) = &l.data {
            cfg.data_dir = d.clone();
        }
        let pairs = [
            ("loss.eta", l.eta.map(|v| v.to_string())),
            ("loss.gamma", l.gamma.map(|v| v.to_string())),
            ("loss.alpha", l.alpha.map(|v| v.to_string())),
            ("loss.tau", l.tau.map(|v| v.to_string())),
            ("model.ratio", l.ratio.clone()),
            ("run.model", l.model.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| wend::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> wend::Result<()> {
    match cli.cmd {
        Cmd::GenData { common } => {
            let cfg = build_config(&common, None)?;
            for p in harness::cmd_gen_data(&cfg)? {
                println!("{}", p.display());
            }
        }
        Cmd::Train { common, loss } => {
            let cfg = build_config(&common, Some(&loss))?;
            let rec = harness::cmd_train(&cfg)?;
            print!("{}", rec.to_csv());
            let m = rec.final_metrics;
            println!(
                "final: top1 {:.2} top5 {:.2}/{:.2} gt-known {:.2}/{:.2}",
                m.top1_loc, m.top5_loc_single, m.top5_loc_multi, m.gtknown_single, m.gtknown_multi
            );
        }
        Cmd::Eval {
            manifest,
            predictions,
            k,
            out,
        } => {
            let csv = harness::cmd_eval(&manifest, &predictions, &k)?;
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| wend::Error::Io { path: p, source: e })?,
                None => print!("{csv}"),
            }
        }
        Cmd::Sweep {
            common,
            loss,
            axis,
            values,
            seeds,
            jobs,
        } => {
            let cfg = build_config(&common, Some(&loss))?;
            let axis: SweepAxis = axis.parse()?;
            let exec = match jobs {
                Some(jobs) => Execution::Processes {
                    exe: std::env::current_exe().map_err(|e| wend::Error::Io {
                        path: PathBuf::from("wend"),
                        source: e,
                    })?,
                    jobs,
                },
                None => Execution::Sequential,
            };
            let runs = harness::cmd_sweep(&cfg, axis, &values, &seeds, &exec)?;
            let failed = runs.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "{} runs, {failed} failed; table at {}",
                runs.len(),
                cfg.out_dir.join(harness::SWEEP_FILE).display()
            );
        }
        Cmd::Render {
            manifest,
            predictions,
            out,
        } => {
            let n = harness::cmd_render_overlays(&manifest, &predictions, &out)?;
            println!("{n} overlays in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
