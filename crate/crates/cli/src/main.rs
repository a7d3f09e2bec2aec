//! Single entry point wiring the library together: dataset generation,
//! training, inference, evaluation, a color-ratio-map demo, and the
//! numerical self-check suite.
//!
//! Every run is deterministic given `--seed` (all randomness flows from
//! one u64 through a splittable (seed, purpose-tag, index) scheme) and
//! records its fully-resolved configuration as JSON into its output
//! directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use llsf_core::checkpoint::{Checkpoint, FORMAT_VERSION};
use llsf_core::crmap::cr_map;
use llsf_core::degrade::generate_dataset;
use llsf_core::imageio::{load_png, save_png};
use llsf_core::metrics::{psnr, ssim, ImageMetrics, MetricReport};
use llsf_core::params::ParamStore;
use llsf_core::selfcheck;
use llsf_core::train::{infer, train_loop, AdamState, Model, StepLog, TrainConfig};
use llsf_core::{Scalar, Tensor};

fn version_string() -> &'static str {
    Box::leak(
        format!(
            "{} (checkpoint format v{FORMAT_VERSION})",
            env!("CARGO_PKG_VERSION")
        )
        .into_boxed_str(),
    )
}

#[derive(Parser)]
#[command(
    name = "llsf",
    version = version_string(),
    about = "Joint low-light enhancement and super-resolution via a conditional normalizing flow",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// Master seed; every random draw in the run derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision for model computations.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// Worker threads (the current implementation is single-threaded; any
    /// value is accepted for forward compatibility and recorded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Degrade a directory of normal-light PNGs into paired LR/HR data.
    GenData {
        /// Directory of source PNGs.
        #[arg(long = "in")]
        in_dir: PathBuf,
        /// Output directory for {id}_lr.png / {id}_hr.png and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Super-resolution factor.
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..=4))]
        scale: u64,
        /// Number of pairs to generate (sources are cycled).
        #[arg(long)]
        count: usize,
        /// Skip the Bayer mosaic/demosaic stage of the synthetic ISP.
        #[arg(long)]
        no_mosaic: bool,
    },
    /// Train the flow + encoder on a generated dataset.
    Train {
        /// JSON training configuration (defaults applied for absent keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory from `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path; the CSV log and resolved config are
        /// written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore an HR normal-light image from an LR low-light input.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        in_path: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute PSNR/SSIM between same-named PNGs in two directories.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the color ratio map of a PNG and print channel-sum statistics.
    CrmapDemo {
        #[arg(long = "in")]
        in_path: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all numerical invariant suites and print a pass/fail table.
    Selfcheck {
        /// Optional path for the JSON report (printed to stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Writes the fully-resolved run configuration into the output directory.
fn emit_config(dir: &Path, name: &str, cfg: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(format!("{name}-config.json"));
    std::fs::write(&path, serde_json::to_string_pretty(cfg)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn out_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    let precision = cli.precision;
    let threads = cli.threads;
    match cli.cmd {
        Cmd::GenData {
            in_dir,
            out,
            scale,
            count,
            no_mosaic,
        } => {
            if scale == 3 {
                bail!("--scale must be 2 or 4");
            }
            emit_config(
                &out,
                "gen-data",
                &json!({
                    "in": in_dir, "out": out, "scale": scale, "count": count,
                    "mosaic": !no_mosaic, "seed": seed, "threads": threads,
                }),
            )?;
            let (manifest, skipped) =
                generate_dataset(&in_dir, &out, scale as usize, count, seed, !no_mosaic)?;
            for s in &skipped {
                eprintln!("warning: skipped unreadable {s}");
            }
            println!(
                "wrote {} pairs to {} (manifest.json, scale x{scale}, seed {seed})",
                manifest.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { config, data, out } => {
            let mut cfg: TrainConfig = match &config {
                Some(p) => serde_json::from_str(
                    &std::fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?,
                )
                .with_context(|| format!("parsing {}", p.display()))?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = out_dir(&out);
            emit_config(
                &dir,
                "train",
                &json!({
                    "config": cfg, "data": data, "out": out,
                    "precision": precision.as_str(), "threads": threads,
                }),
            )?;
            match precision {
                Precision::F32 => train_cmd::<f32>(&cfg, &data, &out),
                Precision::F64 => train_cmd::<f64>(&cfg, &data, &out),
            }?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Infer {
            ckpt,
            in_path,
            out,
        } => {
            emit_config(
                &out_dir(&out),
                "infer",
                &json!({
                    "ckpt": ckpt, "in": in_path, "out": out,
                    "precision": precision.as_str(), "seed": seed, "threads": threads,
                }),
            )?;
            match precision {
                Precision::F32 => infer_cmd::<f32>(&ckpt, &in_path, &out),
                Precision::F64 => infer_cmd::<f64>(&ckpt, &in_path, &out),
            }?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { pred, gt, out } => {
            emit_config(
                &out_dir(&out),
                "eval",
                &json!({
                    "pred": pred, "gt": gt, "out": out, "threads": threads,
                }),
            )?;
            let report = eval_cmd(&pred, &gt)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{} images: mean PSNR {:.2} dB, mean SSIM {:.4}",
                report.per_image.len(),
                report.mean_psnr_db,
                report.mean_ssim
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::CrmapDemo { in_path, out } => {
            emit_config(
                &out_dir(&out),
                "crmap-demo",
                &json!({ "in": in_path, "out": out }),
            )?;
            let img: Tensor<f64> = load_png(&in_path)?;
            let cr = cr_map(&img)?;
            save_png(&out, &cr)?;
            let s = img.shape();
            let hw = s[2] * s[3];
            let d = cr.data();
            let (mut lo, mut hi, mut acc) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for p in 0..hw {
                let sum: f64 = d[p] + d[hw + p] + d[2 * hw + p];
                lo = lo.min(sum);
                hi = hi.max(sum);
                acc += sum;
            }
            println!(
                "ratio map {}x{}: channel sums min {lo:.6} mean {:.6} max {hi:.6}",
                s[3],
                s[2],
                acc / hw as f64
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Selfcheck { out } => {
            let report = selfcheck::run(seed, None);
            println!("{:<24} {:>12} {:>10}  result", "suite", "measured", "threshold");
            for s in &report.suites {
                println!(
                    "{:<24} {:>12.3e} {:>10.0e}  {}",
                    s.name,
                    s.measured,
                    s.threshold,
                    if s.pass { "pass" } else { "FAIL" }
                );
            }
            let json = selfcheck::report_json(&report)?;
            match &out {
                Some(p) => {
                    std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?
                }
                None => println!("{json}"),
            }
            if report.pass {
                println!("all suites passed");
                Ok(ExitCode::SUCCESS)
            } else {
                let failing: Vec<&str> = report
                    .suites
                    .iter()
                    .filter(|s| !s.pass)
                    .map(|s| s.name.as_str())
                    .collect();
                eprintln!("failing invariants: {}", failing.join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
    }
}

fn train_cmd<T: Scalar>(cfg: &TrainConfig, data: &Path, out: &Path) -> Result<()> {
    let pairs = llsf_core::train::load_pairs::<T>(data)?;
    let model = Model::desk(cfg.scale)?;
    let mut store: ParamStore<T> = ParamStore::new();
    model.init_params(&mut store, cfg.seed)?;
    let mut state = AdamState::new();
    let mut csv = String::from("step,lr,nll,l1,total\n");
    let mut last: Option<StepLog> = None;
    let log = train_loop(&model, &mut store, &mut state, cfg, &pairs, |r| {
        if r.step % 100 == 0 {
            println!(
                "step {:>6}  lr {:.2e}  nll {:>10.4}  l1 {:>8.4}  total {:>10.4}",
                r.step, r.lr, r.nll, r.l1, r.total
            );
        }
    })?;
    for r in &log {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.lr, r.nll, r.l1, r.total
        ));
        last = Some(*r);
    }
    let csv_path = out.with_extension("csv");
    std::fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    model.to_checkpoint(&store, &state).save(out)?;
    if let Some(r) = last {
        println!(
            "finished at step {} (total loss {:.4}); checkpoint {}, log {}",
            r.step,
            r.total,
            out.display(),
            csv_path.display()
        );
    }
    Ok(())
}

fn infer_cmd<T: Scalar>(ckpt: &Path, in_path: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (model, store, _state) = Model::from_checkpoint::<T>(&ck)?;
    let x: Tensor<T> = load_png(in_path)?;
    let y = infer(&model, &store, &x)?;
    save_png(out, &y)?;
    let s = y.shape();
    println!("wrote {} ({}x{})", out.display(), s[3], s[2]);
    Ok(())
}

fn eval_cmd(pred: &Path, gt: &Path) -> Result<MetricReport> {
    let mut names: Vec<String> = std::fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|r| r.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no PNGs in {}", pred.display());
    }
    let mut per_image = Vec::with_capacity(names.len());
    for name in names {
        let p: Tensor<f64> = load_png(&pred.join(&name))?;
        let g: Tensor<f64> = load_png(&gt.join(&name))
            .with_context(|| format!("ground truth for {name}"))?;
        per_image.push(ImageMetrics {
            id: name.trim_end_matches(".png").to_string(),
            psnr_db: psnr(&p, &g, 1.0)?,
            ssim: ssim(&p, &g)?,
        });
    }
    Ok(MetricReport::from_pairs(per_image))
}
