mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pyragen::corpus::ImageSource;
use pyragen::evalkit::{
    contact_sheet, evaluate, gradcheck_suite, hole_sweep, parse_ratio_range, resolution_sweep, run_ablation, write_csv,
    write_json, AblationVariant, EvalMasks, MaskMode, MetricRow,
};
use pyragen::generator::PyramidGenerator;
use pyragen::imaging::{HoleMask, RasterImage};
use pyragen::trainer::{checkpoint_dir, load_checkpoint, load_generator, save_checkpoint, train, TrainState};
use pyragen::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "pyragen", version, about = "Pyramid generator for image inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct OutArg {
    /// Output directory; falls back to `out_dir` in the config, then $PYRAGEN_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the configuration differs from the checkpoint's.
        #[arg(long)]
        force_resume: bool,
    },
    /// Fill the holes of one image.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Single-channel PNG, white marks holes.
        #[arg(long)]
        mask: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics for one mask setting.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value = "center")]
        mask_mode: MaskMode,
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
        /// Seed of the free-form evaluation masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Centre-mask hole-ratio sweep.
    SweepHole {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value = "0.15:0.55:0.1")]
        ratios: String,
    },
    /// Evaluation at several image sizes with a 25% centre mask.
    SweepRes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Comma-separated sizes; defaults to 1x, 2x and 4x the training size.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Train and evaluate ablation variants under the config's budget.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Variant name; repeat for several. Defaults to all.
        #[arg(long = "variant")]
        variants: Vec<AblationVariant>,
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference checks of every differentiable block.
    Gradcheck {
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_dir(arg: &OutArg, config: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = arg
        .out
        .clone()
        .or_else(|| config.and_then(|c| c.out_dir.clone()))
        .or_else(|| std::env::var_os("PYRAGEN_OUT").map(PathBuf::from))
        .ok_or_else(|| Error::Config("no output directory: pass --out, set out_dir or PYRAGEN_OUT".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            out,
            seed,
            resume,
            force_resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let dir = out_dir(&out, Some(&cfg))?;
            cmd_train(&cfg, &dir, resume.as_deref(), force_resume)
        }
        Command::Inpaint {
            checkpoint,
            image,
            mask,
            out,
        } => cmd_inpaint(&checkpoint, &image, &mask, &out),
        Command::Eval {
            config,
            checkpoint,
            out,
            mask_mode,
            ratio,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&out, Some(&cfg))?;
            let (tc, gen) = load_generator(&checkpoint)?;
            let eval = cfg.eval_set(tc.top_resolution)?;
            let masks = match mask_mode {
                MaskMode::Center => EvalMasks::center(ratio),
                MaskMode::Freeform => EvalMasks::freeform(seed),
            };
            let row = evaluate(&gen, eval.as_ref(), &masks, &cfg.label)?;
            write_sheet(&gen, eval.as_ref(), &masks, cfg.reporting.preview_images, &dir.join("eval_sheet.png"))?;
            emit(&[row], &dir, "eval")
        }
        Command::SweepHole {
            config,
            checkpoint,
            out,
            ratios,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&out, Some(&cfg))?;
            let ratios = parse_ratio_range(&ratios)?;
            let (tc, gen) = load_generator(&checkpoint)?;
            let eval = cfg.eval_set(tc.top_resolution)?;
            let rows = hole_sweep(&gen, eval.as_ref(), &ratios, &cfg.label)?;
            emit(&rows, &dir, "hole_sweep")
        }
        Command::SweepRes {
            config,
            checkpoint,
            out,
            sizes,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(&out, Some(&cfg))?;
            let (tc, gen) = load_generator(&checkpoint)?;
            let t = tc.top_resolution;
            let sizes = if sizes.is_empty() { vec![t, 2 * t, 4 * t] } else { sizes };
            let eval = cfg.eval_set(t)?;
            let rows = resolution_sweep(&gen, eval.as_ref(), &sizes, &cfg.label)?;
            emit(&rows, &dir, "resolution_sweep")
        }
        Command::Ablate {
            config,
            out,
            variants,
            ratio,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let dir = out_dir(&out, Some(&cfg))?;
            let variants = if variants.is_empty() { AblationVariant::all() } else { variants };
            cmd_ablate(&cfg, &variants, ratio, &dir)
        }
        Command::Gradcheck { out, seed } => {
            let dir = out_dir(&out, None)?;
            let rows = gradcheck_suite(seed)?;
            let path = dir.join("gradcheck.json");
            fs::write(&path, serde_json::to_string_pretty(&rows).expect("rows serialize")).map_err(io_err(&path))?;
            for r in &rows {
                println!(
                    "{:<32} max_rel {:.3e}  tol {:.0e}  {}",
                    r.block,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            match rows.iter().find(|r| !r.passed) {
                None => Ok(()),
                Some(r) => Err(Error::NonFinite {
                    step: 0,
                    detail: format!("gradient check of {} failed", r.block),
                }),
            }
        }
    }
}

fn cmd_train(cfg: &RunConfig, dir: &Path, resume: Option<&Path>, force: bool) -> Result<()> {
    let source = cfg.train_data.open(cfg.train.top_resolution, "train_data")?;
    let mut state = match resume {
        Some(ckpt) => load_checkpoint(ckpt, Some(&cfg.train), force)?,
        None => TrainState::new(cfg.train.clone())?,
    };
    let resolved = dir.join("config.toml");
    fs::write(&resolved, cfg.to_toml()).map_err(io_err(&resolved))?;
    let open = |name: &str| -> Result<BufWriter<File>> {
        let p = dir.join(name);
        let f = if resume.is_some() {
            OpenOptions::new().create(true).append(true).open(&p)
        } else {
            File::create(&p)
        };
        Ok(BufWriter::new(f.map_err(io_err(&p))?))
    };
    let mut log = open("train.jsonl")?;
    let mut timing = open("timing.jsonl")?;
    let samples = dir.join("samples");
    let rep = &cfg.reporting;
    let preview = EvalMasks::center(0.25);
    let total = state.config.steps;
    train(&mut state, source.as_ref(), Some(&mut log), Some(&mut timing), |st, report| {
        if rep.sample_every > 0 && (st.step % rep.sample_every == 0 || st.step == total) {
            fs::create_dir_all(&samples).map_err(io_err(&samples))?;
            let path = samples.join(format!("step-{:08}.png", st.step));
            write_sheet(&st.generator, source.as_ref(), &preview, rep.preview_images, &path)?;
        }
        if rep.checkpoint_every > 0 && st.step % rep.checkpoint_every == 0 && st.step < total {
            save_checkpoint(st, &checkpoint_dir(&dir.join("checkpoints"), st.step))?;
        }
        if st.step % 100 == 0 || st.step == total {
            eprintln!("step {:>7}  loss {:.4}", st.step, report.total_generator);
        }
        Ok(())
    })?;
    log.flush().map_err(io_err(dir))?;
    timing.flush().map_err(io_err(dir))?;
    save_checkpoint(&state, &dir.join("checkpoint"))?;
    eprintln!("checkpoint written to {}", dir.join("checkpoint").display());
    Ok(())
}

fn cmd_inpaint(checkpoint: &Path, image: &Path, mask: &Path, out: &Path) -> Result<()> {
    let (_, gen) = load_generator(checkpoint)?;
    let image = RasterImage::load_png(image)?;
    let mask = HoleMask::load_png(mask)?;
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::Argument(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    gen.inpaint(&image, &mask)?.save_png(out)
}

fn write_sheet(gen: &PyramidGenerator, source: &dyn ImageSource, masks: &EvalMasks, count: usize, path: &Path) -> Result<()> {
    let n = count.min(source.len());
    if n == 0 {
        return Ok(());
    }
    let samples = (0..n)
        .map(|i| {
            let truth = source.get(i)?;
            let mask = masks.mask(source.size(), i)?;
            let out = gen.inpaint(&truth, &mask)?;
            Ok((truth, mask, out))
        })
        .collect::<Result<Vec<_>>>()?;
    contact_sheet(&samples)?.save_png(path)
}

fn emit(rows: &[MetricRow], dir: &Path, stem: &str) -> Result<()> {
    write_csv(rows, &dir.join(format!("{stem}.csv")))?;
    write_json(rows, &dir.join(format!("{stem}.json")))?;
    print_rows(rows);
    Ok(())
}

fn print_rows(rows: &[MetricRow]) {
    for r in rows {
        println!(
            "{:<24} {:<8} ratio {:<5} size {:<5} l1 {:.4}  psnr {:.2}  ssim {:.4}",
            r.variant,
            r.mask_mode.name(),
            r.hole_ratio.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
            r.resolution,
            r.l1,
            r.psnr,
            r.ssim
        );
    }
}

#[derive(Serialize)]
struct AblationRecord {
    #[serde(flatten)]
    row: MetricRow,
    reference_ssim: Option<f64>,
    reference_psnr: Option<f64>,
    reference_l1: Option<f64>,
}

fn cmd_ablate(cfg: &RunConfig, variants: &[AblationVariant], ratio: f64, dir: &Path) -> Result<()> {
    let train_set = cfg.train_data.open(cfg.train.top_resolution, "train_data")?;
    let eval_set = cfg.eval_set(cfg.train.top_resolution)?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &v in variants {
        eprintln!("training {v}");
        for row in run_ablation(v, &cfg.train, train_set.as_ref(), eval_set.as_ref(), ratio)? {
            let r = v.reference();
            records.push(AblationRecord {
                row: row.clone(),
                reference_ssim: r.map(|r| r.0),
                reference_psnr: r.map(|r| r.1),
                reference_l1: r.map(|r| r.2),
            });
            rows.push(row);
        }
    }
    write_csv(&rows, &dir.join("ablation.csv"))?;
    let path = dir.join("ablation.json");
    fs::write(&path, serde_json::to_string_pretty(&records).expect("records serialize")).map_err(io_err(&path))?;
    print_rows(&rows);
    Ok(())
}
