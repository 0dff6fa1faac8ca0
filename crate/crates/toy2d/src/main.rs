//! CLI for the 2D deformation experiment: dataset generation, training
//! runs, and CSV reports over finished runs.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;
use warpfield_toy2d::{
    emit_toy_figures, generate_toy_dataset, load_dataset, save_dataset, test_card, train_toy,
    AnnealMode, ToySceneConfig, ToyTrainConfig,
};

#[derive(Parser)]
#[command(name = "toy2d", about = "Single-template 2D deformation experiment")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded dataset of warped frames.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
        /// Optional base image PNG; defaults to the built-in test card.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Swirl strength range in radians (0 disables the distortion).
        #[arg(long, default_value_t = 0.8)]
        swirl: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Deformation kind: "trans" or "se2".
        #[arg(long, default_value = "se2")]
        kind: String,
        /// Annealing: "fixed:<m>" or "c2f".
        #[arg(long, default_value = "c2f")]
        anneal: String,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 512)]
        batch: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Skip writing per-frame figure PNGs.
        #[arg(long, default_value_t = false)]
        no_figures: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect metrics of finished runs into one CSV.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Serialize)]
struct RunMetrics {
    kind: String,
    anneal: String,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    mean_mse: f64,
    per_frame_mse: Vec<f64>,
    final_loss: f64,
}

fn parse_anneal(s: &str) -> Result<AnnealMode> {
    if s == "c2f" {
        return Ok(AnnealMode::CoarseToFine {
            bands: 6,
            fraction: 0.8,
        });
    }
    if let Some(m) = s.strip_prefix("fixed:") {
        return Ok(AnnealMode::Fixed(m.parse().context("fixed:<m> wants an integer")?));
    }
    bail!("anneal must be 'c2f' or 'fixed:<m>', got '{s}'")
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen {
            seed,
            frames,
            res,
            base,
            swirl,
            out,
        } => {
            let base_img = match base {
                Some(p) => warpfield_core::img::load_png_rgb(&p)
                    .with_context(|| format!("loading base image {}", p.display()))?,
                None => test_card(res),
            };
            let cfg = ToySceneConfig {
                n_frames: frames,
                resolution: res,
                swirl_range: swirl,
                seed,
                ..ToySceneConfig::default()
            };
            let scene = generate_toy_dataset(base_img, &cfg);
            save_dataset(&scene, &out)?;
            println!(
                "wrote {} frames at {}x{} to {}",
                frames,
                res,
                res,
                out.display()
            );
        }
        Cmd::Train {
            data,
            kind,
            anneal,
            steps,
            batch,
            lr,
            seed,
            no_figures,
            out,
        } => {
            let scene = load_dataset(&data)?;
            let rigid = match kind.as_str() {
                "se2" => true,
                "trans" => false,
                other => bail!("kind must be 'se2' or 'trans', got '{other}'"),
            };
            let cfg = ToyTrainConfig {
                rigid,
                anneal: parse_anneal(&anneal)?,
                steps,
                batch,
                lr,
                seed,
                ..ToyTrainConfig::default()
            };
            let started = std::time::Instant::now();
            let run = train_toy(&scene, &cfg)?;
            let took = started.elapsed();
            std::fs::create_dir_all(&out)?;
            if !no_figures {
                emit_toy_figures(&run.model, &scene, &out)?;
            }
            let metrics = RunMetrics {
                kind: kind.clone(),
                anneal: anneal.clone(),
                steps,
                batch,
                lr,
                seed,
                mean_mse: run.mean_mse,
                per_frame_mse: run.per_frame_mse.clone(),
                final_loss: *run.loss_curve.last().unwrap_or(&f64::NAN),
            };
            std::fs::write(
                out.join("metrics.json"),
                serde_json::to_string_pretty(&metrics)?,
            )?;
            std::fs::write(
                out.join("run_manifest.json"),
                serde_json::to_string_pretty(&cfg)?,
            )?;
            println!(
                "{} / {}: mean mse {:.6} after {} steps in {:.1}s",
                kind,
                anneal,
                run.mean_mse,
                steps,
                took.as_secs_f64()
            );
        }
        Cmd::Report { runs, csv } => {
            let mut lines = vec!["run,kind,anneal,steps,mean_mse,final_loss".to_string()];
            for dir in &runs {
                let m: serde_json::Value = serde_json::from_str(
                    &std::fs::read_to_string(dir.join("metrics.json"))
                        .with_context(|| format!("reading {}/metrics.json", dir.display()))?,
                )?;
                lines.push(format!(
                    "{},{},{},{},{},{}",
                    dir.display(),
                    m["kind"].as_str().unwrap_or("?"),
                    m["anneal"].as_str().unwrap_or("?"),
                    m["steps"],
                    m["mean_mse"],
                    m["final_loss"]
                ));
            }
            std::fs::write(&csv, lines.join("\n") + "\n")?;
            println!("wrote {} rows to {}", runs.len(), csv.display());
        }
    }
    Ok(())
}
