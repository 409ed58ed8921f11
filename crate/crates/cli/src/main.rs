use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vin_core::harness::{
    run_ablation, run_eval, run_inspect_attention, run_profile, run_sample, run_training, AblationMode, Checkpoint,
    ExperimentConfig, SampleMode,
};
use vin_core::metrics::MetricParams;
use vin_core::Error;

#[derive(Parser)]
#[command(name = "vin", version, about = "Chunk-parallel video diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic moving-shapes set.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a clip from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "vin")]
        mode: String,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write PNG frames.
        #[arg(long)]
        png: bool,
    },
    /// Compute consistency metrics for video files.
    Eval {
        #[arg(required = true)]
        videos: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare the trained model against an ablated variant.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// FLOPs report and frame sweep.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Export encoder attention maps for a video.
    InspectAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        video: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn config_or_default(path: Option<&Path>) -> vin_core::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> vin_core::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = config_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let summary = run_training(&cfg, &cfg.out_dir)?;
            let last = summary.losses.last().map_or_else(|| "none".to_string(), |(_, l)| format!("{l:.6}"));
            println!(
                "steps={} final_loss={last} checkpoint={}",
                summary.losses.len(),
                summary.final_checkpoint.display()
            );
        }
        Command::Sample {
            checkpoint,
            mode,
            frames,
            seed,
            out,
            png,
        } => {
            let mode = SampleMode::parse(&mode)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let frames = frames.unwrap_or(ck.config.sample_frames);
            let path = run_sample(&ck, mode, frames, seed, &out, png)?;
            println!("{}", path.display());
        }
        Command::Eval { videos, out } => {
            let exec = vin_core::par::Execution::default();
            let (reports, agg) = run_eval(&videos, &out, MetricParams::default(), exec)?;
            for (p, r) in videos.iter().zip(&reports) {
                println!("{} mawe={} warp_error={:?}", p.display(), r.mawe, r.warp_error);
            }
            print!("{}", agg.to_text());
        }
        Command::Ablate { checkpoint, mode, out } => {
            let mode = AblationMode::parse(&mode)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let report = run_ablation(&ck, mode, MetricParams::default())?;
            std::fs::create_dir_all(&out)?;
            let csv = report.to_csv();
            std::fs::write(out.join(format!("ablation_{}.csv", mode.name())), &csv)?;
            print!("{csv}");
        }
        Command::Profile { config, out } => {
            let cfg = config_or_default(config.as_deref())?;
            cfg.validate()?;
            let p = run_profile(&cfg)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("profile.txt"), &p.report)?;
            std::fs::write(out.join("sweep.csv"), &p.csv)?;
            print!("{}", p.csv);
        }
        Command::InspectAttn { checkpoint, video, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let maps = run_inspect_attention(&ck, &video, &out)?;
            println!("keyframes={} maps={}", maps.keyframe_slices.len(), out.display());
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage message={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e: Error = e;
            eprintln!("error: kind={} message={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
