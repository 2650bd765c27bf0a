use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hofit::fitter::StagePlan;
use hofit_cli::{cmd_eval, cmd_fit, cmd_synth, cmd_track, CliError, EvalArgs, FitArgs, SynthArgs, TrackArgs};

#[derive(Parser)]
#[command(name = "hofit", version, about = "Hand-object pose fitting from monocular clip evidence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    CoarseOnly,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip with ground truth.
    Synth {
        /// Scene description (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Link per-frame detections into tracks.
    Track {
        /// Evidence file, or a clip directory containing evidence.json.
        #[arg(long)]
        evidence: PathBuf,
        /// Tracker configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit hand and object poses to a clip.
    Fit {
        /// Clip directory.
        #[arg(long)]
        scene: PathBuf,
        /// Fit configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_enum)]
        stage: Option<Stage>,
        /// Loss weight overrides such as `col=0` or `lambda_smooth=100`.
        #[arg(long, num_args = 1..)]
        weights_override: Vec<String>,
        /// Start from this state instead of initializing from the evidence.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Compare a fitted state against ground truth.
    Eval {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Clip directory with the object mesh and hand models.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        sdf_resolution: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&SynthArgs { config, out, seed }),
        Command::Track { evidence, config, out } => {
            let file = cmd_track(&TrackArgs { evidence, config, out })?;
            let imputed: usize = file
                .tracks
                .iter()
                .map(|t| t.boxes.iter().filter(|b| b.imputed).count())
                .sum();
            println!("{} track(s), {imputed} imputed box(es)", file.tracks.len());
            Ok(())
        }
        Command::Fit {
            scene,
            config,
            out,
            seed,
            jobs,
            stage,
            weights_override,
            init,
        } => {
            let stage = stage.map(|s| match s {
                Stage::CoarseOnly => StagePlan::CoarseOnly,
                Stage::Full => StagePlan::Full,
            });
            let result = cmd_fit(&FitArgs {
                scene,
                config,
                out,
                seed,
                jobs,
                stage,
                weights_override,
                init,
            })?;
            if let Some(last) = result.stage_final.last() {
                println!("final loss {:.6e} after {} steps", last.total, result.trace.len());
            }
            Ok(())
        }
        Command::Eval {
            result,
            gt,
            scene,
            out,
            sdf_resolution,
        } => {
            let report = cmd_eval(&EvalArgs {
                result,
                gt,
                scene,
                out,
                sdf_resolution,
            })?;
            let a = &report.aggregate;
            if let Some(v) = a.object_vertex_mean_distance {
                println!("object vertex mean distance {:.4} m", v);
            }
            if let Some(v) = a.hand_vertex_mean_distance {
                println!("hand vertex mean distance {:.4} m", v);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
