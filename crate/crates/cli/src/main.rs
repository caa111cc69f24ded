use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser};
use log::{error, info};
use splatpose::io::load_dataset;
use splatpose::pipeline::{
    run_evaluation, run_pipeline, synthetic_dataset, EvalMetrics, PipelineConfig, PipelineError, Stage, CONFIG_FILE,
};
use splatpose::synthetic::SyntheticSceneSpec;
use splatpose::Error;

/// Reconstructs a Gaussian scene and camera poses from unposed images.
///
/// Exit status: 0 success, 1 configuration error, 2 data error,
/// 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "splatpose", version)]
#[command(group(ArgGroup::new("input").required(true).args(["dataset", "synthetic"])))]
struct Args {
    /// Directory of images plus `intrinsics.txt` (optionally `reference.txt`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Generate a synthetic scene instead, e.g. `views=8,size=64,seed=3`.
    #[arg(long, value_name = "SPEC")]
    synthetic: Option<String>,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for every random choice; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip pose refinement during training (pose cutoff 0).
    #[arg(long)]
    init_only: bool,
    /// Evaluate a checkpoint directory (`cloud.ply`, `trajectory.txt`) without training.
    #[arg(long, value_name = "CHECKPOINT")]
    eval_only: Option<PathBuf>,
}

fn load_config(args: &Args) -> Result<PipelineConfig, PipelineError> {
    let at = |e| PipelineError::new(Stage::Config, e);
    let mut config = match (&args.config, &args.eval_only) {
        (Some(path), _) => PipelineConfig::from_file(path).map_err(at)?,
        (None, Some(ckpt)) if ckpt.join(CONFIG_FILE).is_file() => {
            PipelineConfig::from_file(&ckpt.join(CONFIG_FILE)).map_err(at)?
        }
        _ => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.set_seed(seed);
    }
    if args.init_only {
        config.train.pose_cutoff = 0;
    }
    config.validate().map_err(at)?;
    Ok(config)
}

fn print_metrics(m: &EvalMetrics) {
    println!(
        "PSNR {:.4}  SSIM {:.4}  ATE {:.6}  RPE {:.6} / {:.4} deg",
        m.psnr, m.ssim, m.ate, m.rpe_trans, m.rpe_rot_deg
    );
}

fn run(args: &Args) -> Result<(), PipelineError> {
    let config = load_config(args)?;
    let dataset = match (&args.dataset, &args.synthetic) {
        (Some(root), _) => load_dataset(root, config.split),
        (None, Some(spec)) => SyntheticSceneSpec::parse(spec)
            .map_err(|e| Error::Config(format!("--synthetic: {e}")))
            .and_then(|s| synthetic_dataset(&s, config.split)),
        (None, None) => unreachable!("clap requires an input"),
    }
    .map_err(|e| PipelineError::new(Stage::Load, e))?;
    info!(
        "{}: {} train / {} test images",
        dataset.name,
        dataset.train.len(),
        dataset.test.len()
    );

    if let Some(ckpt) = &args.eval_only {
        let evaluation = run_evaluation(&dataset, &config, ckpt, Some(&args.out))?;
        print_metrics(&evaluation.metrics);
    } else {
        let report = run_pipeline(&dataset, &config, Some(&args.out))?;
        println!(
            "registered {}/{} training images, {} Gaussians",
            report.registered.len(),
            dataset.train.len(),
            report.state.cloud.len()
        );
        print_metrics(&report.evaluation.metrics);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
