//! `coral` — experiment CLI: seeded training runs, correspondence
//! evaluation, correlation analysis, and plot-data export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coral_cli::analyze::run_analyze;
use coral_cli::config::RunConfig;
use coral_cli::evalcmd::{run_eval, EvalArgs};
use coral_cli::exit_code_for;
use coral_cli::plots::run_export_plots;
use coral_cli::runner::run_training;
use coral_core::model::PoseMode;
use coral_core::synth::WarpKind;
use coral_core::train::OptimizerKind;
use coral_core::CoralError;

#[derive(Parser)]
#[command(
    name = "coral",
    version,
    about = "Correspondence-alignment experiments on synthetic diptych tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy denoiser and log losses, metrics, and a checkpoint.
    Train(TrainCmd),
    /// Evaluate attention-derived correspondences of a checkpoint.
    EvalCorrespondence(EvalCmd),
    /// Correlate per-sample PCK with the held-out quality proxy.
    AnalyzeCorrelation(AnalyzeCmd),
    /// Export plot-ready CSV bundles from one or more run directories.
    ExportPlots(PlotsCmd),
}

#[derive(Args)]
struct TrainCmd {
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total training steps (a resumed run continues up to this count).
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long = "lambda-corr", default_value_t = 0.01)]
    lambda_corr: f64,
    #[arg(long = "lambda-ent", default_value_t = 0.1)]
    lambda_ent: f64,
    /// Feature-alignment baseline weight; > 0 adds projection heads.
    #[arg(long = "lambda-repa", default_value_t = 0.0)]
    lambda_repa: f64,
    /// Cycle-consistency threshold in cells.
    #[arg(long, default_value_t = 3.0)]
    gamma: f64,
    /// Headline PCK threshold in cells.
    #[arg(long, default_value_t = 16.0)]
    alpha: f64,
    #[arg(long = "pose-mode", default_value = "token", value_parser = parse_pose_mode)]
    pose_mode: PoseMode,
    /// on: renormalize person→garment rows before the soft argmax; off:
    /// raw weighted sum.
    #[arg(long = "renormalize-subattention", default_value = "on", value_parser = parse_on_off)]
    renormalize: bool,
    /// Number of training tasks.
    #[arg(long, default_value_t = 6)]
    tasks: usize,
    /// Descriptor noise level sigma for the training tasks.
    #[arg(long = "noise", default_value_t = 0.0)]
    noise_sigma: f64,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "adam", value_parser = parse_optimizer)]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Per-panel latent grid height.
    #[arg(long = "grid-height", default_value_t = 8)]
    grid_height: usize,
    #[arg(long = "grid-width", default_value_t = 8)]
    grid_width: usize,
    #[arg(long = "channels", default_value_t = 4)]
    channels: usize,
    #[arg(long = "model-dim", default_value_t = 64)]
    model_dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long = "ffn-dim", default_value_t = 128)]
    ffn_dim: usize,
    #[arg(long = "context-tokens", default_value_t = 0)]
    context_tokens: usize,
    /// Rotary-embedding base frequency; smaller values suit smaller grids.
    #[arg(long = "rope-base", default_value_t = 100.0)]
    rope_base: f64,
    #[arg(long, default_value = "block-shuffle", value_parser = parse_warp)]
    warp: WarpKind,
    #[arg(long = "warp-amplitude", default_value_t = 2.0)]
    warp_amplitude: f64,
    #[arg(long = "mask-density", default_value_t = 0.75)]
    mask_density: f64,
    #[arg(long = "eval-every", default_value_t = 100)]
    eval_every: u64,
    #[arg(long = "eval-tasks", default_value_t = 8)]
    eval_tasks: usize,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "noise", default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long = "mask-density", default_value_t = 0.75)]
    mask_density: f64,
    #[arg(long, default_value_t = 3.0)]
    gamma: f64,
    #[arg(long, default_value_t = 16.0)]
    alpha: f64,
    /// Comma-separated evaluation timesteps.
    #[arg(long, default_value = "0.25,0.5,0.75", value_parser = parse_timesteps)]
    timesteps: Timesteps,
    /// Also export every head/layer attention map as CORD grids.
    #[arg(long = "dump-attention", default_value_t = false)]
    dump_attention: bool,
}

#[derive(Clone)]
struct Timesteps(Vec<f64>);

#[derive(Args)]
struct AnalyzeCmd {
    /// Per-sample CSV produced by eval-correspondence.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10000)]
    permutations: usize,
}

#[derive(Args)]
struct PlotsCmd {
    #[arg(long)]
    out: PathBuf,
    /// Run directories to export.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

fn parse_pose_mode(s: &str) -> Result<PoseMode, String> {
    match s {
        "token" => Ok(PoseMode::Token),
        "channel" => Ok(PoseMode::Channel),
        "none" => Ok(PoseMode::None),
        other => Err(format!("unknown pose mode {other:?} (token|channel|none)")),
    }
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on|off, got {other:?}")),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => Err(format!("unknown optimizer {other:?} (adam|sgd)")),
    }
}

fn parse_warp(s: &str) -> Result<WarpKind, String> {
    match s {
        "permutation" => Ok(WarpKind::Permutation),
        "block-shuffle" => Ok(WarpKind::BlockShuffle),
        "smooth-warp" => Ok(WarpKind::SmoothWarp),
        other => Err(format!(
            "unknown warp kind {other:?} (permutation|block-shuffle|smooth-warp)"
        )),
    }
}

fn parse_timesteps(s: &str) -> Result<Timesteps, String> {
    let values: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(Timesteps(v)),
        Ok(_) => Err("need at least one timestep".into()),
        Err(e) => Err(format!("bad timestep list: {e}")),
    }
}

#[allow(clippy::field_reassign_with_default)]
fn train_config(cmd: &TrainCmd) -> RunConfig {
    let mut config = RunConfig::default();
    config.seed = cmd.seed;
    config.steps = cmd.steps;
    config.batch = cmd.batch;
    config.optimizer = cmd.optimizer;
    config.lr = cmd.lr;
    config.weights.lambda_corr = cmd.lambda_corr;
    config.weights.lambda_ent = cmd.lambda_ent;
    config.weights.lambda_repa = cmd.lambda_repa;
    config.gamma = cmd.gamma;
    config.alpha = cmd.alpha;
    config.soft_mode = if cmd.renormalize {
        coral_core::attention::SoftArgmaxMode::Renormalized
    } else {
        coral_core::attention::SoftArgmaxMode::Raw
    };
    config.model.latent_height = cmd.grid_height;
    config.model.latent_width = cmd.grid_width;
    config.model.latent_channels = cmd.channels;
    config.model.model_dim = cmd.model_dim;
    config.model.heads = cmd.heads;
    config.model.layers = cmd.layers;
    config.model.ffn_dim = cmd.ffn_dim;
    config.model.pose_mode = cmd.pose_mode;
    config.model.context_tokens = cmd.context_tokens;
    config.model.rope_base = cmd.rope_base;
    config.model.repa_heads = cmd.lambda_repa > 0.0;
    config.task.warp = cmd.warp;
    config.task.warp_amplitude = cmd.warp_amplitude;
    config.task.noise_sigma = cmd.noise_sigma;
    config.task.mask_density = cmd.mask_density;
    config.tasks = cmd.tasks;
    config.eval_tasks = cmd.eval_tasks;
    config.eval_every = cmd.eval_every;
    config.normalized()
}

fn run(cli: Cli) -> Result<(), CoralError> {
    match cli.command {
        Command::Train(cmd) => {
            let config = train_config(&cmd);
            let outcome = run_training(&config, &cmd.out, cmd.resume.as_deref())?;
            match &outcome.final_metrics {
                Some(m) => println!(
                    "run complete: {} steps, pck(a=1/2/4) = {:.4}/{:.4}/{:.4}, mean entropy {:.4} -> {}",
                    outcome.completed_steps,
                    m.pck[0],
                    m.pck[1],
                    m.pck[2],
                    m.mean_entropy,
                    outcome.run_dir.display()
                ),
                None => println!(
                    "run complete: {} steps (no evaluation points) -> {}",
                    outcome.completed_steps,
                    outcome.run_dir.display()
                ),
            }
            Ok(())
        }
        Command::EvalCorrespondence(cmd) => {
            let args = EvalArgs {
                checkpoint: cmd.checkpoint,
                out: cmd.out,
                tasks: cmd.tasks,
                seed: cmd.seed,
                noise_sigma: cmd.noise_sigma,
                mask_density: cmd.mask_density,
                gamma: cmd.gamma,
                alpha: cmd.alpha,
                timesteps: cmd.timesteps.0,
                dump_attention: cmd.dump_attention,
            };
            let report = run_eval(&args)?;
            println!(
                "eval complete: {} tasks, pck(alpha={}) = {:.4}, mean entropy {:.4} -> {}",
                report.tasks,
                report.alpha,
                report.mean_pck_alpha,
                report.mean_entropy,
                args.out.display()
            );
            Ok(())
        }
        Command::AnalyzeCorrelation(cmd) => {
            let report = run_analyze(&cmd.input, &cmd.out, cmd.seed, cmd.permutations)?;
            println!(
                "correlation: r = {:.4}, one-sided p(negative) = {:.5} over {} samples",
                report.r, report.p_negative, report.n
            );
            Ok(())
        }
        Command::ExportPlots(cmd) => {
            let bundle = run_export_plots(&cmd.runs, &cmd.out)?;
            println!(
                "exported {} plot files -> {}",
                bundle.files.len(),
                cmd.out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CORAL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code: u8 = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
