//! `eval-correspondence`: load a checkpoint, build a held-out task set,
//! measure attention-derived correspondence quality per layer/timestep,
//! and write a JSON report plus per-sample and per-query CSVs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use coral_core::attention::export_attention_maps;
use coral_core::error::{CoralError, Result};
use coral_core::matching::pck;
use coral_core::model::{build_diptych, load_checkpoint, ModelInputs, PoseMode};
use coral_core::rng::{derive_seed, STREAM_EVAL};
use coral_core::synth::{generate_task, SyntheticTask, TaskParams, WarpKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PCK_REPORT_ALPHAS;
use crate::evaluate::{eval_model_on_task, eval_noise, TaskEval};

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub tasks: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub mask_density: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub timesteps: Vec<f64>,
    pub dump_attention: bool,
}

impl Default for EvalArgs {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            out: PathBuf::new(),
            tasks: 16,
            seed: 0,
            noise_sigma: 0.0,
            mask_density: 0.75,
            gamma: crate::config::DEFAULT_GAMMA,
            alpha: crate::config::DEFAULT_ALPHA,
            timesteps: crate::config::DEFAULT_EVAL_TIMESTEPS.to_vec(),
            dump_attention: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_index: usize,
    pub warp: WarpKind,
    /// PCK against the true correspondences at the headline alpha.
    pub pck_alpha: f64,
    /// PCK at the fixed report alphas 1, 2, 4.
    pub pck_by_alpha: Vec<f64>,
    /// PCK against the reliability-filtered pseudo ground truth; absent
    /// when the cycle check kept no query.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pck_vs_pseudo: Option<f64>,
    pub reliable_fraction: f64,
    pub mean_entropy: f64,
    pub heldout_velocity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub checkpoint: String,
    pub tasks: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub timesteps: Vec<f64>,
    pub mean_pck_alpha: f64,
    /// Means at the fixed report alphas 1, 2, 4.
    pub mean_pck_by_alpha: Vec<f64>,
    pub mean_entropy: f64,
    pub mean_heldout_velocity: f64,
    pub per_task: Vec<TaskReport>,
}

pub const EVAL_SCHEMA: &str = "coral-eval/1";
pub const PER_SAMPLE_HEADER: &str = "task,pck,mean_entropy,heldout_velocity";
pub const PER_QUERY_HEADER: &str =
    "task,layer,timestep,query_x,query_y,pred_x,pred_y,gt_x,gt_y,correct";

/// Eval tasks cycle through the warp kinds so that per-sample difficulty
/// varies.
pub fn eval_task_params(
    base_seed: u64,
    index: usize,
    shape: (usize, usize, usize),
    noise_sigma: f64,
    mask_density: f64,
) -> TaskParams {
    let warp = match index % 3 {
        0 => WarpKind::BlockShuffle,
        1 => WarpKind::SmoothWarp,
        _ => WarpKind::Permutation,
    };
    TaskParams {
        seed: derive_seed(base_seed, STREAM_EVAL, index as u64),
        height: shape.0,
        width: shape.1,
        channels: shape.2,
        warp,
        warp_amplitude: 2.0,
        noise_sigma,
        mask_density,
    }
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalReport> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let shape = (
        model.config.latent_height,
        model.config.latent_width,
        model.config.latent_channels,
    );
    let canvas_shape = (shape.0, 2 * shape.1, shape.2);
    if args.tasks == 0 {
        return Err(CoralError::EmptyDomain("no eval tasks requested".into()));
    }
    let tasks: Vec<SyntheticTask> = (0..args.tasks)
        .map(|i| {
            generate_task(&eval_task_params(
                args.seed,
                i,
                shape,
                args.noise_sigma,
                args.mask_density,
            ))
        })
        .collect::<Result<_>>()?;

    let mut alphas = PCK_REPORT_ALPHAS.to_vec();
    alphas.push(args.alpha);

    let evals: Vec<(TaskEval, Option<f64>, f64)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| -> Result<(TaskEval, Option<f64>, f64)> {
            let noise = eval_noise(args.seed, i as u64, canvas_shape);
            let eval = eval_model_on_task(
                &model,
                task,
                i,
                &args.timesteps,
                &alphas,
                args.alpha,
                &noise,
            )?;
            // pseudo-GT comparison mirrors the reliability-filtered protocol
            let pseudo = task.pseudo_gt(args.gamma)?;
            let reliable_fraction = pseudo.reliable_count() as f64 / pseudo.len() as f64;
            let vs_pseudo = if pseudo.reliable_count() == 0 {
                None
            } else {
                // mean over the layer/timestep grid of PCK vs pseudo-GT
                let mut total = 0.0;
                let mut points = 0usize;
                let pose = match model.config.pose_mode {
                    PoseMode::None => None,
                    _ => Some(&task.pose),
                };
                for &t in &args.timesteps {
                    let (z_t, cond) =
                        build_diptych(&task.garment, &task.person, &task.m_e, t, &noise)?;
                    let pass = model.forward(&ModelInputs {
                        z_t: &z_t,
                        conditioning: &cond,
                        pose,
                    })?;
                    for l in 0..pass.layer_count() {
                        let mean = pass.attention(l).head_mean();
                        let sub = coral_core::attention::extract_sub_attention_from(
                            &mean,
                            &pass.sequence,
                            &task.m_p,
                            &task.m_g,
                        )?;
                        let hard = coral_core::attention::hard_correspondence(&sub)?;
                        total += pck(&hard, &pseudo, args.alpha)?;
                        points += 1;
                    }
                }
                Some(total / points as f64)
            };
            Ok((eval, vs_pseudo, reliable_fraction))
        })
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(&args.out)?;
    let mut per_sample = BufWriter::new(File::create(args.out.join("per_sample.csv"))?);
    writeln!(per_sample, "{PER_SAMPLE_HEADER}")?;
    let mut per_query = BufWriter::new(File::create(args.out.join("per_query.csv"))?);
    writeln!(per_query, "{PER_QUERY_HEADER}")?;

    let mut per_task = Vec::new();
    let mut mean_pck_alpha = 0.0;
    let mut mean_pck = [0.0; 3];
    let mut mean_entropy = 0.0;
    let mut mean_vel = 0.0;
    for ((eval, vs_pseudo, reliable_fraction), task) in evals.iter().zip(&tasks) {
        let pck_alpha = eval.pck_by_alpha[3];
        mean_pck_alpha += pck_alpha / tasks.len() as f64;
        for (m, v) in mean_pck.iter_mut().zip(&eval.pck_by_alpha) {
            *m += v / tasks.len() as f64;
        }
        mean_entropy += eval.mean_entropy / tasks.len() as f64;
        mean_vel += eval.heldout_velocity / tasks.len() as f64;
        writeln!(
            per_sample,
            "{},{},{},{}",
            eval.task_index, pck_alpha, eval.mean_entropy, eval.heldout_velocity
        )?;
        for q in &eval.per_query {
            writeln!(
                per_query,
                "{},{},{},{},{},{},{},{},{},{}",
                eval.task_index,
                q.layer,
                q.timestep,
                q.query.x,
                q.query.y,
                q.pred.x,
                q.pred.y,
                q.gt.x,
                q.gt.y,
                q.correct
            )?;
        }
        per_task.push(TaskReport {
            task_index: eval.task_index,
            warp: task.params.warp,
            pck_alpha,
            pck_by_alpha: eval.pck_by_alpha[..3].to_vec(),
            pck_vs_pseudo: *vs_pseudo,
            reliable_fraction: *reliable_fraction,
            mean_entropy: eval.mean_entropy,
            heldout_velocity: eval.heldout_velocity,
        });
    }
    per_sample.flush()?;
    per_query.flush()?;

    if args.dump_attention {
        let task = &tasks[0];
        let noise = eval_noise(args.seed, 0, canvas_shape);
        let (z_t, cond) =
            build_diptych(&task.garment, &task.person, &task.m_e, args.timesteps[0], &noise)?;
        let pose = match model.config.pose_mode {
            PoseMode::None => None,
            _ => Some(&task.pose),
        };
        let pass = model.forward(&ModelInputs {
            z_t: &z_t,
            conditioning: &cond,
            pose,
        })?;
        let dir = args.out.join("attention");
        for l in 0..pass.layer_count() {
            export_attention_maps(&pass.attention(l), &dir, l)?;
        }
    }

    let report = EvalReport {
        schema: EVAL_SCHEMA.to_string(),
        checkpoint: args.checkpoint.display().to_string(),
        tasks: args.tasks,
        seed: args.seed,
        noise_sigma: args.noise_sigma,
        gamma: args.gamma,
        alpha: args.alpha,
        timesteps: args.timesteps.clone(),
        mean_pck_alpha,
        mean_pck_by_alpha: mean_pck.to_vec(),
        mean_entropy,
        mean_heldout_velocity: mean_vel,
        per_task,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CoralError::Format(format!("eval report: {e}")))?;
    std::fs::write(args.out.join("report.json"), json)?;
    Ok(report)
}

/// Reads back the `(pck, quality)` columns of a per-sample CSV.
pub fn read_per_sample(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| CoralError::Format(format!("{}: cannot read", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == PER_SAMPLE_HEADER => {}
        other => {
            return Err(CoralError::Format(format!(
                "{}: bad per-sample header {other:?}",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(CoralError::Format(format!(
                "{}: bad per-sample row {line:?}",
                path.display()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| CoralError::Format(format!("{}: {e}", path.display())))
        };
        out.push((num(f[1])?, num(f[2])?, num(f[3])?));
    }
    Ok(out)
}
