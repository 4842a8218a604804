//! The training runner: owns a run directory, drives `train_step`, logs a
//! loss report per step as JSONL, periodically evaluates held-out tasks
//! into `metrics.csv`, and checkpoints with full trainer state so runs can
//! be resumed exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use coral_core::cord;
use coral_core::error::{CoralError, Result};
use coral_core::grid::{CorrespondenceSet, DescriptorGrid};
use coral_core::losses::{Latent, LossReport};
use coral_core::model::{
    load_checkpoint, save_checkpoint, DiptychModel, TrainerState,
};
use coral_core::rng::{derive_seed, stream_rng, STREAM_EVAL, STREAM_SAMPLE, STREAM_STEP};
use coral_core::synth::{generate_task, SyntheticTask, TaskParams};
use coral_core::train::{train_step, Optimizer, OptimizerKind, StepSample};
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{RunConfig, PCK_REPORT_ALPHAS};
use crate::evaluate::{eval_model_on_task, eval_noise};

pub const METRICS_HEADER: &str =
    "step,velocity,corr,ent,total,pck_a1,pck_a2,pck_a4,mean_entropy";

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: u64,
    pub velocity: f64,
    pub corr: f64,
    pub ent: f64,
    pub total: f64,
    pub pck: [f64; 3],
    pub mean_entropy: f64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.velocity,
            self.corr,
            self.ent,
            self.total,
            self.pck[0],
            self.pck[1],
            self.pck[2],
            self.mean_entropy
        )
    }
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub final_metrics: Option<MetricsRow>,
    pub completed_steps: u64,
}

/// Training tasks with their pseudo ground truths.
pub fn build_training_set(config: &RunConfig) -> Result<Vec<(SyntheticTask, CorrespondenceSet)>> {
    (0..config.tasks)
        .map(|i| {
            let params = TaskParams {
                seed: derive_seed(config.seed, coral_core::rng::STREAM_TASK, i as u64),
                ..config.task.clone()
            };
            let task = generate_task(&params)?;
            let pseudo = task.pseudo_gt(config.gamma)?;
            Ok((task, pseudo))
        })
        .collect()
}

/// Held-out evaluation tasks; same distribution as training, disjoint
/// seed stream.
pub fn build_eval_set(config: &RunConfig) -> Result<Vec<SyntheticTask>> {
    (0..config.eval_tasks)
        .map(|i| {
            let params = TaskParams {
                seed: derive_seed(config.seed, STREAM_EVAL, i as u64),
                ..config.task.clone()
            };
            generate_task(&params)
        })
        .collect()
}

fn sample_noise_canvas(rng: &mut impl Rng, h: usize, w2: usize, c: usize) -> Latent {
    let data: Vec<f64> = (0..h * w2 * c)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Array3::from_shape_vec((h, w2, c), data).expect("shape")
}

/// Held-out metric block: PCK at the report alphas and mean entropy,
/// averaged over the eval set.
pub fn heldout_metrics(
    model: &DiptychModel,
    eval_set: &[SyntheticTask],
    config: &RunConfig,
) -> Result<([f64; 3], f64)> {
    let shape = (
        config.model.latent_height,
        2 * config.model.latent_width,
        config.model.latent_channels,
    );
    let mut pck = [0.0; 3];
    let mut ent = 0.0;
    for (i, task) in eval_set.iter().enumerate() {
        let noise = eval_noise(config.seed, i as u64, shape);
        let eval = eval_model_on_task(
            model,
            task,
            i,
            &config.eval_timesteps,
            &PCK_REPORT_ALPHAS,
            config.alpha,
            &noise,
        )?;
        for (a, v) in pck.iter_mut().zip(&eval.pck_by_alpha) {
            *a += v / eval_set.len() as f64;
        }
        ent += eval.mean_entropy / eval_set.len() as f64;
    }
    Ok((pck, ent))
}

/// Runs (or resumes) a training run into `out_dir`.
pub fn run_training(
    config: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let config_json = serde_json::to_string_pretty(config)
        .map_err(|e| CoralError::Format(format!("run config: {e}")))?;
    std::fs::write(out_dir.join("config.json"), config_json)?;

    let training_set = build_training_set(config)?;
    let eval_set = build_eval_set(config)?;

    let (mut model, start_step, mut optimizer) = match resume {
        None => {
            let model = DiptychModel::new(config.model.clone())?;
            let optimizer = match config.optimizer {
                OptimizerKind::Adam => Optimizer::adam(config.lr),
                OptimizerKind::Sgd => Optimizer::sgd(config.lr),
            };
            (model, 0u64, optimizer)
        }
        Some(ckpt) => {
            let (model, trainer) = load_checkpoint(ckpt)?;
            if model.config != config.model {
                return Err(CoralError::Config(format!(
                    "checkpoint model config does not match the run config ({})",
                    ckpt.display()
                )));
            }
            let trainer = trainer.ok_or_else(|| {
                CoralError::Format(format!(
                    "{}: checkpoint has no trainer state to resume from",
                    ckpt.display()
                ))
            })?;
            (
                model,
                trainer.step,
                Optimizer::from_state(trainer.optimizer),
            )
        }
    };

    let mut losses_log = BufWriter::new(File::create(out_dir.join("losses.jsonl"))?);
    let mut metrics = BufWriter::new(File::create(out_dir.join("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;

    let (h, w, c) = (
        config.model.latent_height,
        config.model.latent_width,
        config.model.latent_channels,
    );
    let mut final_metrics = None;
    let mut last_report: Option<LossReport> = None;
    for step in start_step..config.steps {
        let mut rng = stream_rng(config.seed, STREAM_STEP, step);
        let samples: Vec<StepSample> = (0..config.batch)
            .map(|_| {
                let idx = rng.random_range(0..training_set.len());
                let t: f64 = rng.random_range(0.0..1.0);
                let noise = sample_noise_canvas(&mut rng, h, 2 * w, c);
                let (task, pseudo) = &training_set[idx];
                StepSample {
                    task,
                    pseudo,
                    t,
                    noise,
                }
            })
            .collect();
        let report = train_step(
            &mut model,
            &mut optimizer,
            &samples,
            &config.weights,
            config.soft_mode,
            step + 1,
        )?;
        let line = serde_json::to_string(&report)
            .map_err(|e| CoralError::Format(format!("loss report: {e}")))?;
        writeln!(losses_log, "{line}")?;

        let completed = step + 1;
        if completed % config.eval_every == 0 || completed == config.steps {
            let (pck, mean_entropy) = heldout_metrics(&model, &eval_set, config)?;
            let row = MetricsRow {
                step: completed,
                velocity: report.velocity,
                corr: report.corr,
                ent: report.ent,
                total: report.total,
                pck,
                mean_entropy,
            };
            writeln!(metrics, "{}", row.to_csv())?;
            final_metrics = Some(row);
        }
        last_report = Some(report);
    }
    losses_log.flush()?;
    metrics.flush()?;
    drop(last_report);

    let trainer = TrainerState {
        step: config.steps.max(start_step),
        optimizer: optimizer.state.clone(),
    };
    save_checkpoint(&out_dir.join("checkpoint_final.ckpt"), &mut model, Some(&trainer))?;

    // qualitative output grid: one Euler sample on the first eval task
    if let Some(task) = eval_set.first() {
        let noise = {
            let mut rng = stream_rng(config.seed, STREAM_SAMPLE, u64::MAX - 1);
            sample_noise_canvas(&mut rng, h, 2 * w, c)
        };
        let (_, cond) = coral_core::model::build_diptych(
            &task.garment,
            &task.person,
            &task.m_e,
            1.0,
            &noise,
        )?;
        let pose = match config.model.pose_mode {
            coral_core::model::PoseMode::None => None,
            _ => Some(&task.pose),
        };
        let sampled = model.euler_sample(&cond, pose, 8, &noise)?;
        cord::write_grid(
            &out_dir.join("sample_final.cord"),
            &DescriptorGrid::new(sampled)?,
        )?;
    }

    Ok(RunOutcome {
        run_dir: out_dir.to_path_buf(),
        final_metrics,
        completed_steps: config.steps.max(start_step),
    })
}

/// Reads `metrics.csv` from a run directory.
pub fn read_metrics(run_dir: &Path) -> Result<Vec<MetricsRow>> {
    let path = run_dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| CoralError::Format(format!("{}: missing metrics.csv", run_dir.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(CoralError::Format(format!(
                "{}: bad metrics header {other:?}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(CoralError::Format(format!(
                "{}: line {} has {} fields",
                path.display(),
                ln + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| CoralError::Format(format!("{}: {e}", path.display())))
        };
        rows.push(MetricsRow {
            step: fields[0]
                .parse::<u64>()
                .map_err(|e| CoralError::Format(format!("{}: {e}", path.display())))?,
            velocity: num(fields[1])?,
            corr: num(fields[2])?,
            ent: num(fields[3])?,
            total: num(fields[4])?,
            pck: [num(fields[5])?, num(fields[6])?, num(fields[7])?],
            mean_entropy: num(fields[8])?,
        });
    }
    Ok(rows)
}
