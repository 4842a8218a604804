//! Run configuration: everything a training run needs, serialized into the
//! run directory so the run can be replayed bit-for-bit.

use coral_core::attention::SoftArgmaxMode;
use coral_core::losses::LossWeights;
use coral_core::model::{ModelConfig, PoseMode};
use coral_core::synth::{TaskParams, WarpKind};
use coral_core::train::OptimizerKind;
use serde::{Deserialize, Serialize};

pub const DEFAULT_GAMMA: f64 = 3.0;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const DEFAULT_EVAL_TIMESTEPS: [f64; 3] = [0.25, 0.5, 0.75];
pub const PCK_REPORT_ALPHAS: [f64; 3] = [1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weights: LossWeights,
    /// Cycle-consistency threshold for pseudo-ground-truth extraction.
    pub gamma: f64,
    /// Headline PCK threshold in the evaluation reports.
    pub alpha: f64,
    pub soft_mode: SoftArgmaxMode,
    pub model: ModelConfig,
    /// Template for training tasks; per-task seeds are derived from the
    /// run seed.
    pub task: TaskParams,
    /// Number of training tasks.
    pub tasks: usize,
    /// Held-out task count for periodic evaluation.
    pub eval_tasks: usize,
    pub eval_every: u64,
    pub eval_timesteps: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch: 1,
            optimizer: OptimizerKind::Adam,
            lr: 2e-3,
            weights: LossWeights::default(),
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            soft_mode: SoftArgmaxMode::Renormalized,
            model: ModelConfig {
                latent_height: 8,
                latent_width: 8,
                latent_channels: 4,
                model_dim: 64,
                heads: 2,
                layers: 2,
                ffn_dim: 128,
                pose_mode: PoseMode::Token,
                context_tokens: 0,
                rope_base: 100.0,
                repa_heads: false,
                seed: 0,
            },
            task: TaskParams {
                seed: 0,
                height: 8,
                width: 8,
                channels: 4,
                warp: WarpKind::BlockShuffle,
                warp_amplitude: 2.0,
                noise_sigma: 0.0,
                mask_density: 0.75,
            },
            tasks: 6,
            eval_tasks: 8,
            eval_every: 100,
            eval_timesteps: DEFAULT_EVAL_TIMESTEPS.to_vec(),
        }
    }
}

impl RunConfig {
    /// Aligns the dependent fields: the model seed follows the run seed and
    /// the task grid must match the model's latent panels.
    pub fn normalized(mut self) -> Self {
        self.model.seed = self.seed;
        self.task.height = self.model.latent_height;
        self.task.width = self.model.latent_width;
        self.task.channels = self.model.latent_channels;
        self
    }

    pub fn validate(&self) -> coral_core::Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.weights.validate()?;
        if self.batch == 0 {
            return Err(coral_core::CoralError::Config("batch must be >= 1".into()));
        }
        if self.tasks == 0 || self.eval_tasks == 0 {
            return Err(coral_core::CoralError::Config(
                "need at least one training and one eval task".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(coral_core::CoralError::Config(
                "eval-every must be >= 1".into(),
            ));
        }
        if self.gamma < 0.0 {
            return Err(coral_core::CoralError::OutOfRange(
                "gamma must be >= 0".into(),
            ));
        }
        if self.alpha <= 0.0 {
            return Err(coral_core::CoralError::OutOfRange(
                "alpha must be > 0".into(),
            ));
        }
        if self.eval_timesteps.is_empty()
            || self
                .eval_timesteps
                .iter()
                .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(coral_core::CoralError::OutOfRange(
                "eval timesteps must lie in [0, 1]".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(coral_core::CoralError::OutOfRange(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}
