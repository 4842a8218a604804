//! Correspondence evaluation: attention-derived hard matches against the
//! true correspondences of held-out tasks, averaged across layers and
//! timesteps, plus a held-out velocity loss as the quality proxy.

use coral_core::attention::{extract_sub_attention_from, hard_correspondence, SegmentKind};
use coral_core::error::Result;
use coral_core::grid::GridCoord;
use coral_core::losses::{velocity_loss, Latent};
use coral_core::matching::pck;
use coral_core::model::{build_diptych, join_panels, DiptychModel, ModelInputs, PoseMode};
use coral_core::synth::SyntheticTask;
use ndarray::{Array2, Array3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Timestep used for the held-out velocity-loss proxy.
pub const PROXY_TIMESTEP: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub layer: usize,
    pub timestep: f64,
    pub query: GridCoord,
    pub pred: GridCoord,
    pub gt: GridCoord,
    /// Correct at the report's headline alpha.
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_index: usize,
    /// PCK per requested alpha, averaged over the layer × timestep grid.
    pub pck_by_alpha: Vec<f64>,
    /// Mean person-row attention entropy over the same grid.
    pub mean_entropy: f64,
    /// Whole-canvas velocity MSE at the proxy timestep on held-out noise.
    pub heldout_velocity: f64,
    #[serde(skip)]
    pub per_query: Vec<QueryRecord>,
}

/// Deterministic held-out noise canvas for an eval task.
pub fn eval_noise(seed: u64, task_index: u64, shape: (usize, usize, usize)) -> Latent {
    let (h, w2, c) = shape;
    let mut rng = coral_core::rng::stream_rng(seed, coral_core::rng::STREAM_SAMPLE, task_index);
    let data: Vec<f64> = (0..h * w2 * c)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Array3::from_shape_vec((h, w2, c), data).expect("shape")
}

/// Evaluates one task: hard correspondences per layer/timestep, PCK against
/// the task's true correspondences, mean person-row entropy, and the
/// held-out velocity loss.
pub fn eval_model_on_task(
    model: &DiptychModel,
    task: &SyntheticTask,
    task_index: usize,
    timesteps: &[f64],
    alphas: &[f64],
    headline_alpha: f64,
    noise: &Latent,
) -> Result<TaskEval> {
    let pose = match model.config.pose_mode {
        PoseMode::None => None,
        _ => Some(&task.pose),
    };
    let mut pck_sums = vec![0.0; alphas.len()];
    let mut ent_sum = 0.0;
    let mut grid_points = 0usize;
    let mut per_query = Vec::new();

    for &t in timesteps {
        let (z_t, cond) = build_diptych(&task.garment, &task.person, &task.m_e, t, noise)?;
        let pass = model.forward(&ModelInputs {
            z_t: &z_t,
            conditioning: &cond,
            pose,
        })?;
        let person_rows: Vec<usize> = task
            .m_p
            .ones()
            .iter()
            .map(|q| pass.sequence.token_index(SegmentKind::Person, *q))
            .collect();
        let total_tokens = pass.sequence.total();
        for l in 0..pass.layer_count() {
            let mean = pass.attention_head_mean(l);
            let sub = extract_sub_attention_from(&mean, &pass.sequence, &task.m_p, &task.m_g)?;
            let hard = hard_correspondence(&sub)?;
            for (ai, alpha) in alphas.iter().enumerate() {
                pck_sums[ai] += pck(&hard, &task.truth, *alpha)?;
            }
            let rows = Array2::from_shape_fn((person_rows.len(), total_tokens), |(i, j)| {
                mean[[person_rows[i], j]]
            });
            ent_sum += coral_core::losses::entropy_loss(&rows)?;
            grid_points += 1;

            for e in hard.entries() {
                let gt = task.truth.get(e.query).expect("truth covers m_p");
                per_query.push(QueryRecord {
                    layer: l,
                    timestep: t,
                    query: e.query,
                    pred: e.matched,
                    gt: gt.matched,
                    correct: e.matched.dist(gt.matched.as_f64()) < headline_alpha,
                });
            }
        }
    }

    // quality proxy: whole-canvas velocity MSE at a fixed timestep
    let (z_t, cond) = build_diptych(
        &task.garment,
        &task.person,
        &task.m_e,
        PROXY_TIMESTEP,
        noise,
    )?;
    let pass = model.forward(&ModelInputs {
        z_t: &z_t,
        conditioning: &cond,
        pose,
    })?;
    let clean = join_panels(&task.garment, &task.person)?;
    let heldout_velocity = velocity_loss(&pass.velocity, &clean, noise)?;

    let n = grid_points as f64;
    Ok(TaskEval {
        task_index,
        pck_by_alpha: pck_sums.into_iter().map(|s| s / n).collect(),
        mean_entropy: ent_sum / n,
        heldout_velocity,
        per_query,
    })
}

/// Analytic chance rate for hard correspondence at threshold `alpha`: the
/// mean over queries of the fraction of garment cells within distance
/// `alpha` of the true match.
pub fn chance_pck(task: &SyntheticTask, alpha: f64) -> f64 {
    let keys = task.m_g.ones();
    let mut total = 0.0;
    for e in task.truth.entries() {
        let near = keys
            .iter()
            .filter(|k| k.dist(e.matched.as_f64()) < alpha)
            .count();
        total += near as f64 / keys.len() as f64;
    }
    total / task.truth.len() as f64
}
