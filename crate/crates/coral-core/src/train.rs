//! Optimizers and the training step: forward, loss assembly over all
//! layers, gradient injection into attention and hidden states, and one
//! parameter update.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{
    extract_sub_attention_from, row_entropy_backward, soft_correspondence_backward_row,
    soft_correspondence_with, SegmentKind, SoftArgmaxMode,
};
use crate::error::{CoralError, Result};
use crate::grid::CorrespondenceSet;
use crate::losses::{
    corr_loss, entropy_loss, patch_alignment_backward, patch_alignment_loss, velocity_loss,
    Latent, LayerLosses, LossReport, LossWeights,
};
use crate::model::{build_diptych, join_panels, BackwardSignals, DiptychModel, ModelInputs, PoseMode};
use crate::synth::SyntheticTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Serializable optimizer state; checkpoints carry it so a resumed run
/// continues the exact parameter trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Self {
            state: OptimizerState {
                kind: OptimizerKind::Adam,
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step_count: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            state: OptimizerState {
                kind: OptimizerKind::Sgd,
                lr,
                beta1: 0.0,
                beta2: 0.0,
                eps: 0.0,
                step_count: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    pub fn from_state(state: OptimizerState) -> Self {
        Self { state }
    }

    /// Applies one update from the accumulated gradients, then rounds the
    /// parameters through f32 so checkpoints stay lossless.
    pub fn step(&mut self, model: &mut DiptychModel) {
        let s = &mut self.state;
        s.step_count += 1;
        match s.kind {
            OptimizerKind::Sgd => {
                let lr = s.lr;
                model.visit_params(&mut |p, g| {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv = (*pv - lr * gv) as f32 as f64;
                    }
                });
            }
            OptimizerKind::Adam => {
                let (lr, b1, b2, eps, t) = (s.lr, s.beta1, s.beta2, s.eps, s.step_count);
                let bc1 = 1.0 - b1.powi(t as i32);
                let bc2 = 1.0 - b2.powi(t as i32);
                let (m, v) = (&mut s.m, &mut s.v);
                let mut idx = 0;
                model.visit_params(&mut |p, g| {
                    if m.len() == idx {
                        m.push(vec![0.0; p.len()]);
                        v.push(vec![0.0; p.len()]);
                    }
                    let (ms, vs) = (&mut m[idx], &mut v[idx]);
                    assert_eq!(ms.len(), p.len(), "optimizer state shape drift");
                    for i in 0..p.len() {
                        ms[i] = b1 * ms[i] + (1.0 - b1) * g[i];
                        vs[i] = b2 * vs[i] + (1.0 - b2) * g[i] * g[i];
                        let m_hat = ms[i] / bc1;
                        let v_hat = vs[i] / bc2;
                        p[i] = (p[i] - lr * m_hat / (v_hat.sqrt() + eps)) as f32 as f64;
                    }
                    idx += 1;
                });
            }
        }
    }
}

/// One batch element: a task with its pseudo ground truth, a sampled
/// timestep, and a noise canvas.
pub struct StepSample<'a> {
    pub task: &'a SyntheticTask,
    pub pseudo: &'a CorrespondenceSet,
    pub t: f64,
    pub noise: Latent,
}

fn non_finite_diagnostic(pass: &crate::model::ForwardPass) -> String {
    for (l, cache) in pass.caches.iter().enumerate() {
        for (h, attn) in cache.attn.iter().enumerate() {
            for (row, r) in attn.rows().into_iter().enumerate() {
                if r.iter().any(|v| !v.is_finite()) {
                    let head: Vec<f64> = r.iter().take(4).cloned().collect();
                    return format!(
                        "attention row layer={l} head={h} query_token={row} starts {head:?}"
                    );
                }
            }
        }
    }
    if pass.velocity.iter().any(|v| !v.is_finite()) {
        return "velocity canvas contains a non-finite value".into();
    }
    "loss non-finite but forward pass is finite".into()
}

/// Loss values for a single batch element, with the gradient signals that
/// realize them (scaled by `1/batch`).
pub struct SampleEvaluation {
    pub velocity: f64,
    pub corr: f64,
    pub ent: f64,
    pub repa: Option<f64>,
    pub reliable: usize,
    pub layer_corr: Vec<f64>,
    pub layer_ent: Vec<f64>,
    pub layer_repa: Vec<f64>,
    pub signals: BackwardSignals,
    pub pass: crate::model::ForwardPass,
}

/// Forward pass plus loss assembly for one sample. Loss values are always
/// computed for logging; gradients are injected into `signals` only for
/// terms with a non-zero weight, so zero-weight runs follow the exact
/// velocity-only parameter trajectory. `batch` scales every gradient.
///
/// The feature-alignment head backward mutates the head gradients, hence
/// the `&mut` model; no parameters change here.
pub fn evaluate_sample(
    model: &mut DiptychModel,
    sample: &StepSample,
    weights: &LossWeights,
    soft_mode: SoftArgmaxMode,
    batch: f64,
) -> Result<SampleEvaluation> {
    let layers = model.config.layers;
    let use_repa = !model.repa_heads.is_empty();
    let task = sample.task;
    let (z_t, cond) = build_diptych(&task.garment, &task.person, &task.m_e, sample.t, &sample.noise)?;
    let pose = match model.config.pose_mode {
        PoseMode::None => None,
        _ => Some(&task.pose),
    };
    let pass = model.forward(&ModelInputs {
        z_t: &z_t,
        conditioning: &cond,
        pose,
    })?;

    let clean = join_panels(&task.garment, &task.person)?;
    let velocity = velocity_loss(&pass.velocity, &clean, &sample.noise)?;

    let mut signals = BackwardSignals::new(layers);
    let numel = pass.velocity.len() as f64;
    let target = &sample.noise - &clean;
    signals.d_velocity = Some((&pass.velocity - &target).mapv(|v| 2.0 * v / (numel * batch)));

    let total_tokens = pass.sequence.total();
    let person_rows: Vec<usize> = task
        .m_p
        .ones()
        .iter()
        .map(|q| pass.sequence.token_index(SegmentKind::Person, *q))
        .collect();
    let descriptor_rows = if use_repa { Some(task.descriptor_rows()) } else { None };

    let mut corr = 0.0;
    let mut ent = 0.0;
    let mut repa_sum = 0.0;
    let mut reliable = 0usize;
    let mut layer_corr = vec![0.0; layers];
    let mut layer_ent = vec![0.0; layers];
    let mut layer_repa = vec![0.0; layers];
    for l in 0..layers {
        let mean = pass.attention_head_mean(l);
        let sub = extract_sub_attention_from(&mean, &pass.sequence, &task.m_p, &task.m_g)?;
        let soft = soft_correspondence_with(&sub, soft_mode)?;
        let (corr_l, n_rel) = corr_loss(&sub.cost.query_locations, &soft, sample.pseudo)?;
        reliable = n_rel;

        let rows = Array2::from_shape_fn((person_rows.len(), total_tokens), |(i, j)| {
            mean[[person_rows[i], j]]
        });
        let ent_l = entropy_loss(&rows)?;

        corr += corr_l / layers as f64;
        ent += ent_l / layers as f64;
        layer_corr[l] = corr_l;
        layer_ent[l] = ent_l;

        let inject_corr = weights.lambda_corr > 0.0 && n_rel > 0;
        let inject_ent = weights.lambda_ent > 0.0;
        if inject_corr || inject_ent {
            let mut d_mean: Array2<f64> = Array2::zeros((total_tokens, total_tokens));
            if inject_corr {
                let scale = weights.lambda_corr / (layers as f64 * batch);
                for (qi, q) in sub.cost.query_locations.iter().enumerate() {
                    let Some(entry) = sample.pseudo.get(*q) else { continue };
                    if !entry.reliable {
                        continue;
                    }
                    let pred = soft[qi];
                    let d_pred = (
                        scale * 2.0 * (pred.0 - entry.matched.x as f64) / n_rel as f64,
                        scale * 2.0 * (pred.1 - entry.matched.y as f64) / n_rel as f64,
                    );
                    let row: Vec<f64> = sub.cost.values.row(qi).to_vec();
                    let d_row = soft_correspondence_backward_row(
                        &row,
                        &sub.cost.key_locations,
                        pred,
                        d_pred,
                        soft_mode,
                    );
                    let row_tok = pass.sequence.token_index(SegmentKind::Person, *q);
                    for (ki, k) in sub.cost.key_locations.iter().enumerate() {
                        let col_tok = pass.sequence.token_index(SegmentKind::Garment, *k);
                        d_mean[[row_tok, col_tok]] += d_row[ki];
                    }
                }
            }
            if inject_ent {
                let scale = weights.lambda_ent / (layers as f64 * batch * person_rows.len() as f64);
                for (i, row_tok) in person_rows.iter().enumerate() {
                    row_entropy_backward(
                        rows.row(i).as_slice().expect("contiguous"),
                        scale,
                        d_mean.row_mut(*row_tok).as_slice_mut().expect("contiguous"),
                    );
                }
            }
            signals.d_attn_mean[l] = Some(d_mean);
        }

        if let Some(desc) = &descriptor_rows {
            let canvas_tokens = desc.nrows();
            let offset = pass.sequence.segment_range(SegmentKind::Garment).start;
            let hidden_canvas = pass
                .hidden(l)
                .slice(ndarray::s![offset..offset + canvas_tokens, ..])
                .to_owned();
            let cache = model.repa_heads[l].forward(&hidden_canvas);
            let repa_l = patch_alignment_loss(&cache.out, desc)?;
            repa_sum += repa_l / layers as f64;
            layer_repa[l] = repa_l;
            if weights.lambda_repa > 0.0 {
                let scale = weights.lambda_repa / (layers as f64 * batch);
                let d_out = patch_alignment_backward(&cache.out, desc, scale);
                let d_hidden_canvas = model.repa_heads[l].backward(&cache, &d_out);
                let mut d_hidden: Array2<f64> =
                    Array2::zeros((total_tokens, model.config.model_dim));
                d_hidden
                    .slice_mut(ndarray::s![offset..offset + canvas_tokens, ..])
                    .assign(&d_hidden_canvas);
                signals.d_hidden[l] = Some(d_hidden);
            }
        }
    }
    Ok(SampleEvaluation {
        velocity,
        corr,
        ent,
        repa: use_repa.then_some(repa_sum),
        reliable,
        layer_corr,
        layer_ent,
        layer_repa,
        signals,
        pass,
    })
}

/// Runs one optimizer step over a batch and reports the losses.
pub fn train_step(
    model: &mut DiptychModel,
    optimizer: &mut Optimizer,
    samples: &[StepSample],
    weights: &LossWeights,
    soft_mode: SoftArgmaxMode,
    step: u64,
) -> Result<LossReport> {
    weights.validate()?;
    if samples.is_empty() {
        return Err(CoralError::EmptyDomain("empty training batch".into()));
    }
    let batch = samples.len() as f64;
    let layers = model.config.layers;
    let use_repa = !model.repa_heads.is_empty();

    model.zero_grads();
    let mut vel_sum = 0.0;
    let mut corr_sum = 0.0;
    let mut ent_sum = 0.0;
    let mut repa_sum = 0.0;
    let mut reliable_total = 0usize;
    let mut layer_corr = vec![0.0; layers];
    let mut layer_ent = vec![0.0; layers];
    let mut layer_repa = vec![0.0; layers];

    for sample in samples {
        let eval = evaluate_sample(model, sample, weights, soft_mode, batch)?;
        vel_sum += eval.velocity;
        corr_sum += eval.corr;
        ent_sum += eval.ent;
        repa_sum += eval.repa.unwrap_or(0.0);
        reliable_total += eval.reliable;
        for l in 0..layers {
            layer_corr[l] += eval.layer_corr[l] / batch;
            layer_ent[l] += eval.layer_ent[l] / batch;
            layer_repa[l] += eval.layer_repa[l] / batch;
        }
        let probe = vel_sum + corr_sum + ent_sum + repa_sum;
        if !probe.is_finite() {
            return Err(CoralError::NonFinite(format!(
                "training loss at step {step}: {}",
                non_finite_diagnostic(&eval.pass)
            )));
        }
        model.backward(&eval.pass, &eval.signals);
    }

    let repa = use_repa.then_some(repa_sum / batch);
    let per_layer = (0..layers)
        .map(|l| LayerLosses {
            layer: l,
            corr: layer_corr[l],
            ent: layer_ent[l],
            repa: use_repa.then_some(layer_repa[l]),
        })
        .collect();
    let report = LossReport::compose(
        step,
        vel_sum / batch,
        corr_sum / batch,
        ent_sum / batch,
        repa,
        weights,
        reliable_total,
        per_layer,
    );
    if !report.total.is_finite() {
        return Err(CoralError::NonFinite(format!(
            "training loss at step {step} is not finite"
        )));
    }
    optimizer.step(model);
    Ok(report)
}
