//! Training objectives: rectified-flow velocity loss, correspondence
//! distillation, attention-entropy minimization, their weighted
//! combination, the feature-alignment baseline, and a finite-difference
//! gradient-check harness.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::row_entropy;
use crate::error::{CoralError, Result};
use crate::grid::{CorrespondenceSet, GridCoord};
use crate::nn::{silu, silu_grad, Linear};

/// An `h×w×c` latent grid.
pub type Latent = Array3<f64>;

/// Loss-term weights. The correspondence and entropy defaults follow the
/// training setup; the alignment-baseline weight defaults to off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_corr: f64,
    pub lambda_ent: f64,
    pub lambda_repa: f64,
}

impl LossWeights {
    pub const DEFAULT_LAMBDA_CORR: f64 = 0.01;
    pub const DEFAULT_LAMBDA_ENT: f64 = 0.1;
    pub const DEFAULT_LAMBDA_REPA: f64 = 0.1;

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_corr", self.lambda_corr),
            ("lambda_ent", self.lambda_ent),
            ("lambda_repa", self.lambda_repa),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoralError::OutOfRange(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Velocity-only baseline (row (I) of the loss ablation).
    pub fn velocity_only() -> Self {
        Self {
            lambda_corr: 0.0,
            lambda_ent: 0.0,
            lambda_repa: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_corr: Self::DEFAULT_LAMBDA_CORR,
            lambda_ent: Self::DEFAULT_LAMBDA_ENT,
            lambda_repa: 0.0,
        }
    }
}

/// Per-layer correspondence/entropy values before layer averaging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerLosses {
    pub layer: usize,
    pub corr: f64,
    pub ent: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repa: Option<f64>,
}

/// One training step's loss values. `total` always equals
/// `velocity + lambda_corr*corr + lambda_ent*ent (+ lambda_repa*repa)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub velocity: f64,
    pub corr: f64,
    pub ent: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repa: Option<f64>,
    pub total: f64,
    /// Queries that carried correspondence supervision this step; 0 means
    /// the correspondence term was skipped.
    pub reliable_queries: usize,
    pub per_layer: Vec<LayerLosses>,
}

impl LossReport {
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        step: u64,
        velocity: f64,
        corr: f64,
        ent: f64,
        repa: Option<f64>,
        weights: &LossWeights,
        reliable_queries: usize,
        per_layer: Vec<LayerLosses>,
    ) -> Self {
        let coral = coral_loss(corr, ent, weights);
        let mut total = total_loss(velocity, coral);
        if let Some(r) = repa {
            total += weights.lambda_repa * r;
        }
        Self {
            step,
            velocity,
            corr,
            ent,
            repa,
            total,
            reliable_queries,
            per_layer,
        }
    }

    /// Deviation of `total` from its decomposition.
    pub fn decomposition_error(&self, weights: &LossWeights) -> f64 {
        let mut expected = self.velocity + coral_loss(self.corr, self.ent, weights);
        if let Some(r) = self.repa {
            expected += weights.lambda_repa * r;
        }
        (self.total - expected).abs()
    }
}

/// Linear interpolation toward noise: `z_t = (1-t) z0 + t noise`.
pub fn interpolate_latent(z0: &Latent, noise: &Latent, t: f64) -> Result<Latent> {
    if z0.dim() != noise.dim() {
        return Err(CoralError::DimensionMismatch(format!(
            "latent {:?} vs noise {:?}",
            z0.dim(),
            noise.dim()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CoralError::OutOfRange(format!("t must be in [0,1], got {t}")));
    }
    Ok(z0 * (1.0 - t) + noise * t)
}

/// Mean squared error against the target velocity `noise - z0`.
pub fn velocity_loss(predicted: &Latent, z0: &Latent, noise: &Latent) -> Result<f64> {
    if predicted.dim() != z0.dim() || z0.dim() != noise.dim() {
        return Err(CoralError::DimensionMismatch(
            "velocity loss shapes differ".into(),
        ));
    }
    let n = predicted.len() as f64;
    let mut sum = 0.0;
    for ((p, a), b) in predicted.iter().zip(z0.iter()).zip(noise.iter()) {
        let r = p - (b - a);
        sum += r * r;
    }
    Ok(sum / n)
}

/// Mean squared L2 distance between soft matches and pseudo ground truth,
/// over queries reliable in `gt`. With zero reliable queries the term is
/// skipped: the result is `(0.0, 0)` and the caller logs it.
pub fn corr_loss(
    queries: &[GridCoord],
    soft_matches: &[(f64, f64)],
    gt: &CorrespondenceSet,
) -> Result<(f64, usize)> {
    if queries.len() != soft_matches.len() {
        return Err(CoralError::DimensionMismatch(format!(
            "{} queries vs {} soft matches",
            queries.len(),
            soft_matches.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (q, pred) in queries.iter().zip(soft_matches) {
        let Some(entry) = gt.get(*q) else { continue };
        if !entry.reliable {
            continue;
        }
        let dx = pred.0 - entry.matched.x as f64;
        let dy = pred.1 - entry.matched.y as f64;
        sum += dx * dx + dy * dy;
        n += 1;
    }
    if n == 0 {
        Ok((0.0, 0))
    } else {
        Ok((sum / n as f64, n))
    }
}

/// Mean row entropy over person-query attention rows.
pub fn entropy_loss(rows: &Array2<f64>) -> Result<f64> {
    if rows.nrows() == 0 {
        return Err(CoralError::EmptyDomain("entropy loss over zero rows".into()));
    }
    let mut sum = 0.0;
    for row in rows.rows() {
        sum += row_entropy(row.as_slice().expect("contiguous row"))?;
    }
    Ok(sum / rows.nrows() as f64)
}

/// Weighted combination of the correspondence and entropy terms.
pub fn coral_loss(corr: f64, ent: f64, weights: &LossWeights) -> f64 {
    weights.lambda_corr * corr + weights.lambda_ent * ent
}

/// Velocity objective plus the combined alignment terms.
pub fn total_loss(velocity: f64, coral: f64) -> f64 {
    velocity + coral
}

/// Three-stage affine projection with a smooth nonlinearity, mapping
/// hidden states into descriptor space for the alignment baseline.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

pub struct ProjectionCache {
    x: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
    pub out: Array2<f64>,
}

impl ProjectionHead {
    pub fn init(rng: &mut impl Rng, hidden_dim: usize, desc_dim: usize) -> Self {
        Self {
            fc1: Linear::init(rng, hidden_dim, hidden_dim),
            fc2: Linear::init(rng, hidden_dim, hidden_dim),
            fc3: Linear::init(rng, hidden_dim, desc_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> ProjectionCache {
        let pre1 = self.fc1.forward(x);
        let act1 = pre1.mapv(silu);
        let pre2 = self.fc2.forward(&act1);
        let act2 = pre2.mapv(silu);
        let out = self.fc3.forward(&act2);
        ProjectionCache {
            x: x.clone(),
            pre1,
            act1,
            pre2,
            act2,
            out,
        }
    }

    /// Accumulates head gradients and returns the gradient on the input.
    pub fn backward(&mut self, cache: &ProjectionCache, d_out: &Array2<f64>) -> Array2<f64> {
        let d_act2 = self.fc3.backward(&cache.act2, d_out);
        let d_pre2 = &d_act2 * &cache.pre2.mapv(silu_grad);
        let d_act1 = self.fc2.backward(&cache.act1, &d_pre2);
        let d_pre1 = &d_act1 * &cache.pre1.mapv(silu_grad);
        self.fc1.backward(&cache.x, &d_pre1)
    }
}

/// Negative mean cosine similarity between projected patches and target
/// descriptor patches (one row per patch).
pub fn patch_alignment_loss(projected: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if projected.dim() != targets.dim() {
        return Err(CoralError::DimensionMismatch(format!(
            "projected {:?} vs targets {:?}",
            projected.dim(),
            targets.dim()
        )));
    }
    if projected.nrows() == 0 {
        return Err(CoralError::EmptyDomain("alignment over zero patches".into()));
    }
    let mut sum = 0.0;
    for (p, t) in projected.rows().into_iter().zip(targets.rows()) {
        let np = p.dot(&p).sqrt();
        let nt = t.dot(&t).sqrt();
        if np == 0.0 || nt == 0.0 {
            return Err(CoralError::DegenerateInput(
                "zero-norm patch in alignment loss".into(),
            ));
        }
        sum += p.dot(&t) / (np * nt);
    }
    Ok(-sum / projected.nrows() as f64)
}

/// Gradient of [`patch_alignment_loss`] w.r.t. the projected patches.
pub fn patch_alignment_backward(
    projected: &Array2<f64>,
    targets: &Array2<f64>,
    d_loss: f64,
) -> Array2<f64> {
    let k = projected.nrows() as f64;
    let mut grad = Array2::zeros(projected.dim());
    for (i, (p, t)) in projected
        .rows()
        .into_iter()
        .zip(targets.rows())
        .enumerate()
    {
        let np = p.dot(&p).sqrt();
        let nt = t.dot(&t).sqrt();
        let cos = p.dot(&t) / (np * nt);
        // d cos / d p = t/(|p||t|) - cos * p/|p|^2
        for j in 0..p.len() {
            let d_cos = t[j] / (np * nt) - cos * p[j] / (np * np);
            grad[[i, j]] = -d_loss * d_cos / k;
        }
    }
    grad
}

/// Alignment-baseline loss over per-layer hidden states: each layer's
/// hidden patches are projected by that layer's head, compared against the
/// concatenated `[garment || person]` descriptors, and the per-layer
/// losses are averaged.
pub fn repa_loss(
    hidden_states: &[Array2<f64>],
    descriptors: &Array2<f64>,
    heads: &[ProjectionHead],
) -> Result<f64> {
    if hidden_states.len() != heads.len() {
        return Err(CoralError::DimensionMismatch(format!(
            "{} hidden layers vs {} projection heads",
            hidden_states.len(),
            heads.len()
        )));
    }
    if hidden_states.is_empty() {
        return Err(CoralError::EmptyDomain("no hidden layers".into()));
    }
    let mut sum = 0.0;
    for (h, head) in hidden_states.iter().zip(heads) {
        if h.nrows() != descriptors.nrows() {
            return Err(CoralError::DimensionMismatch(format!(
                "{} hidden patches vs {} descriptor patches",
                h.nrows(),
                descriptors.nrows()
            )));
        }
        let cache = head.forward(h);
        sum += patch_alignment_loss(&cache.out, descriptors)?;
    }
    Ok(sum / hidden_states.len() as f64)
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub finite: bool,
    pub pass: bool,
}

/// Floor on the relative-error denominator so near-zero gradient pairs do
/// not dominate the report.
const REL_FLOOR: f64 = 1e-6;

/// Compares an analytic gradient against central finite differences.
///
/// `loss` must be deterministic; `grad` returns the analytic gradient at a
/// parameter vector. Passes iff every gradient is finite and the max
/// relative error stays below `tolerance`.
pub fn gradient_check<L, G>(
    loss: L,
    grad: G,
    params: &[f64],
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = grad(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let finite = analytic.iter().all(|g| g.is_finite());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        finite,
        pass: finite,
    };
    if !finite {
        return report;
    }
    let mut point = params.to_vec();
    for i in 0..params.len() {
        point[i] = params[i] + step;
        let plus = loss(&point);
        point[i] = params[i] - step;
        let minus = loss(&point);
        point[i] = params[i];
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report.pass = report.finite && report.max_rel_error < tolerance;
    report
}
