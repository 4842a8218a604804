//! `analyze-correlation`: Pearson correlation between per-sample PCK and
//! the per-sample quality proxy (held-out velocity loss), with a seeded
//! permutation test for the one-sided negative-correlation hypothesis.

use std::path::Path;

use coral_core::error::{CoralError, Result};
use coral_core::matching::pearson_r;
use coral_core::rng::{stream_rng, STREAM_EVAL};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub schema: String,
    pub n: usize,
    pub r: f64,
    /// One-sided p-value for `r <= r_observed` under permutation.
    pub p_negative: f64,
    pub permutations: usize,
    pub seed: u64,
}

pub const CORRELATION_SCHEMA: &str = "coral-correlation/1";

/// One-sided permutation test for negative correlation. Returns
/// `(r, p_negative)` with the add-one estimator.
pub fn permutation_test_negative(
    x: &[f64],
    y: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let r_obs = pearson_r(x, y)?;
    let mut rng = stream_rng(seed, STREAM_EVAL, 0);
    let mut shuffled = y.to_vec();
    let mut at_most = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        let r = pearson_r(x, &shuffled)?;
        if r <= r_obs {
            at_most += 1;
        }
    }
    let p = (1 + at_most) as f64 / (1 + permutations) as f64;
    Ok((r_obs, p))
}

/// Runs the analysis over a per-sample CSV and writes `scatter.csv` plus
/// `correlation.json` into `out`.
pub fn run_analyze(
    input: &Path,
    out: &Path,
    seed: u64,
    permutations: usize,
) -> Result<CorrelationReport> {
    let rows = crate::evalcmd::read_per_sample(input)?;
    if rows.len() < 2 {
        return Err(CoralError::EmptyDomain(format!(
            "{}: need at least two samples, got {}",
            input.display(),
            rows.len()
        )));
    }
    let pck: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let quality: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let (r, p) = permutation_test_negative(&pck, &quality, permutations, seed)?;

    std::fs::create_dir_all(out)?;
    let mut scatter = String::from("pck,quality\n");
    for (a, b) in pck.iter().zip(&quality) {
        scatter.push_str(&format!("{a},{b}\n"));
    }
    std::fs::write(out.join("scatter.csv"), scatter)?;

    let report = CorrelationReport {
        schema: CORRELATION_SCHEMA.to_string(),
        n: rows.len(),
        r,
        p_negative: p,
        permutations,
        seed,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CoralError::Format(format!("correlation report: {e}")))?;
    std::fs::write(out.join("correlation.json"), json)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_anticorrelated_columns_give_minus_one() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - v).collect();
        let (r, p) = permutation_test_negative(&x, &y, 500, 7).unwrap();
        approx::assert_abs_diff_eq!(r, -1.0, epsilon = 1e-12);
        assert!(p < 0.05, "p = {p}");
    }

    #[test]
    fn shuffled_columns_have_small_correlation() {
        // |r| over independent shuffles stays well below 1 on average
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut max_abs: f64 = 0.0;
        let mut sum_abs = 0.0;
        for s in 0..32u64 {
            let mut rng = stream_rng(s, STREAM_EVAL, 9);
            let mut y = x.clone();
            y.shuffle(&mut rng);
            let r = pearson_r(&x, &y).unwrap();
            max_abs = max_abs.max(r.abs());
            sum_abs += r.abs();
        }
        assert!(sum_abs / 32.0 < 0.2, "mean |r| = {}", sum_abs / 32.0);
        assert!(max_abs < 0.6, "max |r| = {max_abs}");
    }

    #[test]
    fn positive_correlation_is_not_flagged_negative() {
        let x: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 2.0 + 1.0).collect();
        let (r, p) = permutation_test_negative(&x, &y, 500, 3).unwrap();
        assert!(r > 0.99);
        assert!(p > 0.95, "p = {p}");
    }
}
