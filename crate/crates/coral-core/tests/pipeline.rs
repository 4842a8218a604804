//! Matching-pipeline properties: oracle equivalence for argmax flows,
//! monotonicity laws, and the zero-noise exactness of the pseudo-ground-
//! truth extraction on generated tasks.

use coral_core::grid::{BinaryMask, CostMap, DescriptorGrid, FlowField, GridCoord};
use coral_core::matching::{
    argmax_flow, cosine_cost, cycle_consistency_mask, pck, pseudo_gt, warp_by_flow, FlowDirection,
};
use coral_core::synth::{generate_task, TaskParams, WarpKind};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn full_cost(qh: usize, qw: usize, kh: usize, kw: usize, values: Array2<f64>) -> CostMap {
    CostMap::new(
        (qh, qw),
        (kh, kw),
        BinaryMask::filled(qh, qw, true).ones(),
        BinaryMask::filled(kh, kw, true).ones(),
        values,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Forward argmax flow equals a brute-force row scan.
    #[test]
    fn argmax_flow_matches_brute_force(
        qh in 1usize..5, qw in 1usize..5, kh in 1usize..5, kw in 1usize..5,
        seed in 0u64..1000,
    ) {
        let nq = qh * qw;
        let nk = kh * kw;
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let values = Array2::from_shape_fn((nq, nk), |_| next());
        let cost = full_cost(qh, qw, kh, kw, values.clone());
        let flow = argmax_flow(&cost, FlowDirection::QueryToKey).unwrap();
        for qi in 0..nq {
            // brute-force scan with first-wins tie-break
            let mut best = 0;
            for ki in 1..nk {
                if values[[qi, ki]] > values[[qi, best]] {
                    best = ki;
                }
            }
            let q = GridCoord::from_linear(qi, qw);
            let expect = GridCoord::from_linear(best, kw).as_f64();
            prop_assert_eq!(flow.target(q), Some(expect));
        }
    }

    /// Cosine cost transposes under swapping the argument grids.
    #[test]
    fn cosine_cost_transpose_symmetry(seed in 0u64..1000) {
        let mut state = seed.wrapping_add(17);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0 + 0.001
        };
        let a = DescriptorGrid::new(Array3::from_shape_fn((2, 3, 4), |_| next())).unwrap();
        let b = DescriptorGrid::new(Array3::from_shape_fn((3, 2, 4), |_| next())).unwrap();
        let ma = BinaryMask::filled(2, 3, true);
        let mb = BinaryMask::filled(3, 2, true);
        let ab = cosine_cost(&a, &b, &ma, &mb).unwrap();
        let ba = cosine_cost(&b, &a, &mb, &ma).unwrap();
        let diff = (&ab.values - &ba.values.t())
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        prop_assert!(diff < 1e-12);
    }

    /// Cosine cost ignores positive per-vector scaling.
    #[test]
    fn cosine_cost_scale_invariance(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let mut state = seed.wrapping_add(3);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0 + 0.001
        };
        let a = DescriptorGrid::new(Array3::from_shape_fn((2, 2, 3), |_| next())).unwrap();
        let b = DescriptorGrid::new(Array3::from_shape_fn((2, 2, 3), |_| next())).unwrap();
        let scaled = DescriptorGrid::new(a.data().mapv(|v| v * scale)).unwrap();
        let m = BinaryMask::filled(2, 2, true);
        let base = cosine_cost(&a, &b, &m, &m).unwrap();
        let after = cosine_cost(&scaled, &b, &m, &m).unwrap();
        let diff = (&base.values - &after.values)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        prop_assert!(diff < 1e-9);
    }

    /// Reliability masks grow with gamma.
    #[test]
    fn cycle_mask_monotone_in_gamma(seed in 0u64..500, g1 in 0.0f64..4.0, g2 in 0.0f64..4.0) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let mut state = seed.wrapping_add(41);
        let mut next_u = |m: usize| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as usize) % m
        };
        let (h, w) = (5, 5);
        let mut fwd = FlowField::invalid(h, w);
        let mut bwd = FlowField::invalid(h, w);
        for y in 0..h {
            for x in 0..w {
                fwd.set_target(GridCoord::new(x, y), (next_u(w) as f64, next_u(h) as f64));
                bwd.set_target(GridCoord::new(x, y), (next_u(w) as f64, next_u(h) as f64));
            }
        }
        let small = cycle_consistency_mask(&fwd, &bwd, lo).unwrap();
        let large = cycle_consistency_mask(&fwd, &bwd, hi).unwrap();
        prop_assert!(small.is_subset_of(&large));
    }

    /// PCK grows with alpha, is zero at alpha = 0, and is one on itself.
    #[test]
    fn pck_monotone_in_alpha(seed in 0u64..500, a1 in 0.0f64..8.0, a2 in 0.0f64..8.0) {
        let task = generate_task(&TaskParams {
            seed,
            height: 6,
            width: 6,
            channels: 3,
            warp: WarpKind::Permutation,
            warp_amplitude: 0.0,
            noise_sigma: 1.0,
            mask_density: 0.8,
        }).unwrap();
        let pseudo = task.pseudo_gt(3.0).unwrap();
        prop_assume!(pseudo.reliable_count() > 0);
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let p_lo = pck(&pseudo, &task.truth, lo).unwrap();
        let p_hi = pck(&pseudo, &task.truth, hi).unwrap();
        prop_assert!(p_lo <= p_hi);
        prop_assert_eq!(pck(&pseudo, &task.truth, 0.0).unwrap(), 0.0);
        prop_assert_eq!(pck(&task.truth, &task.truth, 0.5).unwrap(), 1.0);
    }
}

/// Oracle equivalence at the largest supported analysis size.
#[test]
fn argmax_flow_matches_brute_force_at_16x16() {
    let n = 256;
    let mut state = 0xDEADu64;
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let values = Array2::from_shape_fn((n, n), |_| next());
    let cost = full_cost(16, 16, 16, 16, values.clone());
    for direction in [FlowDirection::QueryToKey, FlowDirection::KeyToQuery] {
        let flow = argmax_flow(&cost, direction).unwrap();
        for si in 0..n {
            let mut best = 0;
            for ki in 1..n {
                let (a, b) = match direction {
                    FlowDirection::QueryToKey => (values[[si, ki]], values[[si, best]]),
                    FlowDirection::KeyToQuery => (values[[ki, si]], values[[best, si]]),
                };
                if a > b {
                    best = ki;
                }
            }
            let s = GridCoord::from_linear(si, 16);
            let expect = GridCoord::from_linear(best, 16).as_f64();
            assert_eq!(flow.target(s), Some(expect), "{direction:?} source {si}");
        }
    }
}

#[test]
fn pseudo_gt_with_full_reliability_equals_argmax_flow() {
    let task = generate_task(&TaskParams {
        seed: 33,
        noise_sigma: 0.7,
        ..TaskParams::default()
    })
    .unwrap();
    let cost = cosine_cost(&task.desc_person, &task.desc_garment, &task.m_p, &task.m_g).unwrap();
    let flow = argmax_flow(&cost, FlowDirection::QueryToKey).unwrap();
    let all = BinaryMask::filled(16, 16, true);
    let set = pseudo_gt(&cost, &all).unwrap();
    assert_eq!(set.reliable_count(), set.len());
    for e in set.entries() {
        assert_eq!(flow.target(e.query), Some(e.matched.as_f64()));
    }
}

#[test]
fn warp_by_permutation_flow_inverts() {
    let task = generate_task(&TaskParams {
        seed: 4,
        height: 6,
        width: 6,
        channels: 2,
        warp: WarpKind::Permutation,
        warp_amplitude: 0.0,
        noise_sigma: 0.0,
        mask_density: 1.0,
    })
    .unwrap();
    // the true correspondence as a flow and its inverse
    let mut fwd = FlowField::invalid(6, 6);
    let mut inv = FlowField::invalid(6, 6);
    for e in task.truth.entries() {
        fwd.set_target(e.query, e.matched.as_f64());
        inv.set_target(e.matched, e.query.as_f64());
    }
    let garment = DescriptorGrid::new(task.garment.clone()).unwrap();
    let warped = warp_by_flow(&garment, &fwd);
    let back = warp_by_flow(&warped, &inv);
    assert_eq!(back, garment);
}

/// Reliability-mask density falls as descriptor noise grows: paired
/// one-sided test at the 95% level over 32 seeds per adjacent sigma pair.
#[test]
fn reliability_density_monotone_in_noise() {
    let sigmas = [0.0, 0.5, 1.0, 2.0];
    let seeds = 32u64;
    let mut densities: Vec<Vec<f64>> = Vec::new();
    for sigma in sigmas {
        let mut per_seed = Vec::new();
        for seed in 0..seeds {
            let task = generate_task(&TaskParams {
                seed: 1000 + seed,
                height: 12,
                width: 12,
                channels: 4,
                warp: WarpKind::Permutation,
                warp_amplitude: 0.0,
                noise_sigma: sigma,
                mask_density: 0.75,
            })
            .unwrap();
            let pseudo = task.pseudo_gt(3.0).unwrap();
            per_seed.push(pseudo.reliable_count() as f64 / pseudo.len() as f64);
        }
        densities.push(per_seed);
    }
    assert!(
        densities[0].iter().all(|d| *d == 1.0),
        "zero noise must keep every match"
    );
    // paired one-sided t statistics at 95%, df = 31 (critical 1.696)
    let t_stat = |hi: &[f64], lo: &[f64]| -> (f64, f64) {
        let diffs: Vec<f64> = hi.iter().zip(lo).map(|(b, a)| b - a).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        if var == 0.0 {
            (mean, if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY })
        } else {
            (mean, mean / (var / n).sqrt())
        }
    };
    // nonincreasing: no adjacent pair shows a significant increase
    for pair in densities.windows(2) {
        let (mean, t) = t_stat(&pair[1], &pair[0]);
        assert!(
            t < 1.696,
            "density increased with noise: t = {t:.3}, mean shift {mean:.4}"
        );
    }
    // and the trend is real: significant decrease from sigma 0 to sigma 2
    let (mean, t) = t_stat(&densities[3], &densities[0]);
    assert!(
        t < -1.696 && mean < 0.0,
        "no significant overall decrease: t = {t:.3}, mean shift {mean:.4}"
    );
}

/// Zero-noise exactness across seeds and warp kinds, 16x16 grids.
#[test]
fn zero_noise_tasks_recover_truth() {
    for (i, warp) in [WarpKind::Permutation, WarpKind::BlockShuffle, WarpKind::SmoothWarp]
        .into_iter()
        .enumerate()
    {
        for seed in 0..4u64 {
            let task = generate_task(&TaskParams {
                seed: 100 * i as u64 + seed,
                warp,
                noise_sigma: 0.0,
                ..TaskParams::default()
            })
            .unwrap();
            let pseudo = task.pseudo_gt(3.0).unwrap();
            assert_eq!(pck(&pseudo, &task.truth, 1.0).unwrap(), 1.0);
            assert_eq!(pseudo.reliable_count(), task.truth.len());
        }
    }
}
