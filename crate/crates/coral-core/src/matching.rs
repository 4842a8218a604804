//! Dense-matching primitives: descriptor masking, cosine cost maps,
//! argmax flows, cycle-consistency filtering, pseudo-ground-truth
//! extraction, PCK, correlation statistics, and flow warping.
//!
//! All functions are pure; ties in argmax scans are broken toward the
//! lowest row-major linear index so results are deterministic.

use ndarray::Array2;

use crate::error::{CoralError, Result};
use crate::grid::{
    BinaryMask, Correspondence, CorrespondenceSet, CostMap, DescriptorGrid, FlowField, GridCoord,
};

/// Matching direction for [`argmax_flow`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    /// Queries are flow sources: one target per query location.
    QueryToKey,
    /// Keys are flow sources: one target per key location.
    KeyToQuery,
}

/// Zeroes descriptor vectors outside the mask and returns the masked grid
/// together with the row-major list of surviving locations.
pub fn mask_descriptors(
    grid: &DescriptorGrid,
    mask: &BinaryMask,
) -> Result<(DescriptorGrid, Vec<GridCoord>)> {
    if !mask.matches_grid(grid) {
        return Err(CoralError::DimensionMismatch(format!(
            "mask {}x{} does not match grid {}x{}",
            mask.height(),
            mask.width(),
            grid.height(),
            grid.width()
        )));
    }
    let mut out = grid.clone();
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            if !mask.get(GridCoord::new(x, y)) {
                out.data_mut()
                    .slice_mut(ndarray::s![y, x, ..])
                    .fill(0.0);
            }
        }
    }
    Ok((out, mask.ones()))
}

/// Cosine-similarity cost between masked person queries and masked garment
/// keys: `C(i,j) = <p_i, g_j> / (|p_i| |g_j|)`.
///
/// A zero-norm descriptor at a masked-in location is an error rather than a
/// silent NaN.
pub fn cosine_cost(
    person: &DescriptorGrid,
    garment: &DescriptorGrid,
    person_mask: &BinaryMask,
    garment_mask: &BinaryMask,
) -> Result<CostMap> {
    if person.channels() != garment.channels() {
        return Err(CoralError::DimensionMismatch(format!(
            "channel counts differ: {} vs {}",
            person.channels(),
            garment.channels()
        )));
    }
    if !person_mask.matches_grid(person) || !garment_mask.matches_grid(garment) {
        return Err(CoralError::DimensionMismatch(
            "mask shape does not match its grid".into(),
        ));
    }
    let queries = person_mask.ones();
    let keys = garment_mask.ones();
    if queries.is_empty() || keys.is_empty() {
        return Err(CoralError::EmptyDomain(
            "cosine cost needs at least one masked-in location on each side".into(),
        ));
    }

    let q_norms = unit_norms(person, &queries, "person")?;
    let k_norms = unit_norms(garment, &keys, "garment")?;

    let mut values = Array2::zeros((queries.len(), keys.len()));
    for (qi, q) in queries.iter().enumerate() {
        let qv = person.vector(*q);
        for (ki, k) in keys.iter().enumerate() {
            let kv = garment.vector(*k);
            let dot: f64 = qv.iter().zip(kv.iter()).map(|(a, b)| a * b).sum();
            values[[qi, ki]] = dot / (q_norms[qi] * k_norms[ki]);
        }
    }
    CostMap::new(
        (person.height(), person.width()),
        (garment.height(), garment.width()),
        queries,
        keys,
        values,
    )
}

fn unit_norms(grid: &DescriptorGrid, locs: &[GridCoord], side: &str) -> Result<Vec<f64>> {
    locs.iter()
        .map(|c| {
            let n = grid.vector(*c).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(CoralError::DegenerateInput(format!(
                    "zero-norm {side} descriptor at ({}, {})",
                    c.x, c.y
                )))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Argmax flow over a cost map: every source location maps to the
/// coordinate of its maximal-similarity counterpart.
pub fn argmax_flow(cost: &CostMap, direction: FlowDirection) -> Result<FlowField> {
    if cost.num_queries() == 0 || cost.num_keys() == 0 {
        return Err(CoralError::EmptyDomain("cost map has an empty side".into()));
    }
    let (sources, targets, source_shape, values) = match direction {
        FlowDirection::QueryToKey => (
            &cost.query_locations,
            &cost.key_locations,
            cost.query_shape,
            cost.values.clone(),
        ),
        FlowDirection::KeyToQuery => (
            &cost.key_locations,
            &cost.query_locations,
            cost.key_shape,
            cost.values.t().to_owned(),
        ),
    };
    let mut flow = FlowField::invalid(source_shape.0, source_shape.1);
    for (si, s) in sources.iter().enumerate() {
        let best = argmax_row(values.row(si));
        flow.set_target(*s, targets[best].as_f64());
    }
    Ok(flow)
}

/// Index of the row maximum; the first (lowest linear index) wins ties.
pub(crate) fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.iter().enumerate() {
        if *v > best_v {
            best_v = *v;
            best = i;
        }
    }
    best
}

/// Cycle-consistency reliability mask: location `i` is reliable iff
/// `|F_bwd(F_fwd(i)) - i| < gamma` (strict). Fractional forward targets are
/// rounded to the nearest integer cell before the backward lookup; a
/// rounded target that leaves the backward grid or lands on an invalid
/// backward cell is unreliable.
pub fn cycle_consistency_mask(
    forward: &FlowField,
    backward: &FlowField,
    gamma: f64,
) -> Result<BinaryMask> {
    if gamma < 0.0 {
        return Err(CoralError::OutOfRange(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    let fwd_ok = forward.targets_within((backward.height(), backward.width()));
    let bwd_ok = backward.targets_within((forward.height(), forward.width()));
    if !fwd_ok || !bwd_ok {
        return Err(CoralError::DimensionMismatch(
            "forward/backward flows do not index each other's grids".into(),
        ));
    }
    let mut mask = BinaryMask::filled(forward.height(), forward.width(), false);
    for y in 0..forward.height() {
        for x in 0..forward.width() {
            let start = GridCoord::new(x, y);
            let Some((tx, ty)) = forward.target(start) else {
                continue;
            };
            let gx = tx.round() as isize;
            let gy = ty.round() as isize;
            if gx < 0 || gy < 0 || gx >= backward.width() as isize || gy >= backward.height() as isize
            {
                continue;
            }
            let g = GridCoord::new(gx as usize, gy as usize);
            let Some(back) = backward.target(g) else {
                continue;
            };
            if start.dist(back) < gamma {
                mask.set(start, true);
            }
        }
    }
    Ok(mask)
}

/// Pseudo ground truth: argmax matches for queries the reliability mask
/// keeps, flagged entries for the rest.
pub fn pseudo_gt(cost: &CostMap, reliability: &BinaryMask) -> Result<CorrespondenceSet> {
    if reliability.height() != cost.query_shape.0 || reliability.width() != cost.query_shape.1 {
        return Err(CoralError::DimensionMismatch(format!(
            "reliability mask {}x{} does not cover query grid {}x{}",
            reliability.height(),
            reliability.width(),
            cost.query_shape.0,
            cost.query_shape.1
        )));
    }
    let mut entries = Vec::with_capacity(cost.num_queries());
    for (qi, q) in cost.query_locations.iter().enumerate() {
        let best = argmax_row(cost.values.row(qi));
        entries.push(Correspondence {
            query: *q,
            matched: cost.key_locations[best],
            reliable: reliability.get(*q),
        });
    }
    CorrespondenceSet::new(entries)
}

/// Masked-descriptor pipeline from raw descriptor grids to a reliability-
/// filtered pseudo-ground-truth correspondence set.
pub fn extract_pseudo_gt(
    person_desc: &DescriptorGrid,
    garment_desc: &DescriptorGrid,
    person_mask: &BinaryMask,
    garment_mask: &BinaryMask,
    gamma: f64,
) -> Result<CorrespondenceSet> {
    let (person_masked, _) = mask_descriptors(person_desc, person_mask)?;
    let (garment_masked, _) = mask_descriptors(garment_desc, garment_mask)?;
    let cost = cosine_cost(&person_masked, &garment_masked, person_mask, garment_mask)?;
    let forward = argmax_flow(&cost, FlowDirection::QueryToKey)?;
    let backward = argmax_flow(&cost, FlowDirection::KeyToQuery)?;
    let reliability = cycle_consistency_mask(&forward, &backward, gamma)?;
    pseudo_gt(&cost, &reliability)
}

/// Percentage of correct keypoints at threshold `alpha` (strict `< alpha`).
///
/// Evaluation is restricted to queries that are reliable in `gt`; zero
/// evaluable queries is an error rather than a silent `0/0`.
pub fn pck(pred: &CorrespondenceSet, gt: &CorrespondenceSet, alpha: f64) -> Result<f64> {
    let mut evaluated = 0usize;
    let mut correct = 0usize;
    for g in gt.entries().iter().filter(|e| e.reliable) {
        let p = pred.get(g.query).ok_or_else(|| {
            CoralError::DimensionMismatch(format!(
                "prediction missing for query ({}, {})",
                g.query.x, g.query.y
            ))
        })?;
        evaluated += 1;
        if p.matched.dist(g.matched.as_f64()) < alpha {
            correct += 1;
        }
    }
    if evaluated == 0 {
        return Err(CoralError::EmptyDomain(
            "no reliable ground-truth queries to evaluate".into(),
        ));
    }
    Ok(correct as f64 / evaluated as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CoralError::DimensionMismatch(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(CoralError::EmptyDomain(
            "pearson correlation needs at least two samples".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoralError::DegenerateInput(
            "zero variance in pearson input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Warps a source grid through a flow with nearest-neighbor sampling.
///
/// Invalid-flow locations are zero-filled; out-of-bounds targets are
/// clamped to the source grid edge.
pub fn warp_by_flow(source: &DescriptorGrid, flow: &FlowField) -> DescriptorGrid {
    let mut out = DescriptorGrid::zeros(flow.height(), flow.width(), source.channels());
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let at = GridCoord::new(x, y);
            let Some((tx, ty)) = flow.target(at) else {
                continue;
            };
            let sx = (tx.round() as isize).clamp(0, source.width() as isize - 1) as usize;
            let sy = (ty.round() as isize).clamp(0, source.height() as isize - 1) as usize;
            let src = source.vector(GridCoord::new(sx, sy)).to_owned();
            out.data_mut()
                .slice_mut(ndarray::s![y, x, ..])
                .assign(&src);
        }
    }
    out
}
