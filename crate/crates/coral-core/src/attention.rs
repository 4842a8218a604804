//! A minimal multimodal full-attention layer: four-segment token layout,
//! 2D rotary position embeddings with shared person/pose indices,
//! person→garment sub-attention extraction, and hard/soft correspondence
//! readout with analytic gradients.

use std::ops::Range;

use ndarray::{s, Array2};

use crate::error::{CoralError, Result};
use crate::grid::{BinaryMask, Correspondence, CorrespondenceSet, CostMap, GridCoord};
use crate::matching::argmax_row;

/// Fixed segment order of the joint token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Context,
    Garment,
    Person,
    Pose,
}

pub const SEGMENT_ORDER: [SegmentKind; 4] = [
    SegmentKind::Context,
    SegmentKind::Garment,
    SegmentKind::Person,
    SegmentKind::Pose,
];

#[derive(Debug, Clone)]
pub struct Segment {
    pub kind: SegmentKind,
    pub len: usize,
    /// Grid shape for spatial segments, `None` for context tokens.
    pub grid: Option<(usize, usize)>,
}

/// Ordered token sequence `[context | garment | person | pose]` with
/// per-token model-dim embeddings and 2D positional indices.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    segments: Vec<Segment>,
    pub embeddings: Array2<f64>,
    pub positions: Vec<(f64, f64)>,
}

impl TokenSequence {
    pub fn new(
        segments: Vec<Segment>,
        embeddings: Array2<f64>,
        positions: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if segments.len() != SEGMENT_ORDER.len()
            || segments
                .iter()
                .zip(SEGMENT_ORDER.iter())
                .any(|(s, k)| s.kind != *k)
        {
            return Err(CoralError::Config(
                "segments must be [context | garment | person | pose]".into(),
            ));
        }
        let total: usize = segments.iter().map(|s| s.len).sum();
        if embeddings.nrows() != total || positions.len() != total {
            return Err(CoralError::DimensionMismatch(format!(
                "{} tokens declared, {} embeddings, {} positions",
                total,
                embeddings.nrows(),
                positions.len()
            )));
        }
        for s in &segments {
            if let Some((h, w)) = s.grid {
                if s.len != h * w {
                    return Err(CoralError::DimensionMismatch(format!(
                        "segment token count {} does not match grid {h}x{w}",
                        s.len
                    )));
                }
            }
        }
        let seq = Self {
            segments,
            embeddings,
            positions,
        };
        // Pose tokens mirror the person grid and its positional indices.
        if seq.segment(SegmentKind::Pose).len > 0 {
            let person = seq.segment(SegmentKind::Person);
            let pose = seq.segment(SegmentKind::Pose);
            if person.grid != pose.grid || person.len != pose.len {
                return Err(CoralError::Config(
                    "pose segment must mirror the person grid".into(),
                ));
            }
            let pr = seq.segment_range(SegmentKind::Person);
            let sr = seq.segment_range(SegmentKind::Pose);
            for (pi, si) in pr.zip(sr) {
                if seq.positions[pi] != seq.positions[si] {
                    return Err(CoralError::Config(format!(
                        "pose token {si} does not share its person token's positional index"
                    )));
                }
            }
        }
        Ok(seq)
    }

    pub fn total(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn segment(&self, kind: SegmentKind) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.kind == kind)
            .expect("all four segments present")
    }

    pub fn segment_range(&self, kind: SegmentKind) -> Range<usize> {
        let mut start = 0;
        for s in &self.segments {
            if s.kind == kind {
                return start..start + s.len;
            }
            start += s.len;
        }
        unreachable!("all four segments present")
    }

    /// Token index of a grid cell inside a spatial segment.
    pub fn token_index(&self, kind: SegmentKind, at: GridCoord) -> usize {
        let (_, w) = self.segment(kind).grid.expect("spatial segment");
        self.segment_range(kind).start + at.linear(w)
    }
}

/// 2D rotary position embedding over a head dimension.
///
/// The head dimension splits in half per axis; each half is a bank of
/// interleaved rotation planes with geometrically spaced frequencies
/// `base^(-k/planes)`.
#[derive(Debug, Clone)]
pub struct Rope {
    head_dim: usize,
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(4) {
            return Err(CoralError::Config(format!(
                "rope head dim must be a positive multiple of 4, got {head_dim}"
            )));
        }
        let planes = head_dim / 4;
        let inv_freq = (0..planes)
            .map(|k| base.powf(-(k as f64) / planes as f64))
            .collect();
        Ok(Self { head_dim, inv_freq })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotates a head-dim vector in place by the angles of `pos`.
    pub fn rotate(&self, v: &mut [f64], pos: (f64, f64)) {
        debug_assert_eq!(v.len(), self.head_dim);
        self.apply(v, pos, 1.0);
    }

    /// Inverse rotation; the adjoint of [`Rope::rotate`] for backprop.
    pub fn rotate_inverse(&self, v: &mut [f64], pos: (f64, f64)) {
        debug_assert_eq!(v.len(), self.head_dim);
        self.apply(v, pos, -1.0);
    }

    fn apply(&self, v: &mut [f64], pos: (f64, f64), sign: f64) {
        let half = self.head_dim / 2;
        for (axis, coord) in [pos.0, pos.1].into_iter().enumerate() {
            let off = axis * half;
            for (k, f) in self.inv_freq.iter().enumerate() {
                let angle = sign * coord * f;
                let (sin, cos) = angle.sin_cos();
                let i = off + 2 * k;
                let (a, b) = (v[i], v[i + 1]);
                v[i] = a * cos - b * sin;
                v[i + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Rotates one `(a, b)` plane by `angle`.
pub fn rotate_pair(a: f64, b: f64, angle: f64) -> (f64, f64) {
    let (sin, cos) = angle.sin_cos();
    (a * cos - b * sin, a * sin + b * cos)
}

/// Multi-head attention projections with rotary embedding configuration.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub heads: usize,
    pub head_dim: usize,
    /// model dim × (heads · head dim)
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// (heads · head dim) × model dim
    pub wo: Array2<f64>,
    pub rope: Rope,
}

impl AttentionLayer {
    pub fn new(
        heads: usize,
        head_dim: usize,
        wq: Array2<f64>,
        wk: Array2<f64>,
        wv: Array2<f64>,
        wo: Array2<f64>,
        rope: Rope,
    ) -> Result<Self> {
        let inner = heads * head_dim;
        if heads == 0 || head_dim == 0 {
            return Err(CoralError::Config("need at least one head".into()));
        }
        if rope.head_dim() != head_dim {
            return Err(CoralError::Config(
                "rope head dim does not match layer head dim".into(),
            ));
        }
        let model_dim = wq.nrows();
        for (name, m, dim) in [
            ("wq", &wq, (model_dim, inner)),
            ("wk", &wk, (model_dim, inner)),
            ("wv", &wv, (model_dim, inner)),
            ("wo", &wo, (inner, model_dim)),
        ] {
            if m.dim() != dim {
                return Err(CoralError::DimensionMismatch(format!(
                    "{name} has shape {:?}, expected {:?}",
                    m.dim(),
                    dim
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(CoralError::NonFinite(format!("{name} projection")));
            }
        }
        Ok(Self {
            heads,
            head_dim,
            wq,
            wk,
            wv,
            wo,
            rope,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.wq.nrows()
    }
}

/// Post-softmax attention weights, one `T×T` matrix per head.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub heads: Vec<Array2<f64>>,
}

impl AttentionMap {
    pub fn num_tokens(&self) -> usize {
        self.heads[0].nrows()
    }

    /// Head-averaged attention; rows remain distributions.
    pub fn head_mean(&self) -> Array2<f64> {
        let mut acc = self.heads[0].clone();
        for h in &self.heads[1..] {
            acc += h;
        }
        acc / self.heads.len() as f64
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.heads
            .iter()
            .flat_map(|h| h.rows().into_iter().map(|r| (r.sum() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of a softmax row: given probabilities and the gradient on
/// them, returns the gradient on the logits.
pub fn softmax_backward_row(probs: &[f64], d_probs: &[f64], d_logits: &mut [f64]) {
    let inner: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    for ((dl, p), g) in d_logits.iter_mut().zip(probs).zip(d_probs) {
        *dl = p * (g - inner);
    }
}

/// Full attention over the joint sequence: RoPE on queries and keys, then
/// `softmax(QK^T/√d)` per head, then the value/output projections. Returns
/// the outputs and the retained attention map.
pub fn full_attention(
    layer: &AttentionLayer,
    sequence: &TokenSequence,
) -> Result<(Array2<f64>, AttentionMap)> {
    if sequence.total() == 0 {
        return Err(CoralError::EmptyDomain("empty token sequence".into()));
    }
    if sequence.embeddings.ncols() != layer.model_dim() {
        return Err(CoralError::DimensionMismatch(format!(
            "sequence dim {} vs layer dim {}",
            sequence.embeddings.ncols(),
            layer.model_dim()
        )));
    }
    let t = sequence.total();
    let scale = 1.0 / (layer.head_dim as f64).sqrt();
    let q_all = sequence.embeddings.dot(&layer.wq);
    let k_all = sequence.embeddings.dot(&layer.wk);
    let v_all = sequence.embeddings.dot(&layer.wv);

    let mut heads = Vec::with_capacity(layer.heads);
    let mut concat = Array2::zeros((t, layer.heads * layer.head_dim));
    for h in 0..layer.heads {
        let cols = h * layer.head_dim..(h + 1) * layer.head_dim;
        let mut q = q_all.slice(s![.., cols.clone()]).to_owned();
        let mut k = k_all.slice(s![.., cols.clone()]).to_owned();
        for i in 0..t {
            let pos = sequence.positions[i];
            layer
                .rope
                .rotate(q.row_mut(i).as_slice_mut().expect("contiguous"), pos);
            layer
                .rope
                .rotate(k.row_mut(i).as_slice_mut().expect("contiguous"), pos);
        }
        let scores = q.dot(&k.t()) * scale;
        let attn = softmax_rows(&scores);
        let v = v_all.slice(s![.., cols.clone()]);
        let out_h = attn.dot(&v);
        concat.slice_mut(s![.., cols]).assign(&out_h);
        heads.push(attn);
    }
    let outputs = concat.dot(&layer.wo);
    Ok((outputs, AttentionMap { heads }))
}

/// Head reduction for sub-attention extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadReduce {
    Mean,
    PerHead(usize),
}

/// The person→garment block of an attention matrix, read as a matching
/// cost, plus the per-row attention mass that fell outside the garment
/// key set.
#[derive(Debug, Clone)]
pub struct SubAttention {
    pub cost: CostMap,
    pub residual: Vec<f64>,
}

impl SubAttention {
    /// Attention mass each row keeps inside the garment key set.
    pub fn row_mass(&self, row: usize) -> f64 {
        self.cost.values.row(row).sum()
    }
}

/// Restricts an attention matrix to person-query rows inside `person_mask`
/// and garment-key columns inside `garment_mask`.
pub fn extract_sub_attention(
    map: &AttentionMap,
    sequence: &TokenSequence,
    person_mask: &BinaryMask,
    garment_mask: &BinaryMask,
    reduce: HeadReduce,
) -> Result<SubAttention> {
    let full = match reduce {
        HeadReduce::Mean => map.head_mean(),
        HeadReduce::PerHead(h) => map
            .heads
            .get(h)
            .ok_or_else(|| CoralError::Config(format!("head {h} out of range")))?
            .clone(),
    };
    extract_sub_attention_from(&full, sequence, person_mask, garment_mask)
}

/// Same extraction from an already-reduced full attention matrix.
pub fn extract_sub_attention_from(
    full: &Array2<f64>,
    sequence: &TokenSequence,
    person_mask: &BinaryMask,
    garment_mask: &BinaryMask,
) -> Result<SubAttention> {
    let person_grid = sequence
        .segment(SegmentKind::Person)
        .grid
        .ok_or_else(|| CoralError::Config("person segment has no grid".into()))?;
    let garment_grid = sequence
        .segment(SegmentKind::Garment)
        .grid
        .ok_or_else(|| CoralError::Config("garment segment has no grid".into()))?;
    if (person_mask.height(), person_mask.width()) != person_grid
        || (garment_mask.height(), garment_mask.width()) != garment_grid
    {
        return Err(CoralError::DimensionMismatch(
            "masks do not align with the person/garment segment grids".into(),
        ));
    }
    let queries = person_mask.ones();
    let keys = garment_mask.ones();
    if queries.is_empty() || keys.is_empty() {
        return Err(CoralError::EmptyDomain(
            "sub-attention needs non-empty person and garment sets".into(),
        ));
    }
    let mut values = Array2::zeros((queries.len(), keys.len()));
    let mut residual = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let row = sequence.token_index(SegmentKind::Person, *q);
        let mut kept = 0.0;
        for (ki, k) in keys.iter().enumerate() {
            let col = sequence.token_index(SegmentKind::Garment, *k);
            let v = full[[row, col]];
            values[[qi, ki]] = v;
            kept += v;
        }
        residual.push(full.row(row).sum() - kept);
    }
    let cost = CostMap::new(person_grid, garment_grid, queries, keys, values)?;
    Ok(SubAttention { cost, residual })
}

/// Argmax readout per person query; ties go to the lowest linear index.
pub fn hard_correspondence(sub: &SubAttention) -> Result<CorrespondenceSet> {
    if sub.cost.num_queries() == 0 {
        return Err(CoralError::EmptyDomain("empty sub-attention".into()));
    }
    let entries = sub
        .cost
        .query_locations
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let best = argmax_row(sub.cost.values.row(qi));
            Correspondence {
                query: *q,
                matched: sub.cost.key_locations[best],
                reliable: true,
            }
        })
        .collect();
    CorrespondenceSet::new(entries)
}

/// Whether the soft readout renormalizes each row over the garment keys
/// before taking the expectation. Raw mode keeps the missing attention
/// mass, which biases the expectation toward the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SoftArgmaxMode {
    Renormalized,
    Raw,
}

/// Soft argmax over garment keys: the (renormalized) attention-weighted
/// expected key coordinate per person query.
pub fn soft_correspondence(sub: &SubAttention) -> Result<Vec<(f64, f64)>> {
    soft_correspondence_with(sub, SoftArgmaxMode::Renormalized)
}

pub fn soft_correspondence_with(
    sub: &SubAttention,
    mode: SoftArgmaxMode,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(sub.cost.num_queries());
    for qi in 0..sub.cost.num_queries() {
        let mass = sub.row_mass(qi);
        if mode == SoftArgmaxMode::Renormalized && mass <= 0.0 {
            let q = sub.cost.query_locations[qi];
            return Err(CoralError::DegenerateInput(format!(
                "zero garment mass in row for query ({}, {})",
                q.x, q.y
            )));
        }
        let mut ex = 0.0;
        let mut ey = 0.0;
        for (ki, k) in sub.cost.key_locations.iter().enumerate() {
            let w = sub.cost.values[[qi, ki]];
            ex += w * k.x as f64;
            ey += w * k.y as f64;
        }
        if mode == SoftArgmaxMode::Renormalized {
            ex /= mass;
            ey /= mass;
        }
        out.push((ex, ey));
    }
    Ok(out)
}

/// Gradient of one soft-argmax row w.r.t. its sub-attention weights.
///
/// `d_pred` is the upstream gradient on the predicted `(x, y)`; the return
/// value aligns with `key_locations`.
pub fn soft_correspondence_backward_row(
    weights: &[f64],
    key_locations: &[GridCoord],
    pred: (f64, f64),
    d_pred: (f64, f64),
    mode: SoftArgmaxMode,
) -> Vec<f64> {
    match mode {
        SoftArgmaxMode::Renormalized => {
            let mass: f64 = weights.iter().sum();
            key_locations
                .iter()
                .map(|k| {
                    (d_pred.0 * (k.x as f64 - pred.0) + d_pred.1 * (k.y as f64 - pred.1)) / mass
                })
                .collect()
        }
        SoftArgmaxMode::Raw => key_locations
            .iter()
            .map(|k| d_pred.0 * k.x as f64 + d_pred.1 * k.y as f64)
            .collect(),
    }
}

/// Shannon entropy of a probability row in nats, with `0 log 0 = 0`.
pub fn row_entropy(row: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for p in row {
        if *p < 0.0 {
            return Err(CoralError::InvalidDistribution(format!(
                "negative probability {p}"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CoralError::InvalidDistribution(format!(
            "row sums to {sum}, not 1"
        )));
    }
    Ok(row
        .iter()
        .map(|p| if *p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum())
}

/// Gradient of [`row_entropy`] w.r.t. the probabilities. Entries with zero
/// probability get a zero gradient, matching the `0 log 0 = 0` convention.
pub fn row_entropy_backward(row: &[f64], d_entropy: f64, d_row: &mut [f64]) {
    for (d, p) in d_row.iter_mut().zip(row) {
        *d += if *p > 0.0 {
            -d_entropy * (p.ln() + 1.0)
        } else {
            0.0
        };
    }
}

/// Writes every head's attention matrix as a CORD grid
/// `attn_l{layer}_h{head}.cord` under `dir`.
pub fn export_attention_maps(map: &AttentionMap, dir: &std::path::Path, layer: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (h, attn) in map.heads.iter().enumerate() {
        let path = dir.join(format!("attn_l{layer}_h{h}.cord"));
        crate::cord::write_matrix(&path, attn)?;
    }
    Ok(())
}
