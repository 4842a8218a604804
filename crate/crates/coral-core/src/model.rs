//! The toy denoiser: diptych latent construction, conditioning and mask
//! canvases, pose injection, a small stack of full-attention blocks with
//! hand-written backward passes, checkpointing, and an Euler sampler.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::{softmax_backward_row, softmax_rows, AttentionMap, Rope, Segment, SegmentKind, TokenSequence};
use crate::error::{CoralError, Result};
use crate::grid::BinaryMask;
use crate::losses::{Latent, ProjectionHead};
use crate::nn::{silu, silu_grad, Linear, Param2};
use crate::rng::{stream_rng, STREAM_INIT};

/// How the pose condition enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    /// Pose latents become extra tokens sharing the person tokens'
    /// positional indices.
    Token,
    /// Pose latents join the per-token channel stack through zero-initialized
    /// extra projection rows.
    Channel,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-panel latent shape.
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub pose_mode: PoseMode,
    pub context_tokens: usize,
    pub rope_base: f64,
    /// Adds one projection head per block for the feature-alignment
    /// baseline.
    pub repa_heads: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_height: 16,
            latent_width: 16,
            latent_channels: 4,
            model_dim: 64,
            heads: 2,
            layers: 2,
            ffn_dim: 128,
            pose_mode: PoseMode::Token,
            context_tokens: 0,
            rope_base: 10000.0,
            repa_heads: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Channel stack width before pose channels.
    pub fn base_in_dim(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn in_dim(&self) -> usize {
        match self.pose_mode {
            PoseMode::Channel => self.base_in_dim() + self.latent_channels,
            _ => self.base_in_dim(),
        }
    }

    pub fn canvas_tokens(&self) -> usize {
        2 * self.latent_height * self.latent_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_height == 0 || self.latent_width == 0 || self.latent_channels == 0 {
            return Err(CoralError::Config("latent shape must be non-empty".into()));
        }
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(CoralError::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(4) {
            return Err(CoralError::Config(format!(
                "head dim {} must be a multiple of 4 for 2D rotary planes",
                self.head_dim()
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(CoralError::Config("need at least one block".into()));
        }
        if self.rope_base.is_nan() || self.rope_base <= 0.0 {
            return Err(CoralError::Config("rope base must be positive".into()));
        }
        Ok(())
    }
}

/// Two-panel latent canvas `[garment || person]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiptychLatent {
    garment: Latent,
    person: Latent,
    canvas: Latent,
}

impl DiptychLatent {
    pub fn from_panels(garment: Latent, person: Latent) -> Result<Self> {
        let canvas = join_panels(&garment, &person)?;
        Ok(Self {
            garment,
            person,
            canvas,
        })
    }

    pub fn garment(&self) -> &Latent {
        &self.garment
    }

    pub fn person(&self) -> &Latent {
        &self.person
    }

    pub fn canvas(&self) -> &Latent {
        &self.canvas
    }
}

/// Horizontal concatenation `[garment || person]`.
pub fn join_panels(garment: &Latent, person: &Latent) -> Result<Latent> {
    let (h, w, c) = garment.dim();
    if person.dim() != (h, w, c) {
        return Err(CoralError::DimensionMismatch(format!(
            "panels differ: {:?} vs {:?}",
            garment.dim(),
            person.dim()
        )));
    }
    let mut canvas = Array3::zeros((h, 2 * w, c));
    canvas.slice_mut(s![.., ..w, ..]).assign(garment);
    canvas.slice_mut(s![.., w.., ..]).assign(person);
    Ok(canvas)
}

/// Splits a joined canvas back into its panels.
pub fn split_canvas(canvas: &Latent) -> Result<(Latent, Latent)> {
    let (_, w2, _) = canvas.dim();
    if !w2.is_multiple_of(2) {
        return Err(CoralError::DimensionMismatch(format!(
            "canvas width {w2} is not even"
        )));
    }
    let w = w2 / 2;
    Ok((
        canvas.slice(s![.., ..w, ..]).to_owned(),
        canvas.slice(s![.., w.., ..]).to_owned(),
    ))
}

/// Clean conditioning canvas and its edit-mask canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningCanvas {
    /// `[z_g || z_p * (1 - m_e)]`, shape `h x 2w x c`.
    pub clean: Latent,
    /// `[0 || m_e]`, shape `h x 2w`.
    pub mask: Array2<f64>,
}

/// Builds the noisy diptych latent and its conditioning canvases for one
/// timestep. `noise` covers the full `h x 2w x c` canvas.
pub fn build_diptych(
    z_g: &Latent,
    z_p: &Latent,
    m_e: &BinaryMask,
    t: f64,
    noise: &Latent,
) -> Result<(Latent, ConditioningCanvas)> {
    let (h, w, c) = z_g.dim();
    if z_p.dim() != (h, w, c) {
        return Err(CoralError::DimensionMismatch("panel shapes differ".into()));
    }
    if (m_e.height(), m_e.width()) != (h, w) {
        return Err(CoralError::DimensionMismatch(
            "edit mask does not match the person panel".into(),
        ));
    }
    if noise.dim() != (h, 2 * w, c) {
        return Err(CoralError::DimensionMismatch(
            "noise canvas must cover both panels".into(),
        ));
    }
    let clean_canvas = join_panels(z_g, z_p)?;
    let z_t = crate::losses::interpolate_latent(&clean_canvas, noise, t)?;

    let mut masked_person = z_p.clone();
    for y in 0..h {
        for x in 0..w {
            if m_e.get(crate::grid::GridCoord::new(x, y)) {
                masked_person.slice_mut(s![y, x, ..]).fill(0.0);
            }
        }
    }
    let clean = join_panels(z_g, &masked_person)?;
    let mut mask = Array2::zeros((h, 2 * w));
    for y in 0..h {
        for x in 0..w {
            if m_e.get(crate::grid::GridCoord::new(x, y)) {
                mask[[y, w + x]] = 1.0;
            }
        }
    }
    Ok((z_t, ConditioningCanvas { clean, mask }))
}

/// Garment-region-restricted noising:
/// `((1-t) z_p + t noise) * m_p + z_p * (1 - m_p)`.
pub fn masked_noising(z_p: &Latent, m_p: &BinaryMask, t: f64, noise: &Latent) -> Result<Latent> {
    let (h, w, _) = z_p.dim();
    if noise.dim() != z_p.dim() {
        return Err(CoralError::DimensionMismatch(
            "noise does not match the person panel".into(),
        ));
    }
    if (m_p.height(), m_p.width()) != (h, w) {
        return Err(CoralError::DimensionMismatch(
            "mask does not match the person panel".into(),
        ));
    }
    let noised = crate::losses::interpolate_latent(z_p, noise, t)?;
    let mut out = z_p.clone();
    for y in 0..h {
        for x in 0..w {
            if m_p.get(crate::grid::GridCoord::new(x, y)) {
                let src = noised.slice(s![y, x, ..]).to_owned();
                out.slice_mut(s![y, x, ..]).assign(&src);
            }
        }
    }
    Ok(out)
}

/// Raw per-token channel stack with its segment layout, before the input
/// projection.
#[derive(Debug, Clone)]
pub struct TokenAssembly {
    pub features: Array2<f64>,
    pub segments: Vec<Segment>,
    pub positions: Vec<(f64, f64)>,
}

/// Canvas-only token assembly: garment tokens then person tokens, each
/// carrying `[z_t, z_diptych, m_diptych]` channels. Context and pose
/// segments start empty.
pub fn assemble_canvas_tokens(z_t: &Latent, cond: &ConditioningCanvas) -> Result<TokenAssembly> {
    let (h, w2, c) = z_t.dim();
    if cond.clean.dim() != (h, w2, c) || cond.mask.dim() != (h, w2) {
        return Err(CoralError::DimensionMismatch(
            "conditioning canvas does not match the noisy canvas".into(),
        ));
    }
    if !w2.is_multiple_of(2) {
        return Err(CoralError::DimensionMismatch("odd canvas width".into()));
    }
    let w = w2 / 2;
    let base_in = 2 * c + 1;
    let tokens = h * w2;
    let mut features = Array2::zeros((tokens, base_in));
    let mut positions = Vec::with_capacity(tokens);
    let mut row = 0;
    // garment panel, then person panel, row-major within each
    for (panel, x_off) in [(0, 0usize), (1, w)] {
        let _ = panel;
        for y in 0..h {
            for x in 0..w {
                let cx = x_off + x;
                for ch in 0..c {
                    features[[row, ch]] = z_t[[y, cx, ch]];
                    features[[row, c + ch]] = cond.clean[[y, cx, ch]];
                }
                features[[row, 2 * c]] = cond.mask[[y, cx]];
                positions.push((cx as f64, y as f64));
                row += 1;
            }
        }
    }
    Ok(TokenAssembly {
        features,
        segments: vec![
            Segment {
                kind: SegmentKind::Context,
                len: 0,
                grid: None,
            },
            Segment {
                kind: SegmentKind::Garment,
                len: h * w,
                grid: Some((h, w)),
            },
            Segment {
                kind: SegmentKind::Person,
                len: h * w,
                grid: Some((h, w)),
            },
            Segment {
                kind: SegmentKind::Pose,
                len: 0,
                grid: None,
            },
        ],
        positions,
    })
}

/// Injects the pose condition into a canvas assembly.
///
/// Token mode appends a pose segment whose positional indices equal the
/// person segment's; channel mode widens every token's channel stack with
/// the pose diptych `[zeros || z_pose]`.
pub fn inject_pose(
    mut assembly: TokenAssembly,
    pose: Option<&Latent>,
    mode: PoseMode,
) -> Result<TokenAssembly> {
    if mode == PoseMode::None {
        return Ok(assembly);
    }
    let pose = pose.ok_or_else(|| {
        CoralError::Config("pose injection requested without a pose grid".into())
    })?;
    let person = assembly.segments[2].clone();
    let (h, w) = person
        .grid
        .ok_or_else(|| CoralError::Config("person segment has no grid".into()))?;
    let c = (assembly.features.ncols() - 1) / 2;
    if pose.dim() != (h, w, c) {
        return Err(CoralError::DimensionMismatch(format!(
            "pose grid {:?} does not match the person panel ({h}, {w}, {c})",
            pose.dim()
        )));
    }
    match mode {
        PoseMode::Token => {
            let base_in = assembly.features.ncols();
            let old = assembly.features.nrows();
            let mut features = Array2::zeros((old + h * w, base_in));
            features.slice_mut(s![..old, ..]).assign(&assembly.features);
            // person segment starts after context + garment
            let person_start = assembly.segments[0].len + assembly.segments[1].len;
            let mut row = old;
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        features[[row, ch]] = pose[[y, x, ch]];
                    }
                    let person_pos = assembly.positions[person_start + y * w + x];
                    assembly.positions.push(person_pos);
                    row += 1;
                }
            }
            assembly.features = features;
            assembly.segments[3] = Segment {
                kind: SegmentKind::Pose,
                len: h * w,
                grid: Some((h, w)),
            };
        }
        PoseMode::Channel => {
            let old_cols = assembly.features.ncols();
            let rows = assembly.features.nrows();
            let mut features = Array2::zeros((rows, old_cols + c));
            features
                .slice_mut(s![.., ..old_cols])
                .assign(&assembly.features);
            let person_start = assembly.segments[0].len + assembly.segments[1].len;
            for y in 0..h {
                for x in 0..w {
                    let row = person_start + y * w + x;
                    for ch in 0..c {
                        features[[row, old_cols + ch]] = pose[[y, x, ch]];
                    }
                }
            }
            assembly.features = features;
        }
        PoseMode::None => unreachable!(),
    }
    Ok(assembly)
}

struct Block {
    wq: Param2,
    wk: Param2,
    wv: Param2,
    wo: Param2,
    ffn1: Linear,
    ffn2: Linear,
}

pub struct BlockCache {
    x_in: Array2<f64>,
    q_rot: Vec<Array2<f64>>,
    k_rot: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    pub attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    x_mid: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    pub x_out: Array2<f64>,
}

impl Block {
    fn init(rng: &mut impl rand::Rng, model_dim: usize, ffn_dim: usize) -> Self {
        let std = 1.0 / (model_dim as f64).sqrt();
        Self {
            wq: Param2::randn(rng, model_dim, model_dim, std),
            wk: Param2::randn(rng, model_dim, model_dim, std),
            wv: Param2::randn(rng, model_dim, model_dim, std),
            wo: Param2::randn(rng, model_dim, model_dim, std),
            ffn1: Linear::init(rng, model_dim, ffn_dim),
            ffn2: Linear::init(rng, ffn_dim, model_dim),
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn forward(
        &self,
        x: &Array2<f64>,
        positions: &[(f64, f64)],
        rope: &Rope,
        heads: usize,
    ) -> BlockCache {
        let t = x.nrows();
        let head_dim = rope.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q_all = x.dot(&self.wq.v);
        let k_all = x.dot(&self.wk.v);
        let v_all = x.dot(&self.wv.v);

        let mut q_rot = Vec::with_capacity(heads);
        let mut k_rot = Vec::with_capacity(heads);
        let mut v_heads = Vec::with_capacity(heads);
        let mut attn = Vec::with_capacity(heads);
        let mut concat = Array2::zeros((t, heads * head_dim));
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let mut q = q_all.slice(s![.., cols.clone()]).to_owned();
            let mut k = k_all.slice(s![.., cols.clone()]).to_owned();
            for i in 0..t {
                rope.rotate(q.row_mut(i).as_slice_mut().expect("contiguous"), positions[i]);
                rope.rotate(k.row_mut(i).as_slice_mut().expect("contiguous"), positions[i]);
            }
            let scores = q.dot(&k.t()) * scale;
            let a = softmax_rows(&scores);
            let v = v_all.slice(s![.., cols.clone()]).to_owned();
            let out_h = a.dot(&v);
            concat.slice_mut(s![.., cols]).assign(&out_h);
            q_rot.push(q);
            k_rot.push(k);
            v_heads.push(v);
            attn.push(a);
        }
        let a_out = concat.dot(&self.wo.v);
        let x_mid = x + &a_out;
        let ffn_pre = self.ffn1.forward(&x_mid);
        let ffn_act = ffn_pre.mapv(silu);
        let f_out = self.ffn2.forward(&ffn_act);
        let x_out = &x_mid + &f_out;
        BlockCache {
            x_in: x.clone(),
            q_rot,
            k_rot,
            v: v_heads,
            attn,
            concat,
            x_mid,
            ffn_pre,
            ffn_act,
            x_out,
        }
    }

    /// Backward through the block. `d_attn_mean` is an optional extra
    /// gradient on the head-averaged attention matrix (from alignment
    /// losses); it splits evenly across heads.
    #[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
    fn backward(
        &mut self,
        cache: &BlockCache,
        positions: &[(f64, f64)],
        rope: &Rope,
        heads: usize,
        d_x_out: &Array2<f64>,
        d_attn_mean: Option<&Array2<f64>>,
    ) -> Array2<f64> {
        let t = cache.x_in.nrows();
        let head_dim = rope.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();

        // feed-forward + residual
        let d_act = self.ffn2.backward(&cache.ffn_act, d_x_out);
        let d_pre = &d_act * &cache.ffn_pre.mapv(silu_grad);
        let d_x_mid = self.ffn1.backward(&cache.x_mid, &d_pre) + d_x_out;

        // output projection
        let d_a_out = &d_x_mid;
        self.wo.g += &cache.concat.t().dot(d_a_out);
        let d_concat = d_a_out.dot(&self.wo.v.t());

        let mut d_q_all = Array2::zeros((t, heads * head_dim));
        let mut d_k_all = Array2::zeros((t, heads * head_dim));
        let mut d_v_all = Array2::zeros((t, heads * head_dim));
        let head_scale = 1.0 / heads as f64;
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let d_o = d_concat.slice(s![.., cols.clone()]);
            let mut d_attn = d_o.dot(&cache.v[h].t());
            if let Some(extra) = d_attn_mean {
                d_attn.scaled_add(head_scale, extra);
            }
            let d_v = cache.attn[h].t().dot(&d_o);

            let mut d_scores = Array2::zeros((t, t));
            for i in 0..t {
                softmax_backward_row(
                    cache.attn[h].row(i).as_slice().expect("contiguous"),
                    d_attn.row(i).as_slice().expect("contiguous"),
                    d_scores.row_mut(i).as_slice_mut().expect("contiguous"),
                );
            }
            let mut d_q = d_scores.dot(&cache.k_rot[h]) * scale;
            let mut d_k = d_scores.t().dot(&cache.q_rot[h]) * scale;
            for i in 0..t {
                rope.rotate_inverse(d_q.row_mut(i).as_slice_mut().expect("contiguous"), positions[i]);
                rope.rotate_inverse(d_k.row_mut(i).as_slice_mut().expect("contiguous"), positions[i]);
            }
            d_q_all.slice_mut(s![.., cols.clone()]).assign(&d_q);
            d_k_all.slice_mut(s![.., cols.clone()]).assign(&d_k);
            d_v_all.slice_mut(s![.., cols]).assign(&d_v);
        }
        self.wq.g += &cache.x_in.t().dot(&d_q_all);
        self.wk.g += &cache.x_in.t().dot(&d_k_all);
        self.wv.g += &cache.x_in.t().dot(&d_v_all);

        let mut d_x = d_q_all.dot(&self.wq.v.t());
        d_x += &d_k_all.dot(&self.wk.v.t());
        d_x += &d_v_all.dot(&self.wv.v.t());
        d_x += &d_x_mid;
        d_x
    }
}

/// Model inputs for one forward pass.
pub struct ModelInputs<'a> {
    pub z_t: &'a Latent,
    pub conditioning: &'a ConditioningCanvas,
    pub pose: Option<&'a Latent>,
}

/// Everything a forward pass retains: the token sequence, per-block caches
/// (attention maps included), and the predicted velocity canvas.
pub struct ForwardPass {
    pub assembly: TokenAssembly,
    pub sequence: TokenSequence,
    pub caches: Vec<BlockCache>,
    pub velocity: Latent,
}

impl ForwardPass {
    pub fn attention(&self, layer: usize) -> AttentionMap {
        AttentionMap {
            heads: self.caches[layer].attn.clone(),
        }
    }

    /// Head-averaged attention of one layer, without cloning the heads.
    pub fn attention_head_mean(&self, layer: usize) -> Array2<f64> {
        let heads = &self.caches[layer].attn;
        let mut acc = heads[0].clone();
        for h in &heads[1..] {
            acc += h;
        }
        acc / heads.len() as f64
    }

    pub fn layer_count(&self) -> usize {
        self.caches.len()
    }

    /// Block-output hidden states of one layer.
    pub fn hidden(&self, layer: usize) -> &Array2<f64> {
        &self.caches[layer].x_out
    }
}

/// Extra gradients injected by the alignment losses.
#[derive(Debug, Default)]
pub struct BackwardSignals {
    /// Gradient on the predicted velocity canvas.
    pub d_velocity: Option<Latent>,
    /// Per layer: gradient on the head-averaged attention matrix.
    pub d_attn_mean: Vec<Option<Array2<f64>>>,
    /// Per layer: gradient on the block-output hidden states.
    pub d_hidden: Vec<Option<Array2<f64>>>,
}

impl BackwardSignals {
    pub fn new(layers: usize) -> Self {
        Self {
            d_velocity: None,
            d_attn_mean: (0..layers).map(|_| None).collect(),
            d_hidden: (0..layers).map(|_| None).collect(),
        }
    }
}

pub struct DiptychModel {
    pub config: ModelConfig,
    input_proj: Linear,
    context_emb: Param2,
    blocks: Vec<Block>,
    output_proj: Linear,
    pub repa_heads: Vec<ProjectionHead>,
    rope: Rope,
}

impl DiptychModel {
    /// Builds a model with parameters drawn from the config seed's init
    /// stream; the channel-concat pose projection rows are zero-initialized
    /// so that, at initialization, the model matches the pose-free one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, STREAM_INIT, 0);
        let base_in = config.base_in_dim();
        let mut input_proj = Linear::init(&mut rng, base_in, config.model_dim);
        if config.pose_mode == PoseMode::Channel {
            input_proj.widen_input(config.latent_channels);
        }
        let context_emb = if config.context_tokens > 0 {
            Param2::randn(&mut rng, config.context_tokens, base_in, 0.5)
        } else {
            Param2::zeros(0, base_in)
        };
        let blocks = (0..config.layers)
            .map(|_| Block::init(&mut rng, config.model_dim, config.ffn_dim))
            .collect();
        let output_proj = Linear::init(&mut rng, config.model_dim, config.latent_channels);
        let repa_heads = if config.repa_heads {
            (0..config.layers)
                .map(|_| ProjectionHead::init(&mut rng, config.model_dim, config.latent_channels))
                .collect()
        } else {
            Vec::new()
        };
        let rope = Rope::new(config.head_dim(), config.rope_base)?;
        let mut model = Self {
            config,
            input_proj,
            context_emb,
            blocks,
            output_proj,
            repa_heads,
            rope,
        };
        model.quantize_params();
        Ok(model)
    }

    /// Visits `(param, grad)` slices in a frozen order; the checkpoint blob
    /// and the optimizer state both follow it.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        let lin = |l: &mut Linear, f: &mut dyn FnMut(&mut [f64], &mut [f64])| {
            f(
                l.w.v.as_slice_mut().expect("contiguous"),
                l.w.g.as_slice_mut().expect("contiguous"),
            );
            f(
                l.b.v.as_slice_mut().expect("contiguous"),
                l.b.g.as_slice_mut().expect("contiguous"),
            );
        };
        lin(&mut self.input_proj, f);
        if !self.context_emb.v.is_empty() {
            f(
                self.context_emb.v.as_slice_mut().expect("contiguous"),
                self.context_emb.g.as_slice_mut().expect("contiguous"),
            );
        }
        for b in &mut self.blocks {
            for p in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                f(
                    p.v.as_slice_mut().expect("contiguous"),
                    p.g.as_slice_mut().expect("contiguous"),
                );
            }
            lin(&mut b.ffn1, f);
            lin(&mut b.ffn2, f);
        }
        lin(&mut self.output_proj, f);
        for head in &mut self.repa_heads {
            lin(&mut head.fc1, f);
            lin(&mut head.fc2, f);
            lin(&mut head.fc3, f);
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    /// Rounds every parameter through f32 so the single-precision
    /// checkpoint blob is a lossless snapshot of the live model.
    pub fn quantize_params(&mut self) {
        self.visit_params(&mut |p, _| {
            for v in p.iter_mut() {
                *v = *v as f32 as f64;
            }
        });
    }

    pub fn assemble(&self, inputs: &ModelInputs) -> Result<TokenAssembly> {
        let cfg = &self.config;
        let (h, w2, c) = inputs.z_t.dim();
        if (h, w2, c)
            != (
                cfg.latent_height,
                2 * cfg.latent_width,
                cfg.latent_channels,
            )
        {
            return Err(CoralError::DimensionMismatch(format!(
                "noisy canvas {:?} does not match config",
                inputs.z_t.dim()
            )));
        }
        let mut asm = assemble_canvas_tokens(inputs.z_t, inputs.conditioning)?;
        asm = inject_pose(asm, inputs.pose, cfg.pose_mode)?;
        // learned context rows, zero-extended to the final channel width
        if cfg.context_tokens > 0 {
            let width = asm.features.ncols();
            let old = asm.features.nrows();
            let mut features = Array2::zeros((old + cfg.context_tokens, width));
            features
                .slice_mut(s![..cfg.context_tokens, ..self.context_emb.v.ncols()])
                .assign(&self.context_emb.v);
            features
                .slice_mut(s![cfg.context_tokens.., ..])
                .assign(&asm.features);
            asm.features = features;
            let mut positions = vec![(0.0, 0.0); cfg.context_tokens];
            positions.extend(asm.positions);
            asm.positions = positions;
            asm.segments[0].len = cfg.context_tokens;
        }
        Ok(asm)
    }

    pub fn forward(&self, inputs: &ModelInputs) -> Result<ForwardPass> {
        let assembly = self.assemble(inputs)?;
        let emb = self.input_proj.forward(&assembly.features);
        let sequence = TokenSequence::new(
            assembly.segments.clone(),
            emb,
            assembly.positions.clone(),
        )?;
        let mut x = sequence.embeddings.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let cache = block.forward(&x, &assembly.positions, &self.rope, self.config.heads);
            x = cache.x_out.clone();
            caches.push(cache);
        }
        let out_tokens = self.output_proj.forward(&x);
        let velocity = self.tokens_to_canvas(&sequence, &out_tokens);
        Ok(ForwardPass {
            assembly,
            sequence,
            caches,
            velocity,
        })
    }

    fn tokens_to_canvas(&self, sequence: &TokenSequence, tokens: &Array2<f64>) -> Latent {
        let (h, w, c) = (
            self.config.latent_height,
            self.config.latent_width,
            self.config.latent_channels,
        );
        let mut canvas = Array3::zeros((h, 2 * w, c));
        for (kind, x_off) in [(SegmentKind::Garment, 0usize), (SegmentKind::Person, w)] {
            let range = sequence.segment_range(kind);
            for (i, row) in range.enumerate() {
                let y = i / w;
                let x = i % w;
                for ch in 0..c {
                    canvas[[y, x_off + x, ch]] = tokens[[row, ch]];
                }
            }
        }
        canvas
    }

    fn canvas_to_token_grad(&self, sequence: &TokenSequence, canvas: &Latent) -> Array2<f64> {
        let (_, w, c) = (
            self.config.latent_height,
            self.config.latent_width,
            self.config.latent_channels,
        );
        let mut grad = Array2::zeros((sequence.total(), c));
        for (kind, x_off) in [(SegmentKind::Garment, 0usize), (SegmentKind::Person, w)] {
            let range = sequence.segment_range(kind);
            for (i, row) in range.enumerate() {
                let y = i / w;
                let x = i % w;
                for ch in 0..c {
                    grad[[row, ch]] = canvas[[y, x_off + x, ch]];
                }
            }
        }
        grad
    }

    /// Accumulates parameter gradients for the given pass and loss signals.
    pub fn backward(&mut self, pass: &ForwardPass, signals: &BackwardSignals) {
        let t = pass.sequence.total();
        let final_hidden = pass
            .caches
            .last()
            .map(|c| &c.x_out)
            .unwrap_or(&pass.sequence.embeddings);

        let mut d_x = match &signals.d_velocity {
            Some(dv) => {
                let d_tokens = self.canvas_to_token_grad(&pass.sequence, dv);
                self.output_proj.backward(final_hidden, &d_tokens)
            }
            None => Array2::zeros((t, self.config.model_dim)),
        };
        for l in (0..self.blocks.len()).rev() {
            if let Some(dh) = signals.d_hidden.get(l).and_then(|o| o.as_ref()) {
                d_x += dh;
            }
            let d_attn = signals.d_attn_mean.get(l).and_then(|o| o.as_ref());
            d_x = self.blocks[l].backward(
                &pass.caches[l],
                &pass.assembly.positions,
                &self.rope,
                self.config.heads,
                &d_x,
                d_attn,
            );
        }
        let d_features = self.input_proj.backward(&pass.assembly.features, &d_x);
        let ctx = self.config.context_tokens;
        if ctx > 0 {
            let cols = self.context_emb.v.ncols();
            self.context_emb.g += &d_features.slice(s![..ctx, ..cols]);
        }
    }

    /// Euler integration of the learned velocity field from pure noise at
    /// `t = 1` down to `t = 0`, for qualitative output grids.
    pub fn euler_sample(
        &self,
        conditioning: &ConditioningCanvas,
        pose: Option<&Latent>,
        steps: usize,
        noise: &Latent,
    ) -> Result<Latent> {
        if steps == 0 {
            return Err(CoralError::Config("sampler needs at least one step".into()));
        }
        let mut z = noise.clone();
        let dt = 1.0 / steps as f64;
        for i in 0..steps {
            let _t = 1.0 - i as f64 * dt;
            let pass = self.forward(&ModelInputs {
                z_t: &z,
                conditioning,
                pose,
            })?;
            z = &z - &(pass.velocity * dt);
        }
        Ok(z)
    }
}

const CKPT_MAGIC: [u8; 4] = *b"CORC";
const CKPT_VERSION: u8 = 1;

/// Optimizer payload stored alongside the parameter blob so training can
/// resume exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub optimizer: crate::train::OptimizerState,
}

/// Writes `CORC` version 1: config JSON header, f32 LE parameter blob in
/// visit order, then an optional trainer-state section.
pub fn save_checkpoint(
    path: &Path,
    model: &mut DiptychModel,
    trainer: Option<&TrainerState>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&[CKPT_VERSION])?;
    let config_json = serde_json::to_vec(&model.config)
        .map_err(|e| CoralError::Format(format!("config serialization: {e}")))?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;
    let count = model.param_count() as u64;
    w.write_all(&count.to_le_bytes())?;
    model.visit_params(&mut |p, _| {
        for v in p.iter() {
            // quantized after every update, so this cast is lossless
            let _ = w.write_all(&(*v as f32).to_le_bytes());
        }
    });
    match trainer {
        None => w.write_all(&[0u8])?,
        Some(state) => {
            w.write_all(&[1u8])?;
            let state_json = serde_json::to_vec(state)
                .map_err(|e| CoralError::Format(format!("trainer serialization: {e}")))?;
            w.write_all(&(state_json.len() as u32).to_le_bytes())?;
            w.write_all(&state_json)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DiptychModel, Option<TrainerState>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoralError::Format(format!("{}: truncated checkpoint", path.display())))?;
    if magic != CKPT_MAGIC {
        return Err(CoralError::Format(format!(
            "{}: bad checkpoint magic",
            path.display()
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != CKPT_VERSION {
        return Err(CoralError::Format(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            version[0]
        )));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut config_buf = vec![0u8; config_len];
    r.read_exact(&mut config_buf)?;
    let config: ModelConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| CoralError::Format(format!("{}: config: {e}", path.display())))?;
    let mut model = DiptychModel::new(config)?;
    let count = read_u64(&mut r)? as usize;
    if count != model.param_count() {
        return Err(CoralError::Format(format!(
            "{}: checkpoint has {count} params, model wants {}",
            path.display(),
            model.param_count()
        )));
    }
    let mut blob = vec![0u8; count * 4];
    r.read_exact(&mut blob)
        .map_err(|_| CoralError::Format(format!("{}: truncated parameter blob", path.display())))?;
    let mut offset = 0;
    model.visit_params(&mut |p, _| {
        for v in p.iter_mut() {
            let b = &blob[offset..offset + 4];
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            offset += 4;
        }
    });
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let trainer = match flag[0] {
        0 => None,
        1 => {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            Some(
                serde_json::from_slice(&buf)
                    .map_err(|e| CoralError::Format(format!("{}: trainer: {e}", path.display())))?,
            )
        }
        other => {
            return Err(CoralError::Format(format!(
                "{}: bad trainer flag {other}",
                path.display()
            )))
        }
    };
    Ok((model, trainer))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{full_attention, AttentionLayer};
    use crate::grid::GridCoord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            latent_height: 2,
            latent_width: 2,
            latent_channels: 2,
            model_dim: 8,
            heads: 2,
            layers: 2,
            ffn_dim: 12,
            pose_mode: PoseMode::None,
            context_tokens: 0,
            rope_base: 100.0,
            repa_heads: false,
            seed: 42,
        }
    }

    fn random_latent(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Latent {
        Array3::from_shape_vec(
            (h, w, c),
            (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    pub(crate) fn tiny_inputs(cfg: &ModelConfig, seed: u64) -> (Latent, ConditioningCanvas, Latent) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = (cfg.latent_height, cfg.latent_width, cfg.latent_channels);
        let z_g = random_latent(&mut rng, h, w, c);
        let z_p = random_latent(&mut rng, h, w, c);
        let noise = random_latent(&mut rng, h, 2 * w, c);
        let mut m_e = BinaryMask::filled(h, w, false);
        m_e.set(GridCoord::new(0, 0), true);
        m_e.set(GridCoord::new(1, 1), true);
        let (z_t, cond) = build_diptych(&z_g, &z_p, &m_e, 0.3, &noise).unwrap();
        let pose = random_latent(&mut rng, h, w, c);
        (z_t, cond, pose)
    }

    #[test]
    fn diptych_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_latent(&mut rng, 3, 4, 2);
        let p = random_latent(&mut rng, 3, 4, 2);
        let d = DiptychLatent::from_panels(g.clone(), p.clone()).unwrap();
        let (g2, p2) = split_canvas(d.canvas()).unwrap();
        assert_eq!(g, g2);
        assert_eq!(p, p2);
    }

    #[test]
    fn build_diptych_at_t_zero_is_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_latent(&mut rng, 2, 2, 2);
        let p = random_latent(&mut rng, 2, 2, 2);
        let noise = random_latent(&mut rng, 2, 4, 2);
        let m_e = BinaryMask::filled(2, 2, false);
        let (z_t, _) = build_diptych(&g, &p, &m_e, 0.0, &noise).unwrap();
        assert_eq!(z_t, join_panels(&g, &p).unwrap());
    }

    #[test]
    fn build_diptych_masks_person_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_latent(&mut rng, 2, 2, 2);
        let p = random_latent(&mut rng, 2, 2, 2);
        let noise = random_latent(&mut rng, 2, 4, 2);

        // all-ones edit mask: person half of the conditioning is zero
        let all = BinaryMask::filled(2, 2, true);
        let (_, cond) = build_diptych(&g, &p, &all, 0.5, &noise).unwrap();
        assert!(cond
            .clean
            .slice(s![.., 2.., ..])
            .iter()
            .all(|v| *v == 0.0));
        assert!(cond.mask.slice(s![.., ..2]).iter().all(|v| *v == 0.0));
        assert!(cond.mask.slice(s![.., 2..]).iter().all(|v| *v == 1.0));

        // single-cell mask zeroes exactly one person cell
        let mut one = BinaryMask::filled(2, 2, false);
        one.set(GridCoord::new(1, 0), true);
        let (_, cond) = build_diptych(&g, &p, &one, 0.5, &noise).unwrap();
        let mut zeroed = 0;
        for y in 0..2 {
            for x in 0..2 {
                let cell = cond.clean.slice(s![y, 2 + x, ..]);
                if cell.iter().all(|v| *v == 0.0) {
                    zeroed += 1;
                    assert_eq!((x, y), (1, 0));
                } else {
                    for ch in 0..2 {
                        assert_eq!(cell[ch], p[[y, x, ch]]);
                    }
                }
            }
        }
        assert_eq!(zeroed, 1);
    }

    #[test]
    fn masked_noising_examples() {
        let z = Array3::from_elem((1, 1, 1), 2.0);
        let noise = Array3::from_elem((1, 1, 1), 0.0);
        let off = BinaryMask::filled(1, 1, false);
        let on = BinaryMask::filled(1, 1, true);
        assert_eq!(masked_noising(&z, &off, 0.5, &noise).unwrap()[[0, 0, 0]], 2.0);
        assert_eq!(masked_noising(&z, &on, 0.5, &noise).unwrap()[[0, 0, 0]], 1.0);
        // all-ones mask equals plain interpolation
        assert_eq!(
            masked_noising(&z, &on, 0.25, &noise).unwrap(),
            crate::losses::interpolate_latent(&z, &noise, 0.25).unwrap()
        );
    }

    #[test]
    fn pose_token_counts_and_shared_positions() {
        let mut cfg = tiny_config();
        cfg.pose_mode = PoseMode::Token;
        let model = DiptychModel::new(cfg.clone()).unwrap();
        let (z_t, cond, pose) = tiny_inputs(&cfg, 9);
        let pass = model
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: Some(&pose),
            })
            .unwrap();
        let hw = cfg.latent_height * cfg.latent_width;
        assert_eq!(pass.sequence.total(), cfg.context_tokens + 2 * hw + hw);
        let pr = pass.sequence.segment_range(SegmentKind::Person);
        let sr = pass.sequence.segment_range(SegmentKind::Pose);
        for (pi, si) in pr.zip(sr) {
            assert_eq!(pass.sequence.positions[pi], pass.sequence.positions[si]);
        }
    }

    #[test]
    fn pose_none_leaves_input_unchanged() {
        let cfg = tiny_config();
        let (z_t, cond, pose) = tiny_inputs(&cfg, 10);
        let asm = assemble_canvas_tokens(&z_t, &cond).unwrap();
        let out = inject_pose(asm.clone(), Some(&pose), PoseMode::None).unwrap();
        assert_eq!(out.features, asm.features);
        assert_eq!(out.positions, asm.positions);
    }

    #[test]
    fn pose_grid_mismatch_errors() {
        let cfg = tiny_config();
        let (z_t, cond, _) = tiny_inputs(&cfg, 11);
        let asm = assemble_canvas_tokens(&z_t, &cond).unwrap();
        let bad = Array3::zeros((3, 2, 2));
        assert!(matches!(
            inject_pose(asm, Some(&bad), PoseMode::Token),
            Err(CoralError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn channel_concat_zero_init_matches_pose_free_model() {
        let mut base_cfg = tiny_config();
        base_cfg.context_tokens = 1;
        let mut chan_cfg = base_cfg.clone();
        chan_cfg.pose_mode = PoseMode::Channel;

        let base = DiptychModel::new(base_cfg.clone()).unwrap();
        let chan = DiptychModel::new(chan_cfg).unwrap();
        let (z_t, cond, pose) = tiny_inputs(&base_cfg, 12);

        let out_base = base
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: None,
            })
            .unwrap();
        let out_chan = chan
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: Some(&pose),
            })
            .unwrap();
        // bit-identical velocity at initialization
        assert_eq!(out_base.velocity, out_chan.velocity);
    }

    #[test]
    fn zero_weights_give_zero_velocity() {
        let cfg = tiny_config();
        let mut model = DiptychModel::new(cfg.clone()).unwrap();
        model.visit_params(&mut |p, _| p.fill(0.0));
        let (z_t, cond, _) = tiny_inputs(&cfg, 13);
        let pass = model
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: None,
            })
            .unwrap();
        assert!(pass.velocity.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let model = DiptychModel::new(cfg.clone()).unwrap();
        let (z_t, cond, _) = tiny_inputs(&cfg, 14);
        let a = model
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: None,
            })
            .unwrap();
        let b = model
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: None,
            })
            .unwrap();
        assert_eq!(a.velocity, b.velocity);
        for (ca, cb) in a.caches.iter().zip(&b.caches) {
            assert_eq!(ca.attn, cb.attn);
        }
    }

    #[test]
    fn block_attention_matches_public_full_attention() {
        let cfg = tiny_config();
        let model = DiptychModel::new(cfg.clone()).unwrap();
        let (z_t, cond, _) = tiny_inputs(&cfg, 15);
        let pass = model
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: None,
            })
            .unwrap();

        let block = &model.blocks[0];
        let layer = AttentionLayer::new(
            cfg.heads,
            cfg.head_dim(),
            block.wq.v.clone(),
            block.wk.v.clone(),
            block.wv.v.clone(),
            block.wo.v.clone(),
            Rope::new(cfg.head_dim(), cfg.rope_base).unwrap(),
        )
        .unwrap();
        let (_, map) = full_attention(&layer, &pass.sequence).unwrap();
        for (h, attn) in map.heads.iter().enumerate() {
            let diff = (attn - &pass.caches[0].attn[h])
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "head {h} deviates by {diff}");
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_hand_computation_on_tiny_block() {
        // 1x1 panels, one layer, one head; attention projections zeroed so
        // the attention is uniform and every stage is straight-line algebra.
        let cfg = ModelConfig {
            latent_height: 1,
            latent_width: 1,
            latent_channels: 1,
            model_dim: 4,
            heads: 1,
            layers: 1,
            ffn_dim: 2,
            pose_mode: PoseMode::None,
            context_tokens: 0,
            rope_base: 100.0,
            repa_heads: false,
            seed: 0,
        };
        let mut model = DiptychModel::new(cfg.clone()).unwrap();

        let w_in = [[0.2, -0.1, 0.3, 0.05], [0.1, 0.4, -0.2, 0.15], [-0.3, 0.2, 0.1, 0.25]];
        let b_in = [0.01, -0.02, 0.03, -0.04];
        let wv = [
            [0.1, 0.0, -0.1, 0.2],
            [0.0, 0.3, 0.1, -0.2],
            [0.2, -0.1, 0.0, 0.1],
            [-0.1, 0.2, 0.3, 0.0],
        ];
        let wo = [
            [0.2, 0.1, 0.0, -0.1],
            [0.1, -0.2, 0.3, 0.0],
            [0.0, 0.1, -0.1, 0.2],
            [0.3, 0.0, 0.1, 0.1],
        ];
        let b1 = [0.4, -0.7];
        let w2 = [[0.25, -0.15, 0.05, 0.1], [-0.2, 0.3, 0.1, -0.05]];
        let b2 = [0.02, 0.03, -0.01, 0.04];
        let w_out = [0.5, -0.25, 0.125, 0.375];
        let b_out = [0.1];

        // fill parameters in visit order: input w, input b, wq, wk, wv, wo,
        // ffn1 w, ffn1 b, ffn2 w, ffn2 b, output w, output b
        let mut flat: Vec<f64> = Vec::new();
        flat.extend(w_in.iter().flatten());
        flat.extend(b_in);
        flat.extend(std::iter::repeat_n(0.0, 16)); // wq
        flat.extend(std::iter::repeat_n(0.0, 16)); // wk
        flat.extend(wv.iter().flatten());
        flat.extend(wo.iter().flatten());
        flat.extend(std::iter::repeat_n(0.0, 8)); // ffn1 w
        flat.extend(b1);
        flat.extend(w2.iter().flatten());
        flat.extend(b2);
        flat.extend(w_out);
        flat.extend(b_out);
        let mut i = 0;
        model.visit_params(&mut |p, _| {
            p.copy_from_slice(&flat[i..i + p.len()]);
            i += p.len();
        });
        assert_eq!(i, flat.len());

        let z_g = Array3::from_elem((1, 1, 1), 0.8);
        let z_p = Array3::from_elem((1, 1, 1), -0.6);
        let noise = Array3::from_shape_vec((1, 2, 1), vec![0.5, -0.3]).unwrap();
        let m_e = BinaryMask::filled(1, 1, true);
        let t = 0.25;
        let (z_t, cond) = build_diptych(&z_g, &z_p, &m_e, t, &noise).unwrap();
        let pass = model
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: None,
            })
            .unwrap();

        // hand computation
        let zgt = 0.75 * 0.8 + 0.25 * 0.5;
        let zpt = 0.75 * (-0.6) + 0.25 * (-0.3);
        let feat_g = [zgt, 0.8, 0.0];
        let feat_p = [zpt, 0.0, 1.0];
        let lin3 = |f: [f64; 3]| {
            let mut out = [0.0; 4];
            for j in 0..4 {
                out[j] = b_in[j] + (0..3).map(|k| f[k] * w_in[k][j]).sum::<f64>();
            }
            out
        };
        let x_g = lin3(feat_g);
        let x_p = lin3(feat_p);
        let mat4 = |x: [f64; 4], w: [[f64; 4]; 4]| {
            let mut out = [0.0; 4];
            for j in 0..4 {
                out[j] = (0..4).map(|k| x[k] * w[k][j]).sum::<f64>();
            }
            out
        };
        let v_g = mat4(x_g, wv);
        let v_p = mat4(x_p, wv);
        // zero q/k: uniform attention over both tokens
        let o = [
            0.5 * (v_g[0] + v_p[0]),
            0.5 * (v_g[1] + v_p[1]),
            0.5 * (v_g[2] + v_p[2]),
            0.5 * (v_g[3] + v_p[3]),
        ];
        let a_out = mat4(o, wo);
        let xm_g: Vec<f64> = (0..4).map(|j| x_g[j] + a_out[j]).collect();
        let xm_p: Vec<f64> = (0..4).map(|j| x_p[j] + a_out[j]).collect();
        let act = [silu(b1[0]), silu(b1[1])];
        let f_add: Vec<f64> = (0..4)
            .map(|j| b2[j] + act[0] * w2[0][j] + act[1] * w2[1][j])
            .collect();
        let vel = |xm: &[f64]| {
            let xo: Vec<f64> = (0..4).map(|j| xm[j] + f_add[j]).collect();
            b_out[0] + (0..4).map(|j| xo[j] * w_out[j]).sum::<f64>()
        };
        let expect_g = vel(&xm_g);
        let expect_p = vel(&xm_p);

        assert!((pass.velocity[[0, 0, 0]] - expect_g).abs() < 1e-12);
        assert!((pass.velocity[[0, 1, 0]] - expect_p).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_normalize_across_layers() {
        let cfg = tiny_config();
        let model = DiptychModel::new(cfg.clone()).unwrap();
        let (z_t, cond, _) = tiny_inputs(&cfg, 16);
        let pass = model
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: None,
            })
            .unwrap();
        for l in 0..pass.layer_count() {
            assert!(pass.attention(l).max_row_sum_error() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = tiny_config();
        let mut model = DiptychModel::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &mut model, None).unwrap();
        let (mut back, trainer) = load_checkpoint(&path).unwrap();
        assert!(trainer.is_none());
        assert_eq!(back.config, model.config);

        let mut a = Vec::new();
        model.visit_params(&mut |p, _| a.extend_from_slice(p));
        let mut b = Vec::new();
        back.visit_params(&mut |p, _| b.extend_from_slice(p));
        assert_eq!(a, b);
    }

    #[test]
    fn euler_sampler_shape_and_determinism() {
        let cfg = tiny_config();
        let model = DiptychModel::new(cfg.clone()).unwrap();
        let (_, cond, _) = tiny_inputs(&cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = random_latent(&mut rng, cfg.latent_height, 2 * cfg.latent_width, cfg.latent_channels);
        let a = model.euler_sample(&cond, None, 4, &noise).unwrap();
        let b = model.euler_sample(&cond, None, 4, &noise).unwrap();
        assert_eq!(a.dim(), (2, 4, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn backward_velocity_only_matches_finite_difference() {
        // full-model gradient check through the velocity loss
        let cfg = tiny_config();
        let mut model = DiptychModel::new(cfg.clone()).unwrap();
        let (z_t, cond, _) = tiny_inputs(&cfg, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let target = random_latent(&mut rng, cfg.latent_height, 2 * cfg.latent_width, cfg.latent_channels);

        let mut theta = Vec::new();
        model.visit_params(&mut |p, _| theta.extend_from_slice(p));

        let loss_at = |params: &[f64]| -> f64 {
            let mut m = DiptychModel::new(cfg.clone()).unwrap();
            let mut i = 0;
            m.visit_params(&mut |p, _| {
                p.copy_from_slice(&params[i..i + p.len()]);
                i += p.len();
            });
            let pass = m
                .forward(&ModelInputs {
                    z_t: &z_t,
                    conditioning: &cond,
                    pose: None,
                })
                .unwrap();
            let diff = &pass.velocity - &target;
            diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
        };

        model.zero_grads();
        let pass = model
            .forward(&ModelInputs {
                z_t: &z_t,
                conditioning: &cond,
                pose: None,
            })
            .unwrap();
        let n = pass.velocity.len() as f64;
        let d_velocity = (&pass.velocity - &target).mapv(|v| 2.0 * v / n);
        let mut signals = BackwardSignals::new(cfg.layers);
        signals.d_velocity = Some(d_velocity);
        model.backward(&pass, &signals);
        let mut grad = Vec::new();
        model.visit_params(&mut |_, g| grad.extend_from_slice(g));

        let report = crate::losses::gradient_check(
            loss_at,
            |_| grad.clone(),
            &theta,
            1e-5,
            1e-4,
        );
        assert!(
            report.pass,
            "max rel err {} at {} (analytic {} vs fd {})",
            report.max_rel_error, report.worst_index, report.worst_analytic, report.worst_numeric
        );
    }
}
