//! Synthetic diptych tasks with known person↔garment correspondences.
//!
//! The person panel is a known spatial rearrangement of the garment panel
//! inside the garment-region mask, descriptors are the latent vectors plus
//! isotropic noise, and the true correspondence is exported alongside the
//! grids. This makes the masked-descriptor pseudo-ground-truth pipeline
//! analytically checkable: at zero descriptor noise it must recover the
//! true bijection exactly.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cord;
use crate::error::{CoralError, Result};
use crate::grid::{BinaryMask, Correspondence, CorrespondenceSet, DescriptorGrid, GridCoord};
use crate::losses::Latent;
use crate::matching::extract_pseudo_gt;
use crate::rng::{stream_rng, STREAM_TASK};

/// Spatial rearrangement family for the person panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarpKind {
    /// Arbitrary cell permutation of the whole grid.
    Permutation,
    /// Permutes aligned 2x2 blocks, keeping within-block layout.
    BlockShuffle,
    /// Composition of smooth cyclic row/column shears; amplitude 0 is the
    /// identity warp.
    SmoothWarp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub warp: WarpKind,
    /// Shear amplitude in cells for smooth warps.
    pub warp_amplitude: f64,
    /// Isotropic descriptor noise level.
    pub noise_sigma: f64,
    /// Fraction of person cells inside the garment-region mask.
    pub mask_density: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 16,
            width: 16,
            channels: 4,
            warp: WarpKind::BlockShuffle,
            warp_amplitude: 2.0,
            noise_sigma: 0.0,
            mask_density: 0.75,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(CoralError::Config("degenerate task grid shape".into()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(CoralError::OutOfRange(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.mask_density > 0.0 && self.mask_density <= 1.0) {
            return Err(CoralError::OutOfRange(format!(
                "mask density must be in (0, 1], got {}",
                self.mask_density
            )));
        }
        if self.warp_amplitude.is_nan() || self.warp_amplitude < 0.0 {
            return Err(CoralError::OutOfRange("negative warp amplitude".into()));
        }
        Ok(())
    }
}

/// One generated diptych task with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub params: TaskParams,
    pub garment: Latent,
    pub person: Latent,
    /// Person-panel pose grid: a normalized coordinate embedding.
    pub pose: Latent,
    pub m_p: BinaryMask,
    pub m_g: BinaryMask,
    pub m_e: BinaryMask,
    pub desc_garment: DescriptorGrid,
    pub desc_person: DescriptorGrid,
    /// True person→garment bijection on masked-in cells.
    pub truth: CorrespondenceSet,
    /// Sub-cell targets for smooth warps, aligned with `truth` entries.
    pub truth_subcell: Vec<Option<(f64, f64)>>,
}

impl SyntheticTask {
    /// Runs the masked-descriptor matching pipeline on this task's
    /// descriptors.
    pub fn pseudo_gt(&self, gamma: f64) -> Result<CorrespondenceSet> {
        extract_pseudo_gt(
            &self.desc_person,
            &self.desc_garment,
            &self.m_p,
            &self.m_g,
            gamma,
        )
    }

    /// Concatenated `[garment || person]` descriptor rows in canvas token
    /// order, for the feature-alignment baseline.
    pub fn descriptor_rows(&self) -> Array2<f64> {
        let (h, w, c) = self.garment.dim();
        let mut rows = Array2::zeros((2 * h * w, c));
        for (panel, grid) in [(0, &self.desc_garment), (1, &self.desc_person)] {
            for y in 0..h {
                for x in 0..w {
                    let row = panel * h * w + y * w + x;
                    for ch in 0..c {
                        rows[[row, ch]] = grid.data()[[y, x, ch]];
                    }
                }
            }
        }
        rows
    }
}

/// Rounds through f32 so exported grids survive the CORD container
/// losslessly.
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn random_grid(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Latent {
    let data: Vec<f64> = (0..h * w * c)
        .map(|_| q32(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)))
        .collect();
    Array3::from_shape_vec((h, w, c), data).expect("shape")
}

/// The warp as a full-grid bijection: `map[linear(src)] = linear(dst)`,
/// plus sub-cell targets for smooth warps.
fn build_warp(
    rng: &mut impl Rng,
    params: &TaskParams,
) -> (Vec<usize>, Option<Vec<(f64, f64)>>) {
    let (h, w) = (params.height, params.width);
    let n = h * w;
    match params.warp {
        WarpKind::Permutation => {
            let mut map: Vec<usize> = (0..n).collect();
            map.shuffle(rng);
            (map, None)
        }
        WarpKind::BlockShuffle => {
            let b = if h % 2 == 0 && w % 2 == 0 { 2 } else { 1 };
            let (bh, bw) = (h / b, w / b);
            let mut blocks: Vec<usize> = (0..bh * bw).collect();
            blocks.shuffle(rng);
            let mut map = vec![0usize; n];
            for y in 0..h {
                for x in 0..w {
                    let block = (y / b) * bw + (x / b);
                    let dst_block = blocks[block];
                    let (dby, dbx) = (dst_block / bw, dst_block % bw);
                    let (dy, dx) = (dby * b + y % b, dbx * b + x % b);
                    map[y * w + x] = dy * w + dx;
                }
            }
            (map, None)
        }
        WarpKind::SmoothWarp => {
            let amp = params.warp_amplitude;
            let phase_x: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let phase_y: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut map = vec![0usize; n];
            let mut subcell = vec![(0.0, 0.0); n];
            for y in 0..h {
                for x in 0..w {
                    let sx = amp * (std::f64::consts::TAU * y as f64 / h as f64 + phase_x).sin();
                    let xi = (x as isize + sx.round() as isize).rem_euclid(w as isize) as usize;
                    let fx = (x as f64 + sx).rem_euclid(w as f64);
                    let sy = amp * (std::f64::consts::TAU * xi as f64 / w as f64 + phase_y).sin();
                    let yi = (y as isize + sy.round() as isize).rem_euclid(h as isize) as usize;
                    let fy = (y as f64 + sy).rem_euclid(h as f64);
                    map[y * w + x] = yi * w + xi;
                    subcell[y * w + x] = (fx, fy);
                }
            }
            (map, Some(subcell))
        }
    }
}

/// Generates one task deterministically from its parameters.
pub fn generate_task(params: &TaskParams) -> Result<SyntheticTask> {
    params.validate()?;
    let (h, w, c) = (params.height, params.width, params.channels);
    let n = h * w;
    let mut rng = stream_rng(params.seed, STREAM_TASK, 0);

    let garment = random_grid(&mut rng, h, w, c);
    let mut person = random_grid(&mut rng, h, w, c);

    // garment-region mask on the person panel: an exact seeded cell count
    let count = ((params.mask_density * n as f64).round() as usize).clamp(1, n);
    let mut cells: Vec<usize> = (0..n).collect();
    cells.shuffle(&mut rng);
    let mut m_p = BinaryMask::filled(h, w, false);
    for idx in cells.iter().take(count) {
        m_p.set(GridCoord::from_linear(*idx, w), true);
    }

    let (warp, subcell) = build_warp(&mut rng, params);

    // copy garment content into the person panel along the warp
    let mut m_g = BinaryMask::filled(h, w, false);
    let mut entries = Vec::with_capacity(count);
    let mut truth_subcell = Vec::with_capacity(count);
    for p in m_p.ones() {
        let g = GridCoord::from_linear(warp[p.linear(w)], w);
        for ch in 0..c {
            person[[p.y, p.x, ch]] = garment[[g.y, g.x, ch]];
        }
        m_g.set(g, true);
        entries.push(Correspondence {
            query: p,
            matched: g,
            reliable: true,
        });
        truth_subcell.push(subcell.as_ref().map(|s| s[p.linear(w)]));
    }
    let truth = CorrespondenceSet::new(entries)?;

    // descriptors: latents plus isotropic noise
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut noisy = |src: &Latent| -> Latent {
        src.mapv(|v| q32(v + params.noise_sigma * noise.sample(&mut rng)))
    };
    let desc_garment = DescriptorGrid::new(noisy(&garment))?;
    let desc_person = DescriptorGrid::new(noisy(&person))?;

    // pose: normalized coordinates of the person panel
    let mut pose = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            pose[[y, x, 0]] = q32((y as f64 + 0.5) / h as f64);
            if c > 1 {
                pose[[y, x, 1]] = q32((x as f64 + 0.5) / w as f64);
            }
        }
    }

    let m_e = m_p.clone();
    Ok(SyntheticTask {
        params: params.clone(),
        garment,
        person,
        pose,
        m_p,
        m_g,
        m_e,
        desc_garment,
        desc_person,
        truth,
        truth_subcell,
    })
}

/// Versioned task-directory manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskManifest {
    pub schema: String,
    pub params: TaskParams,
    pub truth: Vec<Correspondence>,
    pub truth_subcell: Vec<Option<(f64, f64)>>,
}

pub const TASK_SCHEMA: &str = "coral-task/1";

const GRID_FILES: [&str; 5] = [
    "garment.cord",
    "person.cord",
    "pose.cord",
    "desc_garment.cord",
    "desc_person.cord",
];
const MASK_FILES: [&str; 3] = ["mask_p.cord", "mask_g.cord", "mask_e.cord"];

/// Writes the task's grids as CORD files plus a JSON manifest carrying the
/// true correspondences.
pub fn export_task(task: &SyntheticTask, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let grids = [
        &task.garment,
        &task.person,
        &task.pose,
        task.desc_garment.data(),
        task.desc_person.data(),
    ];
    for (name, grid) in GRID_FILES.iter().zip(grids) {
        cord::write_grid(&dir.join(name), &DescriptorGrid::new(grid.clone())?)?;
    }
    let masks = [&task.m_p, &task.m_g, &task.m_e];
    for (name, mask) in MASK_FILES.iter().zip(masks) {
        cord::write_mask(&dir.join(name), mask)?;
    }
    let manifest = TaskManifest {
        schema: TASK_SCHEMA.to_string(),
        params: task.params.clone(),
        truth: task.truth.entries().to_vec(),
        truth_subcell: task.truth_subcell.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoralError::Format(format!("manifest: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a task directory back; inverse of [`export_task`].
pub fn import_task(dir: &Path) -> Result<SyntheticTask> {
    let manifest_path = dir.join("manifest.json");
    let manifest: TaskManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
        .map_err(|e| CoralError::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.schema != TASK_SCHEMA {
        return Err(CoralError::Format(format!(
            "unsupported task schema {:?}",
            manifest.schema
        )));
    }
    let mut grids = GRID_FILES
        .iter()
        .map(|name| cord::read_grid(&dir.join(name)));
    let garment = grids.next().unwrap()?;
    let person = grids.next().unwrap()?;
    let pose = grids.next().unwrap()?;
    let desc_garment = grids.next().unwrap()?;
    let desc_person = grids.next().unwrap()?;
    let mut masks = MASK_FILES.iter().map(|name| cord::read_mask(&dir.join(name)));
    let m_p = masks.next().unwrap()?;
    let m_g = masks.next().unwrap()?;
    let m_e = masks.next().unwrap()?;
    Ok(SyntheticTask {
        params: manifest.params,
        garment: garment.data().clone(),
        person: person.data().clone(),
        pose: pose.data().clone(),
        m_p,
        m_g,
        m_e,
        desc_garment,
        desc_person,
        truth: CorrespondenceSet::new(manifest.truth)?,
        truth_subcell: manifest.truth_subcell,
    })
}
