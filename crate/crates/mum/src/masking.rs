//! Patch grids, per-view random masks, and reconstruction targets.
//!
//! A view is divided into `N = grid_h * grid_w` non-overlapping square
//! patches. Masks mark exactly `round(ratio * N)` patches as hidden (ties at
//! .5 broken toward floor); the reconstruction target is the per-patch
//! standardized pixel vector. Masks are sampled fresh for every view of every
//! step, never cached.

use crate::error::{MumError, Result};
use crate::numerics::Array;
use crate::rng::Rng;

/// Geometry of the patch decomposition of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    /// Grid for an H×W image; dimensions must divide exactly.
    pub fn for_image(h: usize, w: usize, patch_size: usize) -> Result<PatchGrid> {
        if patch_size == 0 || h == 0 || w == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(MumError::Shape {
                op: "patch_grid",
                shape: vec![h, w],
                reason: format!("dimensions must be positive multiples of patch_size {patch_size}"),
            });
        }
        Ok(PatchGrid {
            patch_size,
            grid_h: h / patch_size,
            grid_w: w / patch_size,
        })
    }

    /// Number of patches.
    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Flattened patch length: 3 channels × patch_size².
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// (row, col) grid position of patch `k`.
    pub fn position(&self, k: usize) -> (u32, u32) {
        ((k / self.grid_w) as u32, (k % self.grid_w) as u32)
    }

    /// Grid positions for all N patches in order.
    pub fn positions(&self) -> Vec<(u32, u32)> {
        (0..self.n()).map(|k| self.position(k)).collect()
    }

    /// Pixel coordinates (x, y) of each patch center, patch order.
    pub fn patch_centers(&self) -> Vec<(f64, f64)> {
        let half = (self.patch_size as f64 - 1.0) / 2.0;
        (0..self.n())
            .map(|k| {
                let (r, c) = self.position(k);
                (
                    c as f64 * self.patch_size as f64 + half,
                    r as f64 * self.patch_size as f64 + half,
                )
            })
            .collect()
    }
}

/// Per-view binary patch mask; `true` marks a masked (hidden) patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    pub bits: Vec<bool>,
    pub ratio: f64,
}

impl PatchMask {
    pub fn all_visible(n: usize) -> PatchMask {
        PatchMask {
            bits: vec![false; n],
            ratio: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.bits.len()
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

/// `round(gamma * n)` with exact .5 ties broken toward floor.
pub fn masked_count(n: usize, gamma: f64) -> usize {
    let x = gamma * n as f64;
    let fl = x.floor();
    let count = if (x - fl - 0.5).abs() <= 1e-9 {
        fl
    } else {
        x.round()
    };
    (count as usize).min(n)
}

/// Sample a mask with exactly `round(gamma * n)` masked patches chosen
/// uniformly without replacement.
pub fn sample_mask(n: usize, gamma: f64, rng: &mut Rng) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(MumError::contract(
            "sample_mask",
            format!("gamma {gamma} outside [0, 1]"),
        ));
    }
    let m = masked_count(n, gamma);
    let mut bits = vec![false; n];
    for i in rng.distinct_sorted(n, m) {
        bits[i] = true;
    }
    Ok(PatchMask { bits, ratio: gamma })
}

/// When enabled, replace view 0's mask with a fully visible one (ratio 0),
/// leaving the other views unchanged. Disabled by default.
pub fn apply_reference_view(mut masks: Vec<PatchMask>, enabled: bool) -> Vec<PatchMask> {
    if enabled {
        if let Some(first) = masks.first_mut() {
            *first = PatchMask::all_visible(first.n());
        }
    }
    masks
}

/// Split a (3, H, W) image into (N, patch_dim) rows; row `k` holds patch
/// `(k div grid_w, k mod grid_w)` flattened channel-major.
pub fn patchify(image: &Array, grid: &PatchGrid) -> Result<Array> {
    let ps = grid.patch_size;
    let (h, w) = (grid.grid_h * ps, grid.grid_w * ps);
    if image.shape() != [3, h, w] {
        return Err(MumError::Shape {
            op: "patchify",
            shape: image.shape().to_vec(),
            reason: format!("expected (3, {h}, {w}) for this grid"),
        });
    }
    let n = grid.n();
    let pd = grid.patch_dim();
    let data = image.data();
    let mut out = Vec::with_capacity(n * pd);
    for k in 0..n {
        let (r, c) = (k / grid.grid_w, k % grid.grid_w);
        for ch in 0..3 {
            for py in 0..ps {
                let y = r * ps + py;
                let base = ch * h * w + y * w + c * ps;
                out.extend_from_slice(&data[base..base + ps]);
            }
        }
    }
    Array::from_vec(&[n, pd], out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &Array, grid: &PatchGrid) -> Result<Array> {
    let ps = grid.patch_size;
    let (h, w) = (grid.grid_h * ps, grid.grid_w * ps);
    let n = grid.n();
    let pd = grid.patch_dim();
    if patches.shape() != [n, pd] {
        return Err(MumError::Shape {
            op: "unpatchify",
            shape: patches.shape().to_vec(),
            reason: format!("expected ({n}, {pd}) for this grid"),
        });
    }
    let data = patches.data();
    let mut out = vec![0.0; 3 * h * w];
    for k in 0..n {
        let (r, c) = (k / grid.grid_w, k % grid.grid_w);
        for ch in 0..3 {
            for py in 0..ps {
                let y = r * ps + py;
                let src = k * pd + ch * ps * ps + py * ps;
                let dst = ch * h * w + y * w + c * ps;
                out[dst..dst + ps].copy_from_slice(&data[src..src + ps]);
            }
        }
    }
    Array::from_vec(&[3, h, w], out)
}

/// Reconstruction target: when `normalize` is set, each patch row becomes
/// `(row - mean(row)) / (std(row) + eps)` with the population std; otherwise
/// the raw pixels pass through.
pub fn pixel_target(patches: &Array, normalize: bool, eps: f64) -> Result<Array> {
    if eps <= 0.0 {
        return Err(MumError::contract("pixel_target", "eps must be positive"));
    }
    if !normalize {
        return Ok(patches.clone());
    }
    let (n, pd) = patches.dims2("pixel_target")?;
    let mut out = patches.data().to_vec();
    for r in 0..n {
        let row = &mut out[r * pd..(r + 1) * pd];
        let mean = row.iter().sum::<f64>() / pd as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / pd as f64;
        let denom = var.sqrt() + eps;
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    Array::from_vec(&[n, pd], out)
}

/// One view prepared for the model: its visible patch rows, their indices,
/// and the full reconstruction target.
#[derive(Clone, Debug)]
pub struct MaskedViewTokens {
    /// Strictly increasing indices of visible patches.
    pub visible_indices: Vec<usize>,
    /// (n_visible, patch_dim) raw pixel rows.
    pub visible_patches: Array,
    /// (N, patch_dim) target for every patch, masked or not.
    pub target: Array,
}

impl MaskedViewTokens {
    pub fn new(patches: &Array, mask: &PatchMask, normalize: bool, eps: f64) -> Result<Self> {
        let (n, pd) = patches.dims2("masked_view")?;
        if mask.n() != n {
            return Err(MumError::Contract {
                op: "masked_view",
                reason: format!("mask has {} bits for {n} patches", mask.n()),
            });
        }
        let visible_indices = mask.visible_indices();
        let mut vis = Vec::with_capacity(visible_indices.len() * pd);
        for &i in &visible_indices {
            vis.extend_from_slice(patches.row(i));
        }
        Ok(MaskedViewTokens {
            visible_patches: Array::from_vec(&[visible_indices.len(), pd], vis)?,
            visible_indices,
            target: pixel_target(patches, normalize, eps)?,
        })
    }

    pub fn n_visible(&self) -> usize {
        self.visible_indices.len()
    }
}
