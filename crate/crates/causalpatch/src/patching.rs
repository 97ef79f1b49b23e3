//! Disjoint patch grids and patch-level masking.
//!
//! Masks are *keep indicators*: value 1 keeps a patch's pixels, value 0
//! zeroes them. The selector emits a keep-mask for the complement set
//! directly; an explanation of size `k` is the complement of a
//! `(d - k)`-hot keep-mask. One convention everywhere.

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A partition of an image into disjoint rectangular patches, indexed
/// row-major (top-left patch is index 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_shape: (usize, usize, usize),
    pub patch_shape: (usize, usize),
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(image_shape: (usize, usize, usize), patch_shape: (usize, usize)) -> Result<Self> {
        let (c, h, w) = image_shape;
        let (ph, pw) = patch_shape;
        if c == 0 || h == 0 || w == 0 || ph == 0 || pw == 0 {
            return Err(Error::config("image and patch dims must be positive"));
        }
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::config(format!(
                "patch shape {ph}x{pw} does not tile image {h}x{w} exactly"
            )));
        }
        Ok(PatchGrid {
            image_shape,
            patch_shape,
            rows: h / ph,
            cols: w / pw,
        })
    }

    /// Number of patches `d`.
    pub fn d(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_area(&self) -> usize {
        self.patch_shape.0 * self.patch_shape.1
    }

    /// Pixel bounds of patch `p` as `(row_start, row_end, col_start, col_end)`,
    /// ends exclusive.
    pub fn patch_bounds(&self, p: usize) -> (usize, usize, usize, usize) {
        debug_assert!(p < self.d());
        let (ph, pw) = self.patch_shape;
        let r = p / self.cols;
        let c = p % self.cols;
        (r * ph, (r + 1) * ph, c * pw, (c + 1) * pw)
    }

    pub fn patch_of_pixel(&self, y: usize, x: usize) -> usize {
        let (ph, pw) = self.patch_shape;
        (y / ph) * self.cols + (x / pw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Hard,
    Relaxed,
}

/// Per-patch keep-mask of length `d`. Hard masks are binary; relaxed masks
/// take values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMask {
    values: Vec<f64>,
    kind: MaskKind,
}

impl SubsetMask {
    pub fn hard(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("hard mask entries must be exactly 0 or 1"));
        }
        Ok(SubsetMask {
            values,
            kind: MaskKind::Hard,
        })
    }

    pub fn relaxed(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("relaxed mask entries must be in [0, 1]"));
        }
        Ok(SubsetMask {
            values,
            kind: MaskKind::Relaxed,
        })
    }

    /// Hard mask with ones exactly at `indices`.
    pub fn from_indices(d: usize, indices: &[usize]) -> Result<Self> {
        let mut values = vec![0.0; d];
        for &i in indices {
            if i >= d {
                return Err(Error::contract(format!("patch index {i} out of range {d}")));
            }
            values[i] = 1.0;
        }
        Self::hard(values)
    }

    pub fn ones(d: usize) -> Self {
        SubsetMask {
            values: vec![1.0; d],
            kind: MaskKind::Hard,
        }
    }

    pub fn zeros(d: usize) -> Self {
        SubsetMask {
            values: vec![0.0; d],
            kind: MaskKind::Hard,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_hard(&self) -> bool {
        self.kind == MaskKind::Hard
    }

    /// Number of ones in a hard mask.
    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// Indices of the kept (value 1) patches of a hard mask.
    pub fn indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Entrywise complement of a hard mask: an m-hot mask becomes (d-m)-hot.
pub fn complement(mask: &SubsetMask) -> Result<SubsetMask> {
    if !mask.is_hard() {
        return Err(Error::contract("complement is defined on hard masks only"));
    }
    Ok(SubsetMask {
        values: mask.values.iter().map(|v| 1.0 - v).collect(),
        kind: MaskKind::Hard,
    })
}

fn check_mask_grid(mask: &SubsetMask, grid: &PatchGrid) -> Result<()> {
    if mask.len() != grid.d() {
        return Err(Error::contract(format!(
            "mask length {} does not match grid d={}",
            mask.len(),
            grid.d()
        )));
    }
    Ok(())
}

/// Multiply each patch of `image` by its mask value. Mask value 1 keeps the
/// patch bit-identically, 0 zeroes it; relaxed values scale it, broadcast
/// over channels.
pub fn apply_mask(
    image: ArrayView3<'_, f32>,
    mask: &SubsetMask,
    grid: &PatchGrid,
) -> Result<Array3<f32>> {
    check_mask_grid(mask, grid)?;
    let (c, h, w) = grid.image_shape;
    if image.shape() != [c, h, w] {
        return Err(Error::contract(format!(
            "image shape {:?} does not match grid image shape {:?}",
            image.shape(),
            grid.image_shape
        )));
    }
    let mut out = image.to_owned();
    for p in 0..grid.d() {
        let v = mask.values[p] as f32;
        if v == 1.0 {
            continue;
        }
        let (r0, r1, c0, c1) = grid.patch_bounds(p);
        for ch in 0..c {
            for y in r0..r1 {
                for x in c0..c1 {
                    out[[ch, y, x]] *= v;
                }
            }
        }
    }
    Ok(out)
}

/// Expand a patch mask to pixel space: each pixel carries its patch's value.
pub fn mask_to_pixel_map(mask: &SubsetMask, grid: &PatchGrid) -> Result<Array2<f32>> {
    check_mask_grid(mask, grid)?;
    let (_, h, w) = grid.image_shape;
    let mut out = Array2::zeros((h, w));
    for p in 0..grid.d() {
        let v = mask.values[p] as f32;
        let (r0, r1, c0, c1) = grid.patch_bounds(p);
        for y in r0..r1 {
            for x in c0..c1 {
                out[[y, x]] = v;
            }
        }
    }
    Ok(out)
}
