//! Explanation overlays: original image and a copper-tinted rendering of
//! the selected patches, side by side, as a PNG.
//!
//! The tint is chosen so the mask survives a round trip: selected pixels
//! have red >= 184 while unselected pixels are dimmed below red 120, so
//! thresholding the red channel at 150 recovers the mask exactly.

use image::{Rgb, RgbImage};
use ndarray::ArrayView3;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patching::{PatchGrid, SubsetMask};

const GAP: u32 = 4;
const RED_THRESHOLD: u8 = 150;

fn luma(pixels: &ArrayView3<'_, f32>, y: usize, x: usize) -> f32 {
    let c = pixels.shape()[0];
    if c == 3 {
        0.299 * pixels[[0, y, x]] + 0.587 * pixels[[1, y, x]] + 0.114 * pixels[[2, y, x]]
    } else {
        let mut acc = 0.0;
        for ch in 0..c {
            acc += pixels[[ch, y, x]];
        }
        acc / c as f32
    }
}

fn gray_rgb(pixels: &ArrayView3<'_, f32>, y: usize, x: usize) -> Rgb<u8> {
    let c = pixels.shape()[0];
    if c == 3 {
        Rgb([
            (pixels[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            (pixels[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            (pixels[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
        ])
    } else {
        let g = (luma(pixels, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([g, g, g])
    }
}

fn tinted(g: f32) -> Rgb<u8> {
    // copper ramp: fully dark pixels still read as selected
    let g = g.clamp(0.0, 1.0);
    Rgb([
        (184.0 + 71.0 * g).round() as u8,
        (100.0 + 80.0 * g).round() as u8,
        (51.0 + 60.0 * g).round() as u8,
    ])
}

fn dimmed(g: f32) -> Rgb<u8> {
    let v = (110.0 * g.clamp(0.0, 1.0)).round() as u8;
    Rgb([v, v, v])
}

/// Render `original | overlay` side by side. Selected patches are tinted
/// copper, unselected patches dimmed.
pub fn render_overlay(
    pixels: ArrayView3<'_, f32>,
    explanation: &SubsetMask,
    grid: &PatchGrid,
) -> Result<RgbImage> {
    let (c, h, w) = grid.image_shape;
    if pixels.shape() != [c, h, w] {
        return Err(Error::contract("image shape does not match grid"));
    }
    if !explanation.is_hard() || explanation.len() != grid.d() {
        return Err(Error::contract("overlay needs a hard length-d mask"));
    }
    let width = (2 * w) as u32 + GAP;
    let mut img = RgbImage::from_pixel(width, h as u32, Rgb([255, 255, 255]));
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, gray_rgb(&pixels, y, x));
            let selected = explanation.values()[grid.patch_of_pixel(y, x)] == 1.0;
            let g = luma(&pixels, y, x);
            let shaded = if selected { tinted(g) } else { dimmed(g) };
            img.put_pixel(w as u32 + GAP + x as u32, y as u32, shaded);
        }
    }
    Ok(img)
}

pub fn save_overlay(
    pixels: ArrayView3<'_, f32>,
    explanation: &SubsetMask,
    grid: &PatchGrid,
    path: impl AsRef<Path>,
) -> Result<()> {
    let img = render_overlay(pixels, explanation, grid)?;
    img.save(path.as_ref())
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))
}

/// Recover the patch mask from a rendered overlay by thresholding the red
/// channel of the right half.
pub fn recover_mask(img: &RgbImage, grid: &PatchGrid) -> Result<SubsetMask> {
    let (_, h, w) = grid.image_shape;
    if img.width() != (2 * w) as u32 + GAP || img.height() != h as u32 {
        return Err(Error::contract("overlay dimensions do not match grid"));
    }
    let mut values = vec![0.0f64; grid.d()];
    for p in 0..grid.d() {
        let (r0, r1, c0, c1) = grid.patch_bounds(p);
        let mut selected_votes = 0usize;
        let mut total = 0usize;
        for y in r0..r1 {
            for x in c0..c1 {
                let pixel = img.get_pixel(w as u32 + GAP + x as u32, y as u32);
                if pixel[0] >= RED_THRESHOLD {
                    selected_votes += 1;
                }
                total += 1;
            }
        }
        if selected_votes != 0 && selected_votes != total {
            return Err(Error::contract(format!(
                "patch {p} is only partially tinted; not a rendered overlay"
            )));
        }
        values[p] = if selected_votes == total { 1.0 } else { 0.0 };
    }
    SubsetMask::hard(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn overlay_round_trip_recovers_the_mask() {
        let grid = PatchGrid::new((1, 8, 8), (2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pixels = Array3::from_shape_simple_fn((1, 8, 8), || rng.random::<f32>());
        for _ in 0..20 {
            let values: Vec<f64> = (0..16)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect();
            let mask = SubsetMask::hard(values).unwrap();
            let img = render_overlay(pixels.view(), &mask, &grid).unwrap();
            let back = recover_mask(&img, &grid).unwrap();
            assert_eq!(back.values(), mask.values());
        }
    }

    #[test]
    fn full_mask_tints_everything() {
        let grid = PatchGrid::new((1, 4, 4), (2, 2)).unwrap();
        let pixels = Array3::from_elem((1, 4, 4), 0.0f32);
        let img = render_overlay(pixels.view(), &SubsetMask::ones(4), &grid).unwrap();
        for y in 0..4u32 {
            for x in 0..4u32 {
                assert!(img.get_pixel(4 + GAP + x, y)[0] >= RED_THRESHOLD);
            }
        }
    }

    #[test]
    fn rgb_images_render_too() {
        let grid = PatchGrid::new((3, 4, 4), (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels = Array3::from_shape_simple_fn((3, 4, 4), || rng.random::<f32>());
        let img = render_overlay(pixels.view(), &SubsetMask::zeros(1), &grid).unwrap();
        assert_eq!(img.width(), 12);
        let back = recover_mask(&img, &grid).unwrap();
        assert_eq!(back.values(), &[0.0]);
    }
}
