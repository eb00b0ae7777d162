//! Static renderings: colour-coded part maps, overlays and transfer grids.
//!
//! Part maps are upsampled bilinearly to the image size before the argmax,
//! the same rule the overlap metric uses. Background is drawn grey in the
//! label image and left untinted in the overlay; part `k` takes entry
//! `k - 1` of [`PALETTE`], cycling when there are more parts than colours.

use image::{imageops, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView3};

use crate::data::toy::array_to_rgb;
use crate::evaluation::{argmax_labels, upsample_bilinear};

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
];

/// Opacity of the part colour in overlays.
pub const OVERLAY_ALPHA: f32 = 0.5;

pub fn part_color(label: u8) -> Option<[u8; 3]> {
    (label > 0).then(|| PALETTE[(label as usize - 1) % PALETTE.len()])
}

/// Argmax labels of `[K+1, h, w]` probabilities at `size x size`.
pub fn labels_at(probs: ArrayView3<f32>, size: usize) -> Array2<u8> {
    argmax_labels(upsample_bilinear(probs, size, size).view())
}

pub fn label_image(labels: &Array2<u8>) -> RgbImage {
    let (h, w) = labels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(part_color(labels[(y as usize, x as usize)]).unwrap_or(BACKGROUND))
    })
}

pub fn overlay(image: &RgbImage, labels: &Array2<u8>) -> RgbImage {
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if let Some(c) = part_color(labels[(y as usize, x as usize)]) {
            for i in 0..3 {
                px[i] = ((1.0 - OVERLAY_ALPHA) * px[i] as f32 + OVERLAY_ALPHA * c[i] as f32).round() as u8;
            }
        }
    }
    out
}

/// Input, label map and overlay of one image stacked top to bottom.
pub fn segmentation_panel(image: &Array3<f32>, probs: ArrayView3<f32>) -> RgbImage {
    let rgb = array_to_rgb(image);
    let labels = labels_at(probs, rgb.width() as usize);
    let (w, h) = rgb.dimensions();
    let mut panel = RgbImage::new(w, 3 * h);
    imageops::replace(&mut panel, &rgb, 0, 0);
    imageops::replace(&mut panel, &label_image(&labels), 0, h as i64);
    imageops::replace(&mut panel, &overlay(&rgb, &labels), 0, 2 * h as i64);
    panel
}

/// Grid with the shape images along the top, the appearance images down the
/// left and `cells[i][j]` at row `i + 1`, column `j + 1`.
pub fn transfer_grid(appearance: &[Array3<f32>], shape: &[Array3<f32>], cells: &[Vec<Array3<f32>>]) -> RgbImage {
    let n = appearance.first().or(shape.first()).map_or(0, |a| a.dim().2) as u32;
    let mut grid = RgbImage::from_pixel(n * (shape.len() as u32 + 1), n * (appearance.len() as u32 + 1), Rgb([255, 255, 255]));
    let put = |grid: &mut RgbImage, img: &Array3<f32>, row: u32, col: u32| {
        imageops::replace(grid, &array_to_rgb(img), (col * n) as i64, (row * n) as i64);
    };
    for (j, s) in shape.iter().enumerate() {
        put(&mut grid, s, 0, j as u32 + 1);
    }
    for (i, a) in appearance.iter().enumerate() {
        put(&mut grid, a, i as u32 + 1, 0);
        for (j, cell) in cells[i].iter().enumerate() {
            put(&mut grid, cell, i as u32 + 1, j as u32 + 1);
        }
    }
    grid
}
