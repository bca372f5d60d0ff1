//! Raster panels: reconstruction comparisons with error maps, and segmentation overlays.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::data::{RoiSpec, SegMask, LABEL_LV, LABEL_MC, LABEL_RV};
use crate::error::Result;

/// Absolute errors at or above this value saturate in the error map.
pub const ERROR_MAP_CEILING: f64 = 0.25;

const ROI_COLOR: Rgb<u8> = Rgb([255, 40, 40]);

fn gray(v: f64) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

fn blit(canvas: &mut RgbImage, x0: u32, pixels: ArrayView2<f64>, scale: f64) {
    for ((r, c), &v) in pixels.indexed_iter() {
        canvas.put_pixel(x0 + c as u32, r as u32, gray(v * scale));
    }
}

fn rectangle(canvas: &mut RgbImage, x0: u32, roi: &RoiSpec) {
    let (top, left) = (roi.top() as u32, roi.left() as u32 + x0);
    let (bottom, right) = (top + roi.height as u32 - 1, left + roi.width as u32 - 1);
    for x in left..=right {
        canvas.put_pixel(x, top, ROI_COLOR);
        canvas.put_pixel(x, bottom, ROI_COLOR);
    }
    for y in top..=bottom {
        canvas.put_pixel(left, y, ROI_COLOR);
        canvas.put_pixel(right, y, ROI_COLOR);
    }
}

/// One row of tiles: FS, ZF, reconstruction, |reconstruction − FS|.
/// The ROI rectangle is drawn on the error tile.
pub fn reconstruction_panel(
    fs: ArrayView2<f64>,
    zf: ArrayView2<f64>,
    recon: ArrayView2<f64>,
    roi: Option<&RoiSpec>,
) -> RgbImage {
    let (h, w) = fs.dim();
    let mut canvas = RgbImage::new(4 * w as u32, h as u32);
    blit(&mut canvas, 0, fs, 1.0);
    blit(&mut canvas, w as u32, zf, 1.0);
    blit(&mut canvas, 2 * w as u32, recon, 1.0);
    let err = (&recon - &fs).mapv(f64::abs);
    blit(&mut canvas, 3 * w as u32, err.view(), 1.0 / ERROR_MAP_CEILING);
    if let Some(roi) = roi {
        rectangle(&mut canvas, 3 * w as u32, roi);
    }
    canvas
}

fn label_color(label: u8) -> Option<[f64; 3]> {
    match label {
        LABEL_RV => Some([230.0, 60.0, 60.0]),
        LABEL_MC => Some([60.0, 200.0, 80.0]),
        LABEL_LV => Some([70.0, 110.0, 240.0]),
        _ => None,
    }
}

/// Tiles of images with their label masks blended on top, left to right.
pub fn overlay_panel(tiles: &[(ArrayView2<f64>, &SegMask)]) -> RgbImage {
    let (h, w) = tiles.first().map(|t| t.0.dim()).unwrap_or((0, 0));
    let mut canvas = RgbImage::new((tiles.len() * w) as u32, h as u32);
    for (i, (img, mask)) in tiles.iter().enumerate() {
        let x0 = (i * w) as u32;
        for ((r, c), &v) in img.indexed_iter() {
            let base = v.clamp(0.0, 1.0) * 255.0;
            let px = match label_color(mask.labels()[[r, c]]) {
                Some(col) => Rgb(col.map(|k| (0.55 * base + 0.45 * k).round() as u8)),
                None => gray(v),
            };
            canvas.put_pixel(x0 + c as u32, r as u32, px);
        }
    }
    canvas
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
