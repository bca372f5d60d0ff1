//! On-disk dataset layout:
//!
//! ```text
//! root/{train,val,test}/images/<slice_id>.pgm   16-bit (or 8-bit) grayscale
//! root/{train,val,test}/masks/<slice_id>.pgm    labels 0..=3
//! root/{train,val,test}/rois.csv                optional: slice_id,center_row,center_col
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{
    center_fit, prepare_slice, roi_from_seg, DatasetItem, DatasetSplit, RoiSpec, SegMask,
    SplitRole, IMAGE_SIZE,
};
use crate::error::{Error, Result};

fn ingestion(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| ingestion(path, e.to_string()))
}

/// Reads a grayscale raster as raw intensities (no normalisation).
pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        other => other.to_luma16().into_raw().into_iter().map(f64::from).collect(),
    };
    Array2::from_shape_vec((h, w), values).map_err(|e| ingestion(path, e.to_string()))
}

pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<u8> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| u8::try_from(v).unwrap_or(u8::MAX))
            .collect(),
        _ => return Err(ingestion(path, "mask is not a grayscale image")),
    };
    Array2::from_shape_vec((h, w), values).map_err(|e| ingestion(path, e.to_string()))
}

/// Writes `[0, 1]` pixels as a 16-bit binary PGM.
pub fn write_gray16(path: &Path, pixels: ArrayView2<f64>) -> Result<()> {
    let (h, w) = pixels.dim();
    let raw: Vec<u16> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    buf.save_with_format(path, ImageFormat::Pnm)?;
    Ok(())
}

pub fn write_mask(path: &Path, labels: ArrayView2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    let buf = GrayImage::from_raw(w as u32, h as u32, labels.iter().copied().collect())
        .expect("buffer size matches");
    buf.save_with_format(path, ImageFormat::Pnm)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RoiRow {
    slice_id: String,
    center_row: usize,
    center_col: usize,
}

pub fn read_rois_csv(path: &Path) -> Result<BTreeMap<String, RoiSpec>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ingestion(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let row: RoiRow = row.map_err(|e| ingestion(path, e.to_string()))?;
        let roi = RoiSpec::centered(row.center_row, row.center_col);
        out.insert(row.slice_id, roi);
    }
    Ok(out)
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads one split; items are sorted by slice id.
pub fn load_dataset(root: &Path, role: SplitRole) -> Result<DatasetSplit> {
    let dir = root.join(role.dir_name());
    let images = stems(&dir.join("images"))?;
    let masks = stems(&dir.join("masks"))?;
    if images.is_empty() && masks.is_empty() {
        return Err(Error::EmptySplit(format!("{role} ({})", dir.display())));
    }
    if let Some((id, _)) = masks.iter().find(|(id, _)| !images.contains_key(*id)) {
        let expected = dir.join("images").join(format!("{id}.pgm"));
        return Err(ingestion(&expected, format!("image for slice '{id}' is missing")));
    }
    let rois_path = dir.join("rois.csv");
    let rois = if rois_path.exists() {
        read_rois_csv(&rois_path)?
    } else {
        BTreeMap::new()
    };

    let mut items = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let raw = read_gray(path)?;
        let mask = match masks.get(id) {
            Some(mpath) => {
                let labels = read_mask(mpath)?;
                if labels.dim() != raw.dim() {
                    return Err(Error::Data(format!(
                        "slice '{id}': mask {:?} and image {:?} shapes differ",
                        labels.dim(),
                        raw.dim()
                    )));
                }
                let fitted = center_fit(labels.mapv(f64::from).view(), IMAGE_SIZE, IMAGE_SIZE);
                let mask = SegMask::new(fitted.mapv(|v| v as u8))
                    .map_err(|e| ingestion(mpath, e.to_string()))?;
                Some(mask)
            }
            None if role == SplitRole::Train => {
                return Err(Error::Data(format!(
                    "training slice '{id}' has no segmentation mask"
                )))
            }
            None => None,
        };
        let image = prepare_slice(id.clone(), raw.view()).map_err(|e| ingestion(path, e.to_string()))?;
        let roi = match (rois.get(id), &mask) {
            (Some(roi), _) => Some(*roi),
            (None, Some(m)) => roi_from_seg(m).ok(),
            (None, None) => None,
        };
        items.push(DatasetItem { image, mask, roi });
    }
    Ok(DatasetSplit { role, items })
}

/// Writes a split in the layout read by [`load_dataset`].
pub fn write_dataset(root: &Path, split: &DatasetSplit) -> Result<()> {
    let dir = root.join(split.role.dir_name());
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut rois = csv::Writer::from_path(dir.join("rois.csv"))?;
    for item in &split.items {
        let id = &item.image.slice_id;
        write_gray16(&dir.join("images").join(format!("{id}.pgm")), item.image.pixels())?;
        if let Some(mask) = &item.mask {
            write_mask(&dir.join("masks").join(format!("{id}.pgm")), mask.labels())?;
        }
        if let Some(roi) = item.roi {
            rois.serialize(RoiRow {
                slice_id: id.clone(),
                center_row: roi.center_row,
                center_col: roi.center_col,
            })?;
        }
    }
    rois.flush()?;
    Ok(())
}
