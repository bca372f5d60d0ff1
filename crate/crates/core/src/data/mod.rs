//! Slices, segmentation masks, ROI windows and dataset splits.

mod io;
mod phantom;

pub use io::{load_dataset, read_gray, read_mask, read_rois_csv, write_dataset, write_gray16, write_mask};
pub use phantom::{make_phantom_dataset, make_phantom_splits, Phantom, PhantomParams};

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 160;
pub const ROI_SIZE: usize = 60;

/// A magnitude image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    pub slice_id: String,
    pixels: Array2<f64>,
}

impl ImageSlice {
    pub fn new(slice_id: impl Into<String>, pixels: Array2<f64>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            slice_id: slice_id.into(),
            pixels,
        })
    }

    /// Builds a slice from arbitrary finite values by clamping into `[0, 1]`.
    pub fn clamped(slice_id: impl Into<String>, pixels: Array2<f64>) -> Result<Self> {
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite pixel".into()));
        }
        Ok(Self {
            slice_id: slice_id.into(),
            pixels: pixels.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn pixels(&self) -> ArrayView2<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_RV: u8 = 1;
pub const LABEL_MC: u8 = 2;
pub const LABEL_LV: u8 = 3;
pub const NUM_CLASSES: usize = 4;

pub fn label_name(label: u8) -> &'static str {
    match label {
        LABEL_RV => "RV",
        LABEL_MC => "MC",
        LABEL_LV => "LV",
        _ => "BG",
    }
}

/// Per-pixel cardiac labels: 0 background, 1 RV, 2 MC, 3 LV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    labels: Array2<u8>,
}

impl SegMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(v) = labels.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("segmentation label {v} not in {{0,1,2,3}}")));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> ArrayView2<'_, u8> {
        self.labels.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&v| v == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != 0).count()
    }
}

/// A fixed 60×60 window, addressed by its centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub center_row: usize,
    pub center_col: usize,
    pub height: usize,
    pub width: usize,
}

impl RoiSpec {
    /// Centre clamped so the window lies inside an `IMAGE_SIZE`² image.
    pub fn centered(row: usize, col: usize) -> Self {
        Self::within(row, col, IMAGE_SIZE, IMAGE_SIZE)
    }

    /// Centre clamped so the window lies inside an `img_h`×`img_w` image.
    pub fn within(row: usize, col: usize, img_h: usize, img_w: usize) -> Self {
        let half = ROI_SIZE / 2;
        let clamp = |v: usize, n: usize| v.clamp(half, n.saturating_sub(ROI_SIZE - half).max(half));
        Self {
            center_row: clamp(row, img_h),
            center_col: clamp(col, img_w),
            height: ROI_SIZE,
            width: ROI_SIZE,
        }
    }

    pub fn image_center() -> Self {
        Self::centered(IMAGE_SIZE / 2, IMAGE_SIZE / 2)
    }

    pub fn top(&self) -> usize {
        self.center_row - self.height / 2
    }

    pub fn left(&self) -> usize {
        self.center_col - self.width / 2
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.top()..self.top() + self.height
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        self.left()..self.left() + self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows().contains(&row) && self.cols().contains(&col)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.center_row >= self.height / 2
            && self.center_col >= self.width / 2
            && self.top() + self.height <= h
            && self.left() + self.width <= w
    }
}

/// Centre-crops or zero-pads to 160×160, then min-max normalises into `[0, 1]`.
/// Constant inputs map to all zeros.
pub fn prepare_slice(slice_id: impl Into<String>, raw: ArrayView2<f64>) -> Result<ImageSlice> {
    let (h, w) = raw.dim();
    if h == 0 || w == 0 {
        return Err(Error::Data("empty raw image".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("raw image contains non-finite values".into()));
    }
    let fitted = center_fit(raw, IMAGE_SIZE, IMAGE_SIZE);
    let lo = fitted.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fitted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        fitted.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    } else {
        Array2::zeros(fitted.dim())
    };
    ImageSlice::new(slice_id, pixels)
}

/// Centre crop (offset `(h − H)/2`) or symmetric zero pad (margin `(H − h)/2`) per axis.
pub fn center_fit(raw: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = raw.dim();
    let mut out = Array2::zeros((out_h, out_w));
    let (src_r, dst_r, n_r) = axis_fit(h, out_h);
    let (src_c, dst_c, n_c) = axis_fit(w, out_w);
    out.slice_mut(s![dst_r..dst_r + n_r, dst_c..dst_c + n_c])
        .assign(&raw.slice(s![src_r..src_r + n_r, src_c..src_c + n_c]));
    out
}

fn axis_fit(n: usize, target: usize) -> (usize, usize, usize) {
    if n >= target {
        ((n - target) / 2, 0, target)
    } else {
        (0, (target - n) / 2, n)
    }
}

/// ROI centred on the floor midpoint of the tight bounding box of all labelled pixels.
pub fn roi_from_seg(mask: &SegMask) -> Result<RoiSpec> {
    let (h, w) = mask.dim();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &v) in mask.labels.indexed_iter() {
        if v != 0 {
            bounds = Some(match bounds {
                None => (r, r, c, c),
                Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
            });
        }
    }
    let (r0, r1, c0, c1) = bounds.ok_or(Error::EmptyMask)?;
    Ok(RoiSpec::within((r0 + r1) / 2, (c0 + c1) / 2, h, w))
}

pub fn crop_roi(image: ArrayView2<f64>, roi: &RoiSpec) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if !roi.fits(h, w) {
        return Err(Error::param(format!("ROI {roi:?} does not fit a {h}x{w} image")));
    }
    Ok(image.slice(s![roi.rows(), roi.cols()]).to_owned())
}

/// Writes `patch` back into `image` at the ROI window.
pub fn embed_roi(image: &mut Array2<f64>, patch: ArrayView2<f64>, roi: &RoiSpec) -> Result<()> {
    let (h, w) = image.dim();
    if !roi.fits(h, w) || patch.dim() != (roi.height, roi.width) {
        return Err(Error::param("patch does not match ROI window"));
    }
    image.slice_mut(s![roi.rows(), roi.cols()]).assign(&patch);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    #[serde(alias = "validation")]
    Val,
    Test,
}

impl SplitRole {
    pub const ALL: [SplitRole; 3] = [SplitRole::Train, SplitRole::Val, SplitRole::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Val => "val",
            SplitRole::Test => "test",
        }
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub image: ImageSlice,
    pub mask: Option<SegMask>,
    pub roi: Option<RoiSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub items: Vec<DatasetItem>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.items.is_empty() {
            Err(Error::EmptySplit(self.role.to_string()))
        } else {
            Ok(())
        }
    }
}

/// How evaluation-time ROIs are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiMode {
    /// Use the stored ROI, else derive it from the mask.
    #[default]
    Oracle,
    /// Always the image centre.
    Center,
}

impl FromStr for RoiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(RoiMode::Oracle),
            "center" => Ok(RoiMode::Center),
            other => Err(Error::config(format!("unknown ROI mode '{other}' (oracle, center)"))),
        }
    }
}

pub trait RoiProvider {
    /// `Ok(None)` when the item has no ROI under this provider.
    fn roi_for(&self, item: &DatasetItem) -> Result<Option<RoiSpec>>;
}

impl RoiProvider for RoiMode {
    fn roi_for(&self, item: &DatasetItem) -> Result<Option<RoiSpec>> {
        match self {
            RoiMode::Center => {
                let (h, w) = item.image.dim();
                Ok(Some(RoiSpec::within(h / 2, w / 2, h, w)))
            }
            RoiMode::Oracle => match (item.roi, &item.mask) {
                (Some(roi), _) => Ok(Some(roi)),
                (None, Some(mask)) => match roi_from_seg(mask) {
                    Ok(roi) => Ok(Some(roi)),
                    Err(Error::EmptyMask) => Ok(None),
                    Err(e) => Err(e),
                },
                (None, None) => Ok(None),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crop_offsets() {
        let raw = Array2::from_shape_fn((200, 220), |(r, c)| (r * 1000 + c) as f64);
        let fitted = center_fit(raw.view(), 160, 160);
        assert_eq!(fitted[[0, 0]], (20 * 1000 + 30) as f64);
        assert_eq!(fitted[[159, 159]], (179 * 1000 + 189) as f64);
    }

    #[test]
    fn pad_margins() {
        let raw = Array2::from_elem((100, 100), 2.0);
        let fitted = center_fit(raw.view(), 160, 160);
        assert_eq!(fitted[[29, 80]], 0.0);
        assert_eq!(fitted[[30, 30]], 2.0);
        assert_eq!(fitted[[129, 129]], 2.0);
        assert_eq!(fitted[[130, 80]], 0.0);
        let prepared = prepare_slice("p", raw.view()).unwrap();
        assert_eq!(prepared.pixels()[[30, 30]], 1.0);
        assert_eq!(prepared.pixels()[[0, 0]], 0.0);
    }

    #[test]
    fn min_max_normalisation() {
        let raw = Array2::from_shape_fn((160, 160), |(r, c)| 3.0 + 4.0 * ((r * 160 + c) as f64) / (160.0 * 160.0 - 1.0));
        let s = prepare_slice("x", raw.view()).unwrap();
        let px = s.pixels();
        assert_eq!(px[[0, 0]], 0.0);
        assert_eq!(px[[159, 159]], 1.0);
        let mid = (raw[[80, 3]] - 3.0) / 4.0;
        assert!((px[[80, 3]] - mid).abs() < 1e-12);
        let constant = prepare_slice("c", Array2::from_elem((160, 160), 5.0).view()).unwrap();
        assert!(constant.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_raw_is_rejected() {
        let mut raw = Array2::zeros((10, 10));
        raw[[2, 2]] = f64::INFINITY;
        assert!(matches!(prepare_slice("x", raw.view()), Err(Error::Data(_))));
    }

    fn mask_with(pixels: &[(usize, usize)]) -> SegMask {
        let mut labels = Array2::zeros((160, 160));
        for &(r, c) in pixels {
            labels[[r, c]] = 3;
        }
        SegMask::new(labels).unwrap()
    }

    #[test]
    fn roi_examples() {
        let roi = roi_from_seg(&mask_with(&[(80, 80)])).unwrap();
        assert_eq!((roi.center_row, roi.center_col), (80, 80));
        assert_eq!((roi.rows(), roi.cols()), (50..110, 50..110));

        let roi = roi_from_seg(&mask_with(&[(40, 100), (60, 140), (50, 120)])).unwrap();
        assert_eq!((roi.center_row, roi.center_col), (50, 120));
        assert_eq!((roi.rows(), roi.cols()), (20..80, 90..150));

        let roi = roi_from_seg(&mask_with(&[(5, 5)])).unwrap();
        assert_eq!((roi.center_row, roi.center_col), (30, 30));

        let roi = roi_from_seg(&mask_with(&[(159, 158)])).unwrap();
        assert_eq!((roi.center_row, roi.center_col), (130, 130));
        assert!(roi.fits(160, 160));

        assert!(matches!(roi_from_seg(&mask_with(&[])), Err(Error::EmptyMask)));
    }

    #[test]
    fn crop_examples() {
        let ramp = Array2::from_shape_fn((160, 160), |(r, _)| r as f64 / 159.0);
        let roi = RoiSpec::centered(80, 80);
        let patch = crop_roi(ramp.view(), &roi).unwrap();
        assert_eq!(patch.dim(), (60, 60));
        assert_eq!(patch[[0, 0]], ramp[[50, 50]]);
        let ones = crop_roi(Array2::ones((160, 160)).view(), &RoiSpec::centered(33, 120)).unwrap();
        assert!(ones.iter().all(|&v| v == 1.0));
        let bad = RoiSpec { center_row: 10, center_col: 80, height: 60, width: 60 };
        assert!(crop_roi(ramp.view(), &bad).is_err());
    }

    #[test]
    fn roi_modes() {
        let item = DatasetItem {
            image: ImageSlice::new("a", Array2::zeros((160, 160))).unwrap(),
            mask: Some(mask_with(&[(40, 40)])),
            roi: None,
        };
        assert_eq!(RoiMode::Oracle.roi_for(&item).unwrap(), Some(RoiSpec::centered(40, 40)));
        assert_eq!(RoiMode::Center.roi_for(&item).unwrap(), Some(RoiSpec::centered(80, 80)));
        let bare = DatasetItem { mask: None, ..item };
        assert_eq!(RoiMode::Oracle.roi_for(&bare).unwrap(), None);
    }

    #[test]
    fn label_validation() {
        assert!(SegMask::new(Array2::from_elem((2, 2), 4u8)).is_err());
        assert!(ImageSlice::new("x", Array2::from_elem((2, 2), 1.5)).is_err());
    }

    proptest! {
        #[test]
        fn prepare_slice_is_idempotent(h in 1usize..200, w in 1usize..200, seed in 0u64..1000) {
            let raw = Array2::from_shape_fn((h, w), |(r, c)| ((r * 31 + c * 17 + seed as usize) % 97) as f64 * 0.37 - 5.0);
            let once = prepare_slice("x", raw.view()).unwrap();
            let twice = prepare_slice("x", once.pixels()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn roi_center_is_clamped_bbox_midpoint(points in proptest::collection::vec((0usize..160, 0usize..160), 1..30)) {
            let mask = mask_with(&points);
            let roi = roi_from_seg(&mask).unwrap();
            // brute-force scan over every pixel
            let mut rmin = usize::MAX; let mut rmax = 0; let mut cmin = usize::MAX; let mut cmax = 0;
            for r in 0..160 { for c in 0..160 { if mask.labels()[[r, c]] != 0 {
                rmin = rmin.min(r); rmax = rmax.max(r); cmin = cmin.min(c); cmax = cmax.max(c);
            }}}
            let expect = |lo: usize, hi: usize| ((lo + hi) / 2).clamp(30, 130);
            prop_assert_eq!(roi.center_row, expect(rmin, rmax));
            prop_assert_eq!(roi.center_col, expect(cmin, cmax));
            prop_assert!(roi.fits(160, 160));
        }

        #[test]
        fn crop_then_embed_restores_window(r in 0usize..160, c in 0usize..160, seed in 0u64..500) {
            let roi = RoiSpec::centered(r, c);
            let img = Array2::from_shape_fn((160, 160), |(i, j)| ((i * 7 + j * 13 + seed as usize) % 101) as f64 / 100.0);
            let patch = crop_roi(img.view(), &roi).unwrap();
            let mut canvas = Array2::zeros((160, 160));
            embed_roi(&mut canvas, patch.view(), &roi).unwrap();
            for i in roi.rows() { for j in roi.cols() {
                prop_assert_eq!(canvas[[i, j]], img[[i, j]]);
            }}
            prop_assert_eq!(crop_roi(canvas.view(), &roi).unwrap(), patch);
        }
    }
}
