//! Synthetic short-axis cardiac phantoms.
//!
//! Each phantom is a textured body ellipse with a few distractor organs and a
//! heart made of an LV blood pool disk, a myocardium annulus around it and an
//! RV crescent hugging one side, separated from the myocardium by a one-pixel
//! septum gap. The whole heart spans at most 54 pixels, so the 60×60 ROI
//! derived from its mask always covers it.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    prepare_slice, roi_from_seg, DatasetItem, DatasetSplit, SegMask, SplitRole, IMAGE_SIZE,
    LABEL_LV, LABEL_MC, LABEL_RV,
};
use crate::error::Result;
use crate::seeds;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub heart_center: (f64, f64),
    pub lv_radius: f64,
    pub myo_thickness: f64,
    pub rv_radius: f64,
    pub rv_angle: f64,
    pub lv_intensity: f64,
    pub myo_intensity: f64,
    pub rv_intensity: f64,
    pub body_intensity: f64,
    pub body_axes: (f64, f64),
    pub noise_std: f64,
}

impl PhantomParams {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            heart_center: (rng.gen_range(62.0..98.0), rng.gen_range(62.0..98.0)),
            lv_radius: rng.gen_range(8.0..12.0),
            myo_thickness: rng.gen_range(4.0..6.0),
            rv_radius: rng.gen_range(12.0..16.0),
            rv_angle: PI + rng.gen_range(-0.8..0.8),
            lv_intensity: rng.gen_range(0.75..0.95),
            myo_intensity: rng.gen_range(0.12..0.25),
            rv_intensity: rng.gen_range(0.6..0.85),
            body_intensity: rng.gen_range(0.35..0.5),
            body_axes: (rng.gen_range(62.0..72.0), rng.gen_range(55.0..68.0)),
            noise_std: 0.01,
        }
    }

    pub fn myo_outer_radius(&self) -> f64 {
        self.lv_radius + self.myo_thickness
    }

    pub fn rv_center(&self) -> (f64, f64) {
        let d = self.myo_outer_radius();
        (
            self.heart_center.0 + d * self.rv_angle.sin(),
            self.heart_center.1 + d * self.rv_angle.cos(),
        )
    }

    /// Label of a pixel centre, before any rendering.
    pub fn label_at(&self, r: f64, c: f64) -> u8 {
        let (hr, hc) = self.heart_center;
        let d = ((r - hr).powi(2) + (c - hc).powi(2)).sqrt();
        if d <= self.lv_radius {
            return LABEL_LV;
        }
        if d <= self.myo_outer_radius() {
            return LABEL_MC;
        }
        let (rr, rc) = self.rv_center();
        let d_rv = ((r - rr).powi(2) + (c - rc).powi(2)).sqrt();
        if d_rv <= self.rv_radius && d > self.myo_outer_radius() + 1.0 {
            return LABEL_RV;
        }
        0
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Array2<f64>,
    pub labels: Array2<u8>,
    pub params: PhantomParams,
}

struct Blob {
    center: (f64, f64),
    axes: (f64, f64),
    angle: f64,
    intensity: f64,
}

impl Blob {
    fn inside(&self, r: f64, c: f64) -> bool {
        let (dr, dc) = (r - self.center.0, c - self.center.1);
        let (s, co) = self.angle.sin_cos();
        let u = dr * co + dc * s;
        let v = -dr * s + dc * co;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }
}

impl Phantom {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PhantomParams::sample(&mut rng);
        let n = IMAGE_SIZE;
        let mid = n as f64 / 2.0;
        let body = Blob {
            center: (mid + rng.gen_range(-4.0..4.0), mid + rng.gen_range(-4.0..4.0)),
            axes: params.body_axes,
            angle: rng.gen_range(-0.3..0.3),
            intensity: params.body_intensity,
        };
        // Distractor organs placed away from the heart.
        let mut organs = Vec::new();
        for _ in 0..rng.gen_range(2..4) {
            let angle = params.rv_angle + PI + rng.gen_range(-1.2..1.2);
            let dist = rng.gen_range(42.0..52.0);
            organs.push(Blob {
                center: (
                    params.heart_center.0 + dist * angle.sin(),
                    params.heart_center.1 + dist * angle.cos(),
                ),
                axes: (rng.gen_range(6.0..14.0), rng.gen_range(5.0..10.0)),
                angle: rng.gen_range(0.0..PI),
                intensity: rng.gen_range(0.55..0.8),
            });
        }
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(0.02..0.08),
                    rng.gen_range(0.02..0.08),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.015..0.04),
                )
            })
            .collect();
        let noise = Normal::new(0.0, params.noise_std).expect("finite std");

        let mut image = Array2::zeros((n, n));
        let mut labels = Array2::zeros((n, n));
        for r in 0..n {
            for c in 0..n {
                let (rf, cf) = (r as f64, c as f64);
                let texture: f64 = waves
                    .iter()
                    .map(|&(fr, fc, ph, amp)| amp * (fr * rf + fc * cf + ph).cos())
                    .sum();
                let mut v = 0.03 + 0.5 * texture.abs();
                if body.inside(rf, cf) {
                    v = body.intensity + texture;
                    for o in organs.iter().filter(|o| o.inside(rf, cf)) {
                        v = o.intensity + 0.5 * texture;
                    }
                }
                let label = params.label_at(rf, cf);
                v = match label {
                    LABEL_LV => params.lv_intensity,
                    LABEL_MC => params.myo_intensity,
                    LABEL_RV => params.rv_intensity,
                    _ => v,
                };
                labels[[r, c]] = label;
                image[[r, c]] = (v + noise.sample(&mut rng)).max(0.0);
            }
        }
        Self {
            image,
            labels,
            params,
        }
    }
}

/// `count` phantoms with matching masks and ROIs; phantom `i` depends only on
/// `(seed, i)`, so smaller datasets are prefixes of larger ones.
pub fn make_phantom_dataset(count: usize, seed: u64) -> Result<DatasetSplit> {
    let items = (0..count)
        .map(|i| phantom_item(seed, i, &format!("ph{seed}_{i:05}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        role: SplitRole::Train,
        items,
    })
}

fn phantom_item(seed: u64, index: usize, slice_id: &str) -> Result<DatasetItem> {
    let p = Phantom::generate(seeds::derive(&[seed, index as u64]));
    let image = prepare_slice(slice_id, p.image.view())?;
    let mask = SegMask::new(p.labels)?;
    let roi = roi_from_seg(&mask)?;
    Ok(DatasetItem {
        image,
        mask: Some(mask),
        roi: Some(roi),
    })
}

/// Splits `total` phantoms 75 / 12.5 / 12.5 into train / val / test (val and
/// test get at least one slice each when `total >= 3`).
pub fn make_phantom_splits(total: usize, seed: u64) -> Result<[DatasetSplit; 3]> {
    let held = if total >= 3 { (total / 8).max(1) } else { 0 };
    let n_train = total - 2 * held;
    let all = make_phantom_dataset(total, seed)?;
    let mut items = all.items.into_iter();
    let mut take = |role, n| DatasetSplit {
        role,
        items: items.by_ref().take(n).collect(),
    };
    Ok([
        take(SplitRole::Train, n_train),
        take(SplitRole::Val, held),
        take(SplitRole::Test, held),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = make_phantom_dataset(4, 0).unwrap();
        let b = make_phantom_dataset(4, 0).unwrap();
        assert_eq!(a, b);
        let c = make_phantom_dataset(4, 1).unwrap();
        assert_ne!(a.items[0].image, c.items[0].image);
    }

    #[test]
    fn every_phantom_has_all_structures_and_covering_roi() {
        let split = make_phantom_dataset(100, 11).unwrap();
        for item in &split.items {
            let mask = item.mask.as_ref().unwrap();
            for label in [LABEL_RV, LABEL_MC, LABEL_LV] {
                assert!(mask.count(label) > 0, "{} lacks label {label}", item.image.slice_id);
            }
            let roi = item.roi.unwrap();
            let inside = mask
                .labels()
                .indexed_iter()
                .filter(|(_, &v)| v != 0)
                .filter(|((r, c), _)| roi.contains(*r, *c))
                .count();
            assert!(inside as f64 >= 0.95 * mask.foreground_count() as f64);
            assert_eq!(item.image.dim(), (160, 160));
        }
    }

    #[test]
    fn split_sizes() {
        let [tr, va, te] = make_phantom_splits(32, 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (24, 4, 4));
        assert_eq!(tr.items[0], make_phantom_dataset(1, 0).unwrap().items[0]);
    }
}
