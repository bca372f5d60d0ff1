//! Cartesian MRI acquisition model.
//!
//! Images are transformed with a DC-centred, orthonormal 2-D DFT
//! (`fftshift(fft2(ifftshift(x))) / sqrt(H·W)`), so Parseval holds exactly and
//! the adjoint of the transform is its inverse. Undersampling drops whole rows
//! (phase-encode lines) of k-space.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const DEFAULT_CENTER_FRACTION: f64 = 0.08;

/// Complex k-space samples, DC at `(H/2, W/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    pub data: Array2<Complex64>,
}

impl KSpaceData {
    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Binary phase-encode line selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CartesianMask {
    pub lines: Vec<bool>,
    pub acceleration: usize,
    /// Stored as parts-per-million so the mask stays `Eq`; use [`CartesianMask::center_fraction`].
    center_fraction_ppm: u32,
    pub seed: u64,
}

impl CartesianMask {
    /// A mask sampling every line.
    pub fn full(height: usize) -> Self {
        Self {
            lines: vec![true; height],
            acceleration: 1,
            center_fraction_ppm: 0,
            seed: 0,
        }
    }

    pub fn height(&self) -> usize {
        self.lines.len()
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction_ppm as f64 / 1e6
    }

    pub fn sampled_count(&self) -> usize {
        self.lines.iter().filter(|&&l| l).count()
    }

    pub fn sampled_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.lines.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i)
    }

    /// `height R center_fraction seed` followed by the 0/1 line vector.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CartesianMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {} {} {}",
            self.height(),
            self.acceleration,
            self.center_fraction(),
            self.seed
        )?;
        let bits: Vec<&str> = self.lines.iter().map(|&l| if l { "1" } else { "0" }).collect();
        writeln!(f, "{}", bits.join(" "))
    }
}

impl FromStr for CartesianMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::param("mask text is empty"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::param(format!("mask header needs 4 fields, got {}", fields.len())));
        }
        let bad = |what: &str| Error::param(format!("invalid mask {what} in header '{header}'"));
        let height: usize = fields[0].parse().map_err(|_| bad("height"))?;
        let acceleration: usize = fields[1].parse().map_err(|_| bad("acceleration"))?;
        let cf: f64 = fields[2].parse().map_err(|_| bad("center fraction"))?;
        let seed: u64 = fields[3].parse().map_err(|_| bad("seed"))?;
        let body = lines
            .next()
            .ok_or_else(|| Error::param("mask text is missing the line vector"))?;
        let bits = body
            .split_whitespace()
            .map(|b| match b {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::param(format!("mask entry '{other}' is not 0 or 1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if bits.len() != height {
            return Err(Error::param(format!(
                "mask declares height {height} but lists {} lines",
                bits.len()
            )));
        }
        Ok(Self {
            lines: bits,
            acceleration,
            center_fraction_ppm: (cf * 1e6).round() as u32,
            seed,
        })
    }
}

/// Rows of the fully sampled centre block: `round(cf·H)` lines starting at `H/2 − n/2`.
pub fn center_block(height: usize, center_fraction: f64) -> std::ops::Range<usize> {
    let n = (center_fraction * height as f64).round() as usize;
    let start = (height / 2).saturating_sub(n / 2);
    start..(start + n).min(height)
}

/// Samples `round(H/R)` lines: the centre block, plus the remaining budget drawn
/// uniformly without replacement from the other lines.
pub fn make_cartesian_mask(
    height: usize,
    acceleration: usize,
    center_fraction: f64,
    seed: u64,
) -> Result<CartesianMask> {
    if height < 8 {
        return Err(Error::param(format!("mask height {height} < 8")));
    }
    if acceleration < 1 {
        return Err(Error::param("acceleration must be >= 1"));
    }
    if !(0.0..=1.0).contains(&center_fraction) {
        return Err(Error::param(format!("center fraction {center_fraction} outside [0, 1]")));
    }
    let budget = (height as f64 / acceleration as f64).round() as usize;
    let center = center_block(height, center_fraction);
    if center.len() > budget {
        return Err(Error::param(format!(
            "centre block of {} lines exceeds the {budget}-line budget at R={acceleration}",
            center.len()
        )));
    }
    let mut lines = vec![false; height];
    for l in center.clone() {
        lines[l] = true;
    }
    let mut rest: Vec<usize> = (0..height).filter(|l| !center.contains(l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    for &l in rest.iter().take(budget - center.len()) {
        lines[l] = true;
    }
    Ok(CartesianMask {
        lines,
        acceleration,
        center_fraction_ppm: (center_fraction * 1e6).round() as u32,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormConvention {
    #[default]
    Orthonormal,
}

/// `F_u`: orthonormal transform followed by row masking, and its adjoint.
#[derive(Clone, Debug)]
pub struct SamplingOperator {
    pub mask: CartesianMask,
    pub norm: NormConvention,
}

impl SamplingOperator {
    pub fn new(mask: CartesianMask) -> Self {
        Self {
            mask,
            norm: NormConvention::Orthonormal,
        }
    }

    pub fn forward(&self, image: ArrayView2<Complex64>) -> Result<KSpaceData> {
        self.check(image.nrows())?;
        let mut k = fft2c(image, false);
        apply_mask(&mut k, &self.mask);
        Ok(KSpaceData { data: k })
    }

    pub fn adjoint(&self, kspace: &KSpaceData) -> Result<Array2<Complex64>> {
        self.check(kspace.data.nrows())?;
        let mut k = kspace.data.clone();
        apply_mask(&mut k, &self.mask);
        Ok(fft2c(k.view(), true))
    }

    fn check(&self, rows: usize) -> Result<()> {
        if rows != self.mask.height() {
            return Err(Error::param(format!(
                "mask height {} does not match {rows} rows",
                self.mask.height()
            )));
        }
        Ok(())
    }
}

fn apply_mask(k: &mut Array2<Complex64>, mask: &CartesianMask) {
    for (mut row, &keep) in k.axis_iter_mut(Axis(0)).zip(&mask.lines) {
        if !keep {
            row.fill(Complex64::new(0.0, 0.0));
        }
    }
}

fn fft_axis(data: &mut Array2<Complex64>, axis: Axis, inverse: bool, planner: &mut FftPlanner<f64>) {
    let n = data.len_of(axis);
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for mut lane in data.lanes_mut(axis) {
        // ifftshift on the way in, fftshift on the way out.
        for (i, v) in lane.iter().enumerate() {
            buf[(i + n - n / 2) % n] = *v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (i, v) in lane.iter_mut().enumerate() {
            *v = buf[(i + n - n / 2) % n];
        }
    }
}

/// Centred orthonormal 2-D DFT (or its inverse).
pub fn fft2c(x: ArrayView2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let mut data = x.to_owned();
    let (h, w) = data.dim();
    let mut planner = FftPlanner::new();
    fft_axis(&mut data, Axis(1), inverse, &mut planner);
    fft_axis(&mut data, Axis(0), inverse, &mut planner);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    data.mapv_inplace(|v| v * scale);
    data
}

pub fn to_complex(x: ArrayView2<f64>) -> Array2<Complex64> {
    x.mapv(|v| Complex64::new(v, 0.0))
}

/// `y_f = F_f x_f`.
pub fn forward_sample(image: ArrayView2<f64>) -> Result<KSpaceData> {
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("image contains non-finite values".into()));
    }
    Ok(KSpaceData {
        data: fft2c(to_complex(image).view(), false),
    })
}

pub fn inverse_transform(kspace: &KSpaceData) -> Array2<Complex64> {
    fft2c(kspace.data.view(), true)
}

/// Complex zero-filled image `F⁻¹(mask ⊙ y)`, before taking the magnitude.
pub fn zero_fill_complex(kspace: &KSpaceData, mask: &CartesianMask) -> Result<Array2<Complex64>> {
    SamplingOperator::new(mask.clone()).adjoint(kspace)
}

/// `x_u = |F_u⁻¹ y_u|`.
pub fn zero_fill_reconstruct(kspace: &KSpaceData, mask: &CartesianMask) -> Result<Array2<f64>> {
    Ok(zero_fill_complex(kspace, mask)?.mapv(|c| c.norm()))
}

/// Simulates an undersampled acquisition of a real image and returns the
/// zero-filled magnitude image.
pub fn undersample(image: ArrayView2<f64>, mask: &CartesianMask) -> Result<Array2<f64>> {
    let k = forward_sample(image)?;
    zero_fill_reconstruct(&k, mask)
}

/// Largest relative deviation between the k-space of a complex image and the
/// measured k-space, over the sampled lines.
pub fn data_consistency_error(
    image: ArrayView2<Complex64>,
    measured: &KSpaceData,
    mask: &CartesianMask,
) -> f64 {
    let k = fft2c(image, false);
    let mut num = 0.0;
    let mut den = 0.0;
    for r in mask.sampled_rows() {
        for (a, b) in k.row(r).iter().zip(measured.data.row(r).iter()) {
            num += (a - b).norm_sqr();
            den += b.norm_sqr();
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

pub fn mask_as_array(mask: &CartesianMask) -> Array1<f64> {
    mask.lines.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
}
