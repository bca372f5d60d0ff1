use ndarray::Array2;

use crate::data::{DatasetSplit, ImageSlice, RoiProvider, RoiSpec, IMAGE_SIZE};
use crate::error::Result;
use crate::kspace::{make_cartesian_mask, undersample};
use crate::metrics::{evaluate_pair, MetricsReport};
use crate::networks::{generator_forward, GeneratorNet};
use crate::nn::Scalar;
use crate::seeds::eval_mask_seed;

/// Anything that maps a zero-filled slice to a reconstruction.
pub trait Reconstructor {
    fn reconstruct(&self, zf: &ImageSlice) -> Result<ImageSlice>;
}

impl<T: Scalar> Reconstructor for GeneratorNet<T> {
    fn reconstruct(&self, zf: &ImageSlice) -> Result<ImageSlice> {
        generator_forward(self, zf)
    }
}

/// Returns the zero-filled input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn reconstruct(&self, zf: &ImageSlice) -> Result<ImageSlice> {
        Ok(zf.clone())
    }
}

#[derive(Clone, Debug)]
pub struct EvalSample {
    pub slice_id: String,
    pub fs: Array2<f64>,
    pub zf: Array2<f64>,
    pub recon: Array2<f64>,
    pub roi: Option<RoiSpec>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub recon: MetricsReport,
    /// The zero-filled input scored against the fully sampled reference.
    pub zero_filled: MetricsReport,
    pub samples: Vec<EvalSample>,
}

/// Zero-filled slice for evaluation; the mask depends only on the slice id and R.
pub fn eval_zero_filled(fs: &ImageSlice, acceleration: usize, center_fraction: f64) -> Result<ImageSlice> {
    let mask = make_cartesian_mask(
        IMAGE_SIZE,
        acceleration,
        center_fraction,
        eval_mask_seed(&fs.slice_id, acceleration),
    )?;
    ImageSlice::clamped(fs.slice_id.clone(), undersample(fs.pixels(), &mask)?)
}

pub fn evaluate(
    recon: &dyn Reconstructor,
    data: &DatasetSplit,
    acceleration: usize,
    center_fraction: f64,
    roi_provider: &dyn RoiProvider,
) -> Result<EvalOutcome> {
    data.ensure_nonempty()?;
    let mut rec_rows = Vec::new();
    let mut zf_rows = Vec::new();
    let mut samples = Vec::with_capacity(data.len());
    for item in &data.items {
        let fs = &item.image;
        let zf = eval_zero_filled(fs, acceleration, center_fraction)?;
        let out = recon.reconstruct(&zf)?;
        let roi = roi_provider.roi_for(item)?;
        let id = &fs.slice_id;
        rec_rows.extend(evaluate_pair(id, out.pixels(), fs.pixels(), roi.as_ref())?);
        zf_rows.extend(evaluate_pair(id, zf.pixels(), fs.pixels(), roi.as_ref())?);
        samples.push(EvalSample {
            slice_id: id.clone(),
            fs: fs.pixels().to_owned(),
            zf: zf.into_pixels(),
            recon: out.into_pixels(),
            roi,
        });
    }
    Ok(EvalOutcome {
        recon: MetricsReport::new(rec_rows),
        zero_filled: MetricsReport::new(zf_rows),
        samples,
    })
}
