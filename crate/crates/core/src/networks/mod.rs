//! Generator, discriminators and the segmentation U-Net.

pub mod checkpoint;
mod discriminator;
mod unet;

pub use checkpoint::{
    load_checkpoint, load_generator, load_segnet, read_header, save_checkpoint, save_segnet, CheckpointHeader,
    CHECKPOINT_VERSION,
};
pub use discriminator::*;
pub use unet::{DoubleConv, DoubleConvCache, Norm, UNet, UNetCache};

use ndarray::{s, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSlice, SegMask, IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Module, Param, Scalar};

/// How the U-Net output becomes an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    /// `x + U(x)`, with the 1×1 output conv zero-initialised so an untrained
    /// generator is the identity on the zero-filled input.
    Residual,
    /// `σ(U(x))`.
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub head: OutputHead,
    pub norm: Norm,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 64,
            head: OutputHead::Residual,
            norm: Norm::Instance,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 5 || IMAGE_SIZE % (1 << self.depth) != 0 {
            return Err(Error::config(format!("generator depth {} does not divide 160", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::config("generator base_channels must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorNet<T> {
    pub config: GeneratorConfig,
    pub unet: UNet<T>,
}

pub struct GeneratorCache<T> {
    unet: UNetCache<T>,
    output: Array4<T>,
}

impl<T: Scalar> GeneratorNet<T> {
    pub fn new<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut unet = UNet::new(1, 1, config.depth, config.base_channels, config.norm, rng);
        if config.head == OutputHead::Residual {
            unet.head.weight.value.fill(T::zero());
        }
        Ok(Self { config, unet })
    }

    fn finish(&self, x: &Array4<T>, u: Array4<T>) -> Array4<T> {
        match self.config.head {
            OutputHead::Residual => u + x,
            OutputHead::Sigmoid => u.mapv(sigmoid),
        }
    }

    /// Raw network output for a (N, 1, H, W) batch. Residual outputs are not clamped.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let u = self.unet.forward(x)?;
        Ok(self.finish(x, u))
    }

    pub fn forward_cached(&self, x: &Array4<T>) -> Result<(Array4<T>, GeneratorCache<T>)> {
        let (u, unet) = self.unet.forward_cached(x)?;
        let output = self.finish(x, u);
        Ok((output.clone(), GeneratorCache { unet, output }))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &GeneratorCache<T>, grad: &Array4<T>) -> Array4<T> {
        match self.config.head {
            OutputHead::Residual => {
                let mut gx = self.unet.backward(&cache.unet, grad);
                gx += grad;
                gx
            }
            OutputHead::Sigmoid => {
                let gu = ndarray::Zip::from(grad)
                    .and(&cache.output)
                    .map_collect(|&g, &y| g * y * (T::one() - y));
                self.unet.backward(&cache.unet, &gu)
            }
        }
    }
}

impl<T: Scalar> Module<T> for GeneratorNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.unet.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.unet.visit_mut(prefix, f);
    }
}

pub(crate) fn to_batch<T: Scalar>(images: &[ArrayView2<f64>]) -> Array4<T> {
    let (h, w) = images.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut out = Array4::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, 0, .., ..]).assign(&img.mapv(T::from_f64_lossy));
    }
    out
}

fn check_slice(image: &ImageSlice) -> Result<()> {
    if image.dim() != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(Error::param(format!("expected a 160x160 slice, got {:?}", image.dim())));
    }
    Ok(())
}

/// Reconstructs one zero-filled slice; the output is clamped to `[0, 1]`.
pub fn generator_forward<T: Scalar>(net: &GeneratorNet<T>, zf: &ImageSlice) -> Result<ImageSlice> {
    check_slice(zf)?;
    let out = net.forward(&to_batch(&[zf.pixels()]))?;
    let pixels = out.slice(s![0, 0, .., ..]).mapv(|v| v.as_f64());
    ImageSlice::clamped(zf.slice_id.clone(), pixels)
}

/// U-Net producing per-class scores for background, RV, MC and LV.
#[derive(Clone, Debug)]
pub struct SegNet<T> {
    pub unet: UNet<T>,
}

impl<T: Scalar> SegNet<T> {
    pub fn new<R: Rng>(depth: usize, base_channels: usize, norm: Norm, rng: &mut R) -> Result<Self> {
        GeneratorConfig {
            depth,
            base_channels,
            head: OutputHead::Sigmoid,
            norm,
        }
        .validate()?;
        Ok(Self {
            unet: UNet::new(1, NUM_CLASSES, depth, base_channels, norm, rng),
        })
    }

    pub fn classes(&self) -> usize {
        NUM_CLASSES
    }

    /// Class scores (logits), shape (4, H, W).
    pub fn scores(&self, image: &ImageSlice) -> Result<Array3<T>> {
        check_slice(image)?;
        let out = self.unet.forward(&to_batch(&[image.pixels()]))?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    pub fn probabilities(&self, image: &ImageSlice) -> Result<Array3<T>> {
        Ok(softmax_channels(&self.scores(image)?))
    }
}

impl<T: Scalar> Module<T> for SegNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.unet.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.unet.visit_mut(prefix, f);
    }
}

/// Softmax over the leading (class) axis.
pub fn softmax_channels<T: Scalar>(scores: &Array3<T>) -> Array3<T> {
    let mut out = scores.clone();
    for mut lane in out.lanes_mut(Axis(0)) {
        let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let sum: T = lane.iter().copied().sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

/// Per-pixel argmax; ties resolve to the lower label.
pub fn argmax_labels<T: Scalar>(scores: &Array3<T>) -> SegMask {
    let (_, h, w) = scores.dim();
    let labels = ndarray::Array2::from_shape_fn((h, w), |(r, c)| {
        let lane = scores.slice(s![.., r, c]);
        let mut best = 0;
        for k in 1..lane.len() {
            if lane[k] > lane[best] {
                best = k;
            }
        }
        best as u8
    });
    SegMask::new(labels).expect("argmax over four classes")
}

pub fn seg_forward<T: Scalar>(net: &SegNet<T>, image: &ImageSlice) -> Result<SegMask> {
    Ok(argmax_labels(&net.scores(image)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            depth: 2,
            base_channels: 2,
            head: OutputHead::Sigmoid,
            norm: Norm::None,
        }
    }

    #[test]
    fn residual_generator_starts_as_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GeneratorConfig {
            head: OutputHead::Residual,
            ..small()
        };
        let g = GeneratorNet::<f32>::new(cfg, &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 1, 16, 16), |(_, _, r, c)| (r * 16 + c) as f32 / 256.0);
        assert_eq!(g.forward(&x).unwrap(), x);
    }

    #[test]
    fn generator_rejects_bad_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GeneratorNet::<f32>::new(small(), &mut rng).unwrap();
        assert!(g.forward(&Array4::zeros((1, 1, 18, 16))).is_err());
        let bad = ImageSlice::new("x", ndarray::Array2::zeros((32, 32))).unwrap();
        assert!(matches!(generator_forward(&g, &bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_and_argmax() {
        let scores = Array3::from_shape_fn((4, 3, 3), |(k, r, c)| ((k * 7 + r * 3 + c) % 5) as f64);
        let p = softmax_channels(&scores);
        for lane in p.lanes(Axis(0)) {
            assert!((lane.sum() - 1.0).abs() < 1e-12);
        }
        let m = argmax_labels(&scores);
        assert_eq!(m.labels()[[0, 0]], 2);
    }
}
