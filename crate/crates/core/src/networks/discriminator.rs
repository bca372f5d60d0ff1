//! Context discriminator `D(x) = Ψ_C(Ψ_G(x) ‖ Ψ_L(Φ(x)))` and the basic
//! (global path only) discriminator.

use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RoiSpec, ROI_SIZE, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, flatten, join, leaky_relu, leaky_relu_backward, sigmoid,
    unflatten, Conv2d, Init, Linear, Module, Param, Scalar,
};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const FEATURE_DIM: usize = 64;
pub const GLOBAL_HIDDEN: usize = 1024;
pub const LOCAL_HIDDEN: usize = 256;
pub const DISCRIMINATOR_INIT_STD: f64 = 0.02;

/// `(out, in, kh, kw, stride, padding)` of the three feature-extractor convolutions.
pub const CONV_SPECS: [(usize, usize, usize, usize, usize, usize); 3] =
    [(32, 1, 9, 9, 1, 0), (64, 32, 5, 5, 1, 0), (64, 64, 5, 5, 1, 0)];

/// Side lengths after each conv and each 2×2/2 average pool, starting from `input`.
pub fn feature_map_chain(input: usize) -> Option<Vec<usize>> {
    let mut chain = Vec::with_capacity(6);
    let mut n = input;
    for &(_, _, k, _, stride, pad) in &CONV_SPECS {
        let padded = n + 2 * pad;
        if padded < k {
            return None;
        }
        n = (padded - k) / stride + 1;
        chain.push(n);
        n /= 2;
        if n == 0 {
            return None;
        }
        chain.push(n);
    }
    Some(chain)
}

/// Three conv + leaky-ReLU + average-pool stages, then two affine layers to a
/// 64-dim feature vector. Leaky ReLU follows every layer.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    pub input_size: usize,
    pub chain: Vec<usize>,
    pub convs: [Conv2d<T>; 3],
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct FeatureCache<T> {
    inputs: [Array4<T>; 3],
    pre: [Array4<T>; 3],
    flat: Array2<T>,
    z1: Array2<T>,
    h1: Array2<T>,
    z2: Array2<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new<R: Rng>(input_size: usize, hidden: usize, init: Init, rng: &mut R) -> Result<Self> {
        let chain = feature_map_chain(input_size)
            .ok_or_else(|| Error::param(format!("{input_size}px input too small for the feature extractor")))?;
        let mk = |i: usize, rng: &mut R| {
            let (o, c, k, _, _, p) = CONV_SPECS[i];
            Conv2d::new(c, o, k, p, init, rng)
        };
        let convs = [mk(0, rng), mk(1, rng), mk(2, rng)];
        let last = chain[5];
        let flat = CONV_SPECS[2].0 * last * last;
        Ok(Self {
            input_size,
            fc1: Linear::new(flat, hidden, init, rng),
            fc2: Linear::new(hidden, FEATURE_DIM, init, rng),
            chain,
            convs,
        })
    }

    pub fn flat_features(&self) -> usize {
        self.fc1.in_features
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features
    }

    fn check(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 1 || h != self.input_size || w != self.input_size {
            return Err(Error::param(format!(
                "feature extractor expects 1x{0}x{0}, got {c}x{h}x{w}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Pre-activation of every layer, for inspection: three conv outputs and the two affine outputs.
    pub fn pre_activations(&self, x: &Array4<T>) -> Result<(Vec<Array4<T>>, Vec<Array2<T>>)> {
        let (_, cache) = self.forward_cached(x)?;
        Ok((cache.pre.to_vec(), vec![cache.z1, cache.z2]))
    }

    pub fn forward_cached(&self, x: &Array4<T>) -> Result<(Array2<T>, FeatureCache<T>)> {
        self.check(x)?;
        let mut inputs: Vec<Array4<T>> = Vec::with_capacity(3);
        let mut pre: Vec<Array4<T>> = Vec::with_capacity(3);
        let mut y = x.clone();
        for conv in &self.convs {
            let z = conv.forward(&y)?;
            let pooled = avg_pool2(&leaky_relu(&z, LEAKY_SLOPE));
            inputs.push(y);
            pre.push(z);
            y = pooled;
        }
        let flat = flatten(&y);
        let z1 = self.fc1.forward(&flat)?;
        let h1 = leaky_relu(&z1, LEAKY_SLOPE);
        let z2 = self.fc2.forward(&h1)?;
        let out = leaky_relu(&z2, LEAKY_SLOPE);
        let to3 = |v: Vec<Array4<T>>| -> [Array4<T>; 3] { v.try_into().ok().expect("three stages") };
        Ok((
            out,
            FeatureCache {
                inputs: to3(inputs),
                pre: to3(pre),
                flat,
                z1,
                h1,
                z2,
            },
        ))
    }

    pub fn backward(&mut self, cache: &FeatureCache<T>, grad: &Array2<T>) -> Array4<T> {
        let g = leaky_relu_backward(&cache.z2, grad, LEAKY_SLOPE);
        let g = self.fc2.backward(&cache.h1, &g);
        let g = leaky_relu_backward(&cache.z1, &g, LEAKY_SLOPE);
        let g = self.fc1.backward(&cache.flat, &g);
        let (n, _, _, _) = cache.inputs[0].dim();
        let side = self.chain[5];
        let mut g4 = unflatten(g, (n, CONV_SPECS[2].0, side, side));
        for i in (0..3).rev() {
            let gp = avg_pool2_backward(cache.pre[i].dim(), &g4);
            let gz = leaky_relu_backward(&cache.pre[i], &gp, LEAKY_SLOPE);
            g4 = self.convs[i].backward(&cache.inputs[i], &gz);
        }
        g4
    }
}

impl<T: Scalar> Module<T> for FeatureExtractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Crops each image's ROI window into a (N, 1, 60, 60) batch.
pub fn crop_batch<T: Scalar>(images: &Array4<T>, rois: &[RoiSpec]) -> Result<Array4<T>> {
    let (n, _, h, w) = images.dim();
    if rois.len() != n {
        return Err(Error::param(format!("{} ROIs for a batch of {n}", rois.len())));
    }
    let mut out = Array4::zeros((n, 1, ROI_SIZE, ROI_SIZE));
    for (i, roi) in rois.iter().enumerate() {
        if !roi.fits(h, w) || roi.height != ROI_SIZE || roi.width != ROI_SIZE {
            return Err(Error::param(format!("invalid ROI {roi:?} for a {h}x{w} image")));
        }
        out.slice_mut(s![i, 0, .., ..])
            .assign(&images.slice(s![i, 0, roi.rows(), roi.cols()]));
    }
    Ok(out)
}

fn embed_batch_grad<T: Scalar>(grad: &mut Array4<T>, patch_grad: &Array4<T>, rois: &[RoiSpec]) {
    for (i, roi) in rois.iter().enumerate() {
        let mut dst = grad.slice_mut(s![i, 0, roi.rows(), roi.cols()]);
        dst += &patch_grad.slice(s![i, 0, .., ..]);
    }
}

fn image_batch<T: Scalar>(image: ArrayView2<T>) -> Array4<T> {
    let (h, w) = image.dim();
    image.to_owned().into_shape_with_order((1, 1, h, w)).expect("contiguous")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorKind {
    Context,
    Basic,
}

#[derive(Clone, Debug)]
pub struct ContextDiscriminatorNet<T> {
    pub global: FeatureExtractor<T>,
    pub local: FeatureExtractor<T>,
    /// 128 → 1, followed by a sigmoid.
    pub classifier: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BasicDiscriminatorNet<T> {
    pub global: FeatureExtractor<T>,
    /// 64 → 1, followed by a sigmoid.
    pub classifier: Linear<T>,
}

impl<T: Scalar> ContextDiscriminatorNet<T> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let init = Init::Normal(DISCRIMINATOR_INIT_STD);
        let global = FeatureExtractor::new(IMAGE_SIZE, GLOBAL_HIDDEN, init, rng).expect("160px chain");
        let local = FeatureExtractor::new(ROI_SIZE, LOCAL_HIDDEN, init, rng).expect("60px chain");
        let classifier = Linear::new(2 * FEATURE_DIM, 1, init, rng);
        Self {
            global,
            local,
            classifier,
        }
    }

    pub fn global_features(&self, image: ArrayView2<T>) -> Result<Array1<T>> {
        Ok(self.global.forward(&image_batch(image))?.row(0).to_owned())
    }

    pub fn local_features(&self, patch: ArrayView2<T>) -> Result<Array1<T>> {
        Ok(self.local.forward(&image_batch(patch))?.row(0).to_owned())
    }

    /// `σ(Ψ_C(features))` for a 128-dim concatenated feature vector.
    pub fn classify(&self, features: &Array1<T>) -> Result<T> {
        let x = features.clone().insert_axis(Axis(0));
        Ok(sigmoid(self.classifier.forward(&x)?[[0, 0]]))
    }

    pub fn discriminate(&self, image: ArrayView2<T>, roi: &RoiSpec) -> Result<T> {
        let (h, w) = image.dim();
        if !roi.fits(h, w) {
            return Err(Error::param(format!("ROI {roi:?} does not fit a {h}x{w} image")));
        }
        let patch = image.slice(s![roi.rows(), roi.cols()]);
        let g = self.global_features(image)?;
        let l = self.local_features(patch)?;
        self.classify(&concatenate(Axis(0), &[g.view(), l.view()]).expect("1-d"))
    }
}

impl<T: Scalar> BasicDiscriminatorNet<T> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let init = Init::Normal(DISCRIMINATOR_INIT_STD);
        Self {
            global: FeatureExtractor::new(IMAGE_SIZE, GLOBAL_HIDDEN, init, rng).expect("160px chain"),
            classifier: Linear::new(FEATURE_DIM, 1, init, rng),
        }
    }

    pub fn discriminate(&self, image: ArrayView2<T>) -> Result<T> {
        let g = self.global.forward(&image_batch(image))?;
        Ok(sigmoid(self.classifier.forward(&g)?[[0, 0]]))
    }
}

/// Either discriminator, with a batched logit interface for training.
#[derive(Clone, Debug)]
pub enum DiscriminatorNet<T> {
    Context(ContextDiscriminatorNet<T>),
    Basic(BasicDiscriminatorNet<T>),
}

pub struct DiscriminatorCache<T> {
    global: FeatureCache<T>,
    local: Option<(FeatureCache<T>, Vec<RoiSpec>)>,
    features: Array2<T>,
    batch_dim: (usize, usize, usize, usize),
}

impl<T: Scalar> DiscriminatorNet<T> {
    pub fn new<R: Rng>(kind: DiscriminatorKind, rng: &mut R) -> Self {
        match kind {
            DiscriminatorKind::Context => Self::Context(ContextDiscriminatorNet::new(rng)),
            DiscriminatorKind::Basic => Self::Basic(BasicDiscriminatorNet::new(rng)),
        }
    }

    pub fn kind(&self) -> DiscriminatorKind {
        match self {
            Self::Context(_) => DiscriminatorKind::Context,
            Self::Basic(_) => DiscriminatorKind::Basic,
        }
    }

    /// Classifier logits for a (N, 1, 160, 160) batch; `rois` is ignored by the basic variant.
    pub fn logits_cached(&self, images: &Array4<T>, rois: &[RoiSpec]) -> Result<(Array1<T>, DiscriminatorCache<T>)> {
        let (global, classifier) = match self {
            Self::Context(d) => (&d.global, &d.classifier),
            Self::Basic(d) => (&d.global, &d.classifier),
        };
        let (g, gcache) = global.forward_cached(images)?;
        let (features, local) = match self {
            Self::Context(d) => {
                let patches = crop_batch(images, rois)?;
                let (l, lcache) = d.local.forward_cached(&patches)?;
                let f = concatenate(Axis(1), &[g.view(), l.view()])
                    .expect("same batch")
                    .as_standard_layout()
                    .into_owned();
                (f, Some((lcache, rois.to_vec())))
            }
            Self::Basic(_) => (g, None),
        };
        let logits = classifier.forward(&features)?.column(0).to_owned();
        Ok((
            logits,
            DiscriminatorCache {
                global: gcache,
                local,
                features,
                batch_dim: images.dim(),
            },
        ))
    }

    pub fn logits(&self, images: &Array4<T>, rois: &[RoiSpec]) -> Result<Array1<T>> {
        Ok(self.logits_cached(images, rois)?.0)
    }

    pub fn probabilities(&self, images: &Array4<T>, rois: &[RoiSpec]) -> Result<Array1<T>> {
        Ok(self.logits(images, rois)?.mapv(sigmoid))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the images.
    pub fn backward(&mut self, cache: &DiscriminatorCache<T>, grad_logits: &Array1<T>) -> Array4<T> {
        let g = grad_logits.clone().insert_axis(Axis(1));
        match self {
            Self::Context(d) => {
                let gf = d.classifier.backward(&cache.features, &g);
                let gg = gf.slice(s![.., ..FEATURE_DIM]).to_owned();
                let gl = gf.slice(s![.., FEATURE_DIM..]).to_owned();
                let mut gimg = d.global.backward(&cache.global, &gg);
                let (lcache, rois) = cache.local.as_ref().expect("context cache has a local path");
                let gpatch = d.local.backward(lcache, &gl);
                embed_batch_grad(&mut gimg, &gpatch, rois);
                gimg
            }
            Self::Basic(d) => {
                let gf = d.classifier.backward(&cache.features, &g);
                let gimg = d.global.backward(&cache.global, &gf);
                debug_assert_eq!(gimg.dim(), cache.batch_dim);
                gimg
            }
        }
    }
}

impl<T: Scalar> Module<T> for DiscriminatorNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Self::Context(d) => {
                d.global.visit(&join(prefix, "global"), f);
                d.local.visit(&join(prefix, "local"), f);
                d.classifier.visit(&join(prefix, "classifier"), f);
            }
            Self::Basic(d) => {
                d.global.visit(&join(prefix, "global"), f);
                d.classifier.visit(&join(prefix, "classifier"), f);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Self::Context(d) => {
                d.global.visit_mut(&join(prefix, "global"), f);
                d.local.visit_mut(&join(prefix, "local"), f);
                d.classifier.visit_mut(&join(prefix, "classifier"), f);
            }
            Self::Basic(d) => {
                d.global.visit_mut(&join(prefix, "global"), f);
                d.classifier.visit_mut(&join(prefix, "classifier"), f);
            }
        }
    }
}
