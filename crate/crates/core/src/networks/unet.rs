use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, max_pool2, max_pool2_backward, relu, relu_backward, split_channels, join,
    Conv2d, ConvTranspose2x2, Init, InstanceNorm2d, Module, Param, Scalar,
};

/// Normalisation applied after each U-Net convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    None,
    Instance,
}

/// Two 3×3 same-padded convolutions, each followed by optional instance
/// normalisation and ReLU.
#[derive(Clone, Debug)]
pub struct DoubleConv<T> {
    pub first: Conv2d<T>,
    pub second: Conv2d<T>,
    pub norms: Option<[InstanceNorm2d<T>; 2]>,
}

pub struct DoubleConvCache<T> {
    input: Array4<T>,
    pre: [Array4<T>; 2],
    hidden: Array4<T>,
    output: Array4<T>,
}

impl<T: Scalar> DoubleConv<T> {
    pub fn new<R: Rng>(input: usize, output: usize, norm: Norm, rng: &mut R) -> Self {
        Self {
            first: Conv2d::new(input, output, 3, 1, Init::He, rng),
            second: Conv2d::new(output, output, 3, 1, Init::He, rng),
            norms: match norm {
                Norm::None => None,
                Norm::Instance => Some([InstanceNorm2d::new(output), InstanceNorm2d::new(output)]),
            },
        }
    }

    fn normed(&self, i: usize, x: &Array4<T>) -> Result<Array4<T>> {
        match &self.norms {
            Some(n) => n[i].forward(x),
            None => Ok(x.clone()),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let h = relu(&self.normed(0, &self.first.forward(x)?)?);
        Ok(relu(&self.normed(1, &self.second.forward(&h)?)?))
    }

    fn forward_cached(&self, x: Array4<T>) -> Result<(Array4<T>, DoubleConvCache<T>)> {
        let pre0 = self.first.forward(&x)?;
        let hidden = relu(&self.normed(0, &pre0)?);
        let pre1 = self.second.forward(&hidden)?;
        let output = relu(&self.normed(1, &pre1)?);
        Ok((
            output.clone(),
            DoubleConvCache {
                input: x,
                pre: [pre0, pre1],
                hidden,
                output,
            },
        ))
    }

    fn backward(&mut self, cache: &DoubleConvCache<T>, grad: &Array4<T>) -> Array4<T> {
        let mut g = relu_backward(&cache.output, grad);
        if let Some(n) = &mut self.norms {
            g = n[1].backward(&cache.pre[1], &g);
        }
        let g = self.second.backward(&cache.hidden, &g);
        let mut g = relu_backward(&cache.hidden, &g);
        if let Some(n) = &mut self.norms {
            g = n[0].backward(&cache.pre[0], &g);
        }
        self.first.backward(&cache.input, &g)
    }
}

impl<T: Scalar> Module<T> for DoubleConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.first.visit(&join(prefix, "0"), f);
        self.second.visit(&join(prefix, "1"), f);
        if let Some([a, b]) = &self.norms {
            a.visit(&join(prefix, "norm0"), f);
            b.visit(&join(prefix, "norm1"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.first.visit_mut(&join(prefix, "0"), f);
        self.second.visit_mut(&join(prefix, "1"), f);
        if let Some([a, b]) = &mut self.norms {
            a.visit_mut(&join(prefix, "norm0"), f);
            b.visit_mut(&join(prefix, "norm1"), f);
        }
    }
}

/// Encoder/decoder with `depth` max-pool halvings, channel doubling per level,
/// transposed-conv upsampling, skip concatenation and a 1×1 output conv.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: Norm,
    /// `depth + 1` blocks; the last one is the bottleneck.
    pub encoders: Vec<DoubleConv<T>>,
    /// `ups[l]` maps level `l + 1` channels to level `l`.
    pub ups: Vec<ConvTranspose2x2<T>>,
    pub decoders: Vec<DoubleConv<T>>,
    pub head: Conv2d<T>,
}

pub struct UNetCache<T> {
    encoders: Vec<DoubleConvCache<T>>,
    up_inputs: Vec<Array4<T>>,
    decoders: Vec<DoubleConvCache<T>>,
    head_input: Array4<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        depth: usize,
        base_channels: usize,
        norm: Norm,
        rng: &mut R,
    ) -> Self {
        let ch = |l: usize| base_channels << l;
        let mut encoders = Vec::with_capacity(depth + 1);
        let mut prev = in_channels;
        for l in 0..=depth {
            encoders.push(DoubleConv::new(prev, ch(l), norm, rng));
            prev = ch(l);
        }
        let ups = (0..depth)
            .map(|l| ConvTranspose2x2::new(ch(l + 1), ch(l), Init::He, rng))
            .collect();
        let decoders = (0..depth)
            .map(|l| DoubleConv::new(2 * ch(l), ch(l), norm, rng))
            .collect();
        let head = Conv2d::new(ch(0), out_channels, 1, 0, Init::He, rng);
        Self {
            depth,
            base_channels,
            in_channels,
            out_channels,
            norm,
            encoders,
            ups,
            decoders,
            head,
        }
    }

    pub fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let unit = 1 << self.depth;
        if c != self.in_channels || h % unit != 0 || w % unit != 0 || h == 0 || w == 0 {
            return Err(Error::param(format!(
                "U-Net of depth {} expects {} channels and sides divisible by {unit}, got {c}x{h}x{w}",
                self.depth, self.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.depth);
        let mut y = x.clone();
        for enc in &self.encoders[..self.depth] {
            let e = enc.forward(&y)?;
            y = max_pool2(&e);
            skips.push(e);
        }
        y = self.encoders[self.depth].forward(&y)?;
        for l in (0..self.depth).rev() {
            let u = self.ups[l].forward(&y)?;
            y = self.decoders[l].forward(&concat_channels(&skips[l], &u))?;
        }
        self.head.forward(&y)
    }

    pub fn forward_cached(&self, x: &Array4<T>) -> Result<(Array4<T>, UNetCache<T>)> {
        self.check_input(x)?;
        let mut encoders = Vec::with_capacity(self.depth + 1);
        let mut skips = Vec::with_capacity(self.depth);
        let mut y = x.clone();
        for enc in &self.encoders[..self.depth] {
            let (e, c) = enc.forward_cached(y)?;
            y = max_pool2(&e);
            skips.push(e);
            encoders.push(c);
        }
        let (b, c) = self.encoders[self.depth].forward_cached(y)?;
        encoders.push(c);
        y = b;
        let mut up_inputs = vec![Array4::zeros((0, 0, 0, 0)); self.depth];
        let mut decoders: Vec<Option<DoubleConvCache<T>>> = (0..self.depth).map(|_| None).collect();
        for l in (0..self.depth).rev() {
            let u = self.ups[l].forward(&y)?;
            up_inputs[l] = y;
            let (d, c) = self.decoders[l].forward_cached(concat_channels(&skips[l], &u))?;
            decoders[l] = Some(c);
            y = d;
        }
        let out = self.head.forward(&y)?;
        Ok((
            out,
            UNetCache {
                encoders,
                up_inputs,
                decoders: decoders.into_iter().map(|c| c.expect("filled")).collect(),
                head_input: y,
            },
        ))
    }

    pub fn backward(&mut self, cache: &UNetCache<T>, grad_out: &Array4<T>) -> Array4<T> {
        let mut g = self.head.backward(&cache.head_input, grad_out);
        let mut skip_grads = Vec::with_capacity(self.depth);
        for l in 0..self.depth {
            let gcat = self.decoders[l].backward(&cache.decoders[l], &g);
            let (gskip, gup) = split_channels(&gcat, self.base_channels << l);
            skip_grads.push(gskip);
            g = self.ups[l].backward(&cache.up_inputs[l], &gup);
        }
        g = self.encoders[self.depth].backward(&cache.encoders[self.depth], &g);
        for l in (0..self.depth).rev() {
            let skip_out = &cache.encoders[l].output;
            let mut ge = max_pool2_backward(skip_out, &g);
            ge += &skip_grads[l];
            g = self.encoders[l].backward(&cache.encoders[l], &ge);
        }
        g
    }
}

impl<T: Scalar> Module<T> for UNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.visit(&join(prefix, &format!("up{i}")), f);
        }
        for (i, d) in self.decoders.iter().enumerate() {
            d.visit(&join(prefix, &format!("dec{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up{i}")), f);
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("dec{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
