use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::{join, lit, Init, Module, Param, Scalar};
use crate::error::{Error, Result};

fn weight2<T: Scalar>(p: &Param<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    p.value
        .view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous weight")
}

fn grad2<T: Scalar>(p: &mut Param<T>, rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    p.grad
        .view_mut()
        .into_shape_with_order((rows, cols))
        .expect("contiguous gradient")
}

/// 2-D convolution, stride 1, symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::normal(
                &[out_channels, in_channels, kernel, kernel],
                init.std(fan_in),
                rng,
            ),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        (hp >= self.kernel && wp >= self.kernel)
            .then(|| (hp - self.kernel + 1, wp - self.kernel + 1))
    }

    fn check(&self, x: &Array4<T>) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::param(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        self.output_size(h, w)
            .ok_or_else(|| Error::param(format!("{h}x{w} input smaller than {}x{0} kernel", self.kernel)))
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let (ho, wo) = self.check(x)?;
        let n = x.dim().0;
        let k = self.in_channels * self.kernel * self.kernel;
        let w = weight2(&self.weight, self.out_channels, k);
        let mut out = Array4::zeros((n, self.out_channels, ho, wo));
        let mut col = Array2::zeros((k, ho * wo));
        for i in 0..n {
            self.im2col(x, i, &mut col);
            let mut y = out
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.out_channels, ho * wo))
                .expect("contiguous output");
            general_mat_mul(T::one(), &w, &col, T::zero(), &mut y);
            for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.value.iter()) {
                row += b;
            }
        }
        Ok(out)
    }

    /// Accumulates weight and bias gradients; returns the input gradient.
    pub fn backward(&mut self, x: &Array4<T>, grad_out: &Array4<T>) -> Array4<T> {
        let (n, _, h, wd) = x.dim();
        let (_, co, ho, wo) = grad_out.dim();
        let k = self.in_channels * self.kernel * self.kernel;
        let mut dx = Array4::zeros((n, self.in_channels, h, wd));
        let mut col = Array2::zeros((k, ho * wo));
        let mut dcol = Array2::zeros((k, ho * wo));
        for i in 0..n {
            self.im2col(x, i, &mut col);
            let dy = grad_out
                .index_axis(Axis(0), i)
                .into_shape_with_order((co, ho * wo))
                .expect("contiguous gradient");
            {
                let mut dw = grad2(&mut self.weight, co, k);
                general_mat_mul(T::one(), &dy, &col.t(), T::one(), &mut dw);
            }
            for (g, row) in self.bias.grad.iter_mut().zip(dy.rows()) {
                *g += row.sum();
            }
            let w = weight2(&self.weight, co, k);
            general_mat_mul(T::one(), &w.t(), &dy, T::zero(), &mut dcol);
            self.col2im(&dcol, &mut dx, i);
        }
        dx
    }

    fn im2col(&self, x: &Array4<T>, sample: usize, col: &mut Array2<T>) {
        let (_, c, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w).expect("checked");
        let k = self.kernel;
        let p = self.padding as isize;
        let xs = x.index_axis(Axis(0), sample);
        let xs = xs.as_slice().expect("standard layout input");
        let cs = col.as_slice_mut().expect("standard layout col");
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * ho * wo;
                    let ox_lo = (p - kj as isize).clamp(0, wo as isize) as usize;
                    let ox_hi = (w as isize + p - kj as isize).clamp(0, wo as isize) as usize;
                    for oy in 0..ho {
                        let dst = &mut cs[row + oy * wo..row + (oy + 1) * wo];
                        let iy = oy as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        dst[..ox_lo].fill(T::zero());
                        dst[ox_hi..].fill(T::zero());
                        let base = (ci * h + iy as usize) * w;
                        let ix_lo = (ox_lo as isize + kj as isize - p) as usize;
                        dst[ox_lo..ox_hi]
                            .copy_from_slice(&xs[base + ix_lo..base + ix_lo + (ox_hi - ox_lo)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, dcol: &Array2<T>, dx: &mut Array4<T>, sample: usize) {
        let (_, c, h, w) = dx.dim();
        let (ho, wo) = self.output_size(h, w).expect("checked");
        let k = self.kernel;
        let p = self.padding as isize;
        let mut xs = dx.index_axis_mut(Axis(0), sample);
        let xs = xs.as_slice_mut().expect("standard layout");
        let cs = dcol.as_slice().expect("standard layout col");
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * ho * wo;
                    let ox_lo = (p - kj as isize).clamp(0, wo as isize) as usize;
                    let ox_hi = (w as isize + p - kj as isize).clamp(0, wo as isize) as usize;
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = oy as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cs[row + oy * wo + ox_lo..row + oy * wo + ox_hi];
                        let base = (ci * h + iy as usize) * w;
                        let ix_lo = (ox_lo as isize + kj as isize - p) as usize;
                        for (d, &s) in xs[base + ix_lo..base + ix_lo + src.len()].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution with a 2×2 kernel and stride 2 (exact ×2 upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2<T> {
    /// Shape (in, out, 2, 2).
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, init: Init, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(&[in_channels, out_channels, 2, 2], init.std(in_channels), rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::param(format!(
                "transposed conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let co = self.out_channels;
        let wt = weight2(&self.weight, c, co * 4);
        let mut z = Array2::zeros((co * 4, h * w));
        let mut out = Array4::zeros((n, co, 2 * h, 2 * w));
        for i in 0..n {
            let xs = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((c, h * w))
                .expect("contiguous input");
            general_mat_mul(T::one(), &wt.t(), &xs, T::zero(), &mut z);
            let mut o = out.index_axis_mut(Axis(0), i);
            for oc in 0..co {
                let b = self.bias.value[oc];
                for a in 0..2 {
                    for bb in 0..2 {
                        let zr = z.row(oc * 4 + a * 2 + bb);
                        let mut dst = o.slice_mut(s![oc, a..;2, bb..;2]);
                        for (d, &v) in dst.iter_mut().zip(zr.iter()) {
                            *d = v + b;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &Array4<T>, grad_out: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let co = self.out_channels;
        let mut dz = Array2::zeros((co * 4, h * w));
        let mut dx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            let g = grad_out.index_axis(Axis(0), i);
            for oc in 0..co {
                let mut bsum = T::zero();
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = g.slice(s![oc, a..;2, bb..;2]);
                        let mut zr = dz.row_mut(oc * 4 + a * 2 + bb);
                        for (d, &v) in zr.iter_mut().zip(src.iter()) {
                            *d = v;
                            bsum += v;
                        }
                    }
                }
                self.bias.grad[oc] += bsum;
            }
            let xs = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((c, h * w))
                .expect("contiguous input");
            {
                let mut dw = grad2(&mut self.weight, c, co * 4);
                general_mat_mul(T::one(), &xs, &dz.t(), T::one(), &mut dw);
            }
            let wt = weight2(&self.weight, c, co * 4);
            let mut dxs = dx
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            general_mat_mul(T::one(), &wt, &dz, T::zero(), &mut dxs);
        }
        dx
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2x2<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Affine layer `y = x Wᵀ + b` over rows of a (batch, features) matrix.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// Shape (out, in).
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, init: Init, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(&[out_features, in_features], init.std(in_features), rng),
            bias: Param::zeros(&[out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_features {
            return Err(Error::param(format!(
                "linear layer expects {} features, got {}",
                self.in_features,
                x.ncols()
            )));
        }
        let w = weight2(&self.weight, self.out_features, self.in_features);
        let mut y = Array2::zeros((x.nrows(), self.out_features));
        general_mat_mul(T::one(), x, &w.t(), T::zero(), &mut y);
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1-d bias");
        y += &b;
        Ok(y)
    }

    pub fn backward(&mut self, x: &Array2<T>, grad_out: &Array2<T>) -> Array2<T> {
        let (o, i) = (self.out_features, self.in_features);
        {
            let mut dw = grad2(&mut self.weight, o, i);
            general_mat_mul(T::one(), &grad_out.t(), x, T::one(), &mut dw);
        }
        for (g, col) in self.bias.grad.iter_mut().zip(grad_out.columns()) {
            *g += col.sum();
        }
        let w = weight2(&self.weight, o, i);
        grad_out.dot(&w)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-sample, per-channel normalisation over H×W with a learnable affine
/// (`gamma` starts at 1, `beta` at 0). Statistics never mix samples, so a
/// batch gives the same result as its slices one at a time.
#[derive(Clone, Debug)]
pub struct InstanceNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub channels: usize,
    pub eps: f64,
}

impl<T: Scalar> InstanceNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Param::zeros(&[channels]);
        gamma.value.fill(T::one());
        Self {
            gamma,
            beta: Param::zeros(&[channels]),
            channels,
            eps: 1e-5,
        }
    }

    /// Mean and `1 / sqrt(var + eps)` of one (H, W) plane.
    fn stats(&self, plane: ndarray::ArrayView2<T>) -> (T, T) {
        let m = lit::<T>(plane.len() as f64);
        let mean = plane.sum() / m;
        let var = plane.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / m;
        (mean, (var + lit(self.eps)).sqrt().recip())
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let (n, c, _, _) = x.dim();
        if c != self.channels {
            return Err(Error::param(format!(
                "instance norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let mut y = x.clone();
        for i in 0..n {
            for k in 0..c {
                let (mean, inv) = self.stats(x.slice(s![i, k, .., ..]));
                let (g, b) = (self.gamma.value[k], self.beta.value[k]);
                y.slice_mut(s![i, k, .., ..])
                    .mapv_inplace(|v| g * (v - mean) * inv + b);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Array4<T>, grad_out: &Array4<T>) -> Array4<T> {
        let (n, c, _, _) = x.dim();
        let mut gx = Array4::zeros(x.raw_dim());
        for i in 0..n {
            for k in 0..c {
                let plane = x.slice(s![i, k, .., ..]);
                let g = grad_out.slice(s![i, k, .., ..]);
                let (mean, inv) = self.stats(plane);
                let xhat = plane.mapv(|v| (v - mean) * inv);
                let sum_g = g.sum();
                let sum_gx = (&g * &xhat).sum();
                self.gamma.grad[k] += sum_gx;
                self.beta.grad[k] += sum_g;
                let m = lit::<T>(plane.len() as f64);
                let scale = self.gamma.value[k] * inv / m;
                ndarray::Zip::from(gx.slice_mut(s![i, k, .., ..]))
                    .and(&g)
                    .and(&xhat)
                    .for_each(|o, &gv, &xh| *o = scale * (m * gv - sum_g - xh * sum_gx));
            }
        }
        gx
    }
}

impl<T: Scalar> Module<T> for InstanceNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = lit::<T>(0.25);
    Array4::from_shape_fn((n, c, ho, wo), |(i, ch, y, xx)| {
        (x[[i, ch, 2 * y, 2 * xx]]
            + x[[i, ch, 2 * y, 2 * xx + 1]]
            + x[[i, ch, 2 * y + 1, 2 * xx]]
            + x[[i, ch, 2 * y + 1, 2 * xx + 1]])
            * quarter
    })
}

pub fn avg_pool2_backward<T: Scalar>(input_dim: (usize, usize, usize, usize), grad_out: &Array4<T>) -> Array4<T> {
    let mut dx = Array4::zeros(input_dim);
    let quarter = lit::<T>(0.25);
    for ((i, c, y, x), &g) in grad_out.indexed_iter() {
        let v = g * quarter;
        dx[[i, c, 2 * y, 2 * x]] = v;
        dx[[i, c, 2 * y, 2 * x + 1]] = v;
        dx[[i, c, 2 * y + 1, 2 * x]] = v;
        dx[[i, c, 2 * y + 1, 2 * x + 1]] = v;
    }
    dx
}

/// 2×2 max pooling with stride 2.
pub fn max_pool2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h / 2, w / 2), |(i, ch, y, xx)| {
        let mut m = x[[i, ch, 2 * y, 2 * xx]];
        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
            m = m.max(x[[i, ch, 2 * y + dy, 2 * xx + dx]]);
        }
        m
    })
}

/// Routes each output gradient to the first maximal element of its window.
pub fn max_pool2_backward<T: Scalar>(x: &Array4<T>, grad_out: &Array4<T>) -> Array4<T> {
    let mut dx = Array4::zeros(x.raw_dim());
    for ((i, c, y, xx), &g) in grad_out.indexed_iter() {
        let mut best = (2 * y, 2 * xx);
        for (dy, dx_) in [(0, 1), (1, 0), (1, 1)] {
            let cand = (2 * y + dy, 2 * xx + dx_);
            if x[[i, c, cand.0, cand.1]] > x[[i, c, best.0, best.1]] {
                best = cand;
            }
        }
        dx[[i, c, best.0, best.1]] += g;
    }
    dx
}

pub fn relu<T: Scalar, D: ndarray::Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward through ReLU given its output.
pub fn relu_backward<T: Scalar, D: ndarray::Dimension>(
    out: &ndarray::Array<T, D>,
    grad: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut g = grad.clone();
    g.zip_mut_with(out, |g, &o| {
        if o <= T::zero() {
            *g = T::zero()
        }
    });
    g
}

pub fn leaky_relu<T: Scalar, D: ndarray::Dimension>(x: &ndarray::Array<T, D>, slope: f64) -> ndarray::Array<T, D> {
    let a = lit::<T>(slope);
    x.mapv(|v| if v > T::zero() { v } else { v * a })
}

/// Backward through leaky ReLU given its input (pre-activation).
pub fn leaky_relu_backward<T: Scalar, D: ndarray::Dimension>(
    pre: &ndarray::Array<T, D>,
    grad: &ndarray::Array<T, D>,
    slope: f64,
) -> ndarray::Array<T, D> {
    let a = lit::<T>(slope);
    let mut g = grad.clone();
    g.zip_mut_with(pre, |g, &p| {
        if p <= T::zero() {
            *g *= a
        }
    });
    g
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Concatenates two NCHW tensors along channels.
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .expect("matching batch and spatial dims")
        .as_standard_layout()
        .into_owned()
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(g: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        g.slice(s![.., ..first, .., ..]).to_owned(),
        g.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Flattens NCHW to (N, C·H·W).
pub fn flatten<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * h * w))
        .expect("contiguous")
}

pub fn unflatten<T: Scalar>(x: Array2<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order(dim)
        .expect("matching element count")
}
