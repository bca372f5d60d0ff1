//! Loss terms and the named variant registry.
//!
//! Every term works on `f64` images and comes with its gradient with respect
//! to the prediction (or, for the adversarial terms, the discriminator
//! probabilities). Batched terms average over the batch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{fft2c, to_complex};
use crate::metrics::{ssim_with_grad, SsimParams};
use crate::networks::DiscriminatorKind;
use crate::nn::{relu, relu_backward, Conv2d, Init};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

fn same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::param(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_image_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    Ok(l1_image_loss_grad(pred, target)?.0)
}

/// Subgradient `sign(pred − target) / N`, zero at ties.
pub fn l1_image_loss_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(&pred, &target)?;
    let n = pred.len() as f64;
    let diff = &pred - &target;
    let value = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let grad = diff.mapv(|d| if d > 0.0 { 1.0 / n } else if d < 0.0 { -1.0 / n } else { 0.0 });
    Ok((value, grad))
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::param(format!("{name}: empty batch")));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::param(format!("{name}: probabilities must lie in [0, 1]")));
    }
    Ok(())
}

/// `−log p` averaged, gradient w.r.t. each `p` (zero where clamped).
fn neg_log_mean(p: &[f64], complement: bool) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for &raw in p {
        let (q, clamped) = clamp_prob(raw);
        if complement {
            value -= (1.0 - q).ln();
            grad.push(if clamped { 0.0 } else { 1.0 / ((1.0 - q) * n) });
        } else {
            value -= q.ln();
            grad.push(if clamped { 0.0 } else { -1.0 / (q * n) });
        }
    }
    (value / n, grad)
}

/// Discriminator objective `mean(−log D(x_f)) + mean(−log(1 − D(G(x_u))))`.
pub fn context_adversarial_loss_d(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(context_adversarial_loss_d_grad(d_real, d_fake)?.0)
}

/// Value and gradients w.r.t. `d_real` and `d_fake`.
pub fn context_adversarial_loss_d_grad(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_probs("d_real", d_real)?;
    check_probs("d_fake", d_fake)?;
    let (real, gr) = neg_log_mean(d_real, false);
    let (fake, gf) = neg_log_mean(d_fake, true);
    Ok((real + fake, gr, gf))
}

/// Non-saturating generator objective `mean(−log D(G(x_u)))`.
pub fn context_adversarial_loss_g(d_fake: &[f64]) -> Result<f64> {
    Ok(context_adversarial_loss_g_grad(d_fake)?.0)
}

pub fn context_adversarial_loss_g_grad(d_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_probs("d_fake", d_fake)?;
    Ok(neg_log_mean(d_fake, false))
}

/// Mean squared magnitude of the k-space difference.
pub fn frequency_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    Ok(frequency_loss_grad(pred, target)?.0)
}

/// The gradient is `2·Re(Fᴴ(F p − F t)) / N`, obtained with the adjoint transform.
pub fn frequency_loss_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(&pred, &target)?;
    let n = pred.len() as f64;
    let kdiff = fft2c(to_complex(pred).view(), false) - fft2c(to_complex(target).view(), false);
    let value = kdiff.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
    let grad = fft2c(kdiff.view(), true).mapv(|z| 2.0 * z.re / n);
    Ok((value, grad))
}

/// `1 − SSIM(pred, target)`.
pub fn ssim_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    Ok(ssim_loss_grad(pred, target)?.0)
}

pub fn ssim_loss_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let (s, g) = ssim_with_grad(pred, target, &SsimParams::default())?;
    Ok((1.0 - s, -g))
}

/// Fixed (non-trainable) feature network for the perceptual term.
pub trait Featurizer {
    /// Activations for one image, shape (channels, h, w).
    fn features(&self, image: ArrayView2<f64>) -> Result<Array3<f64>>;
    /// Vector-Jacobian product: gradient w.r.t. the image given a gradient on the features.
    fn features_vjp(&self, image: ArrayView2<f64>, grad: &Array3<f64>) -> Result<Array2<f64>>;
}

/// Frozen, seeded stack of three 3×3 same-padded convolutions with ReLU.
#[derive(Clone, Debug)]
pub struct RandomConvFeaturizer {
    convs: Vec<Conv2d<f64>>,
}

pub const DEFAULT_FEATURIZER_SEED: u64 = 0x7667_6730;

impl RandomConvFeaturizer {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = vec![
            Conv2d::new(1, channels, 3, 1, Init::He, &mut rng),
            Conv2d::new(channels, channels, 3, 1, Init::He, &mut rng),
            Conv2d::new(channels, channels, 3, 1, Init::He, &mut rng),
        ];
        Self { convs }
    }

    fn run(&self, image: ArrayView2<f64>) -> Result<(Vec<Array4<f64>>, Vec<Array4<f64>>)> {
        let (h, w) = image.dim();
        let mut x = image.to_owned().into_shape_with_order((1, 1, h, w)).expect("contiguous");
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut outputs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let y = relu(&conv.forward(&x)?);
            inputs.push(x);
            outputs.push(y.clone());
            x = y;
        }
        Ok((inputs, outputs))
    }
}

impl Default for RandomConvFeaturizer {
    fn default() -> Self {
        Self::new(8, DEFAULT_FEATURIZER_SEED)
    }
}

impl Featurizer for RandomConvFeaturizer {
    fn features(&self, image: ArrayView2<f64>) -> Result<Array3<f64>> {
        let (_, mut outputs) = self.run(image)?;
        Ok(outputs.pop().expect("three layers").index_axis_move(Axis(0), 0))
    }

    fn features_vjp(&self, image: ArrayView2<f64>, grad: &Array3<f64>) -> Result<Array2<f64>> {
        let (inputs, outputs) = self.run(image)?;
        // Backward accumulates into scratch copies; the featurizer itself never changes.
        let mut scratch = self.convs.clone();
        let mut g = grad.clone().insert_axis(Axis(0));
        for i in (0..scratch.len()).rev() {
            let gz = relu_backward(&outputs[i], &g);
            g = scratch[i].backward(&inputs[i], &gz);
        }
        Ok(g.index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0))
    }
}

/// Mean squared difference of featurizer activations.
pub fn perceptual_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, featurizer: &dyn Featurizer) -> Result<f64> {
    same_shape(&pred, &target)?;
    let fp = featurizer.features(pred)?;
    let ft = featurizer.features(target)?;
    Ok((&fp - &ft).mapv(|d| d * d).mean().expect("non-empty features"))
}

pub fn perceptual_loss_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    featurizer: &dyn Featurizer,
) -> Result<(f64, Array2<f64>)> {
    same_shape(&pred, &target)?;
    let fp = featurizer.features(pred)?;
    let ft = featurizer.features(target)?;
    let diff = &fp - &ft;
    let n = diff.len() as f64;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = featurizer.features_vjp(pred, &diff.mapv(|d| 2.0 * d / n))?;
    Ok((value, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    #[serde(rename = "L_imag")]
    Imag,
    #[serde(rename = "L_global")]
    Global,
    #[serde(rename = "L_context")]
    Context,
    #[serde(rename = "L_freq")]
    Freq,
    #[serde(rename = "L_ssim")]
    Ssim,
    #[serde(rename = "L_vgg")]
    Vgg,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Imag,
        LossTerm::Global,
        LossTerm::Context,
        LossTerm::Freq,
        LossTerm::Ssim,
        LossTerm::Vgg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Imag => "L_imag",
            LossTerm::Global => "L_global",
            LossTerm::Context => "L_context",
            LossTerm::Freq => "L_freq",
            LossTerm::Ssim => "L_ssim",
            LossTerm::Vgg => "L_vgg",
        }
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, LossTerm::Global | LossTerm::Context)
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// λ₁.
    pub lambda_imag: f64,
    /// λ₂, applied to whichever adversarial term is active.
    pub lambda_context: f64,
    pub lambda_freq: f64,
    pub lambda_ssim: f64,
    pub lambda_vgg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_imag: 1.0,
            lambda_context: 4e-4,
            lambda_freq: 1.0,
            lambda_ssim: 1.0,
            lambda_vgg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Imag => self.lambda_imag,
            LossTerm::Global | LossTerm::Context => self.lambda_context,
            LossTerm::Freq => self.lambda_freq,
            LossTerm::Ssim => self.lambda_ssim,
            LossTerm::Vgg => self.lambda_vgg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_imag", self.lambda_imag),
            ("lambda_context", self.lambda_context),
            ("lambda_freq", self.lambda_freq),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_vgg", self.lambda_vgg),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Gan,
    ReconGlgan,
    ReconGan,
    GlReconGan,
    Dagan,
    GlDagan,
    Segan,
    GlSegan,
    ComGan,
    GlComGan,
}

use LossTerm::{Context, Freq, Global, Imag, Ssim, Vgg};

/// Term sets per variant. The first two rows are the baseline GAN and the
/// proposed model; the rest mirror the comparison table of GAN variants.
pub const VARIANT_TABLE: [(Variant, &str, &[LossTerm]); 10] = [
    (Variant::Gan, "GAN", &[Imag, Global]),
    (Variant::ReconGlgan, "Recon-GLGAN", &[Imag, Context]),
    (Variant::ReconGan, "ReconGAN", &[Imag, Global, Freq]),
    (Variant::GlReconGan, "GL-ReconGAN", &[Imag, Context, Freq]),
    (Variant::Dagan, "DAGAN", &[Imag, Global, Freq, Vgg]),
    (Variant::GlDagan, "GL-DAGAN", &[Imag, Context, Freq, Vgg]),
    (Variant::Segan, "SEGAN", &[Imag, Global, Ssim]),
    (Variant::GlSegan, "GL-SEGAN", &[Imag, Context, Ssim]),
    (Variant::ComGan, "ComGAN", &[Imag, Freq, Global, Ssim]),
    (Variant::GlComGan, "GL-ComGAN", &[Imag, Freq, Context, Ssim]),
];

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Gan,
        Variant::ReconGlgan,
        Variant::ReconGan,
        Variant::GlReconGan,
        Variant::Dagan,
        Variant::GlDagan,
        Variant::Segan,
        Variant::GlSegan,
        Variant::ComGan,
        Variant::GlComGan,
    ];

    fn row(self) -> &'static (Variant, &'static str, &'static [LossTerm]) {
        VARIANT_TABLE.iter().find(|r| r.0 == self).expect("every variant has a row")
    }

    pub fn name(self) -> &'static str {
        self.row().1
    }

    pub fn terms(self) -> &'static [LossTerm] {
        self.row().2
    }

    pub fn uses_context(self) -> bool {
        self.terms().contains(&LossTerm::Context)
    }

    pub fn discriminator(self) -> DiscriminatorKind {
        if self.uses_context() {
            DiscriminatorKind::Context
        } else {
            DiscriminatorKind::Basic
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VARIANT_TABLE
            .iter()
            .find(|r| r.1.eq_ignore_ascii_case(s.trim()))
            .map(|r| r.0)
            .ok_or_else(|| {
                let names: Vec<_> = VARIANT_TABLE.iter().map(|r| r.1).collect();
                Error::config(format!("unknown variant '{s}', expected one of {}", names.join(", ")))
            })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub variant: Variant,
    pub terms: Vec<LossTerm>,
    pub weights: LossWeights,
}

impl LossSpec {
    pub fn new(variant: Variant, weights: LossWeights) -> Self {
        Self {
            variant,
            terms: variant.terms().to_vec(),
            weights,
        }
    }

    pub fn has(&self, term: LossTerm) -> bool {
        self.terms.contains(&term)
    }
}

impl From<Variant> for LossSpec {
    fn from(v: Variant) -> Self {
        Self::new(v, LossWeights::default())
    }
}

/// Discriminator output on the generated batch.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialInput<'a> {
    pub kind: DiscriminatorKind,
    pub d_fake: &'a [f64],
}

/// Everything a term might need; absent fields are fine unless an active term asks for them.
#[derive(Clone, Copy, Default)]
pub struct LossInputs<'a> {
    pub preds: &'a [ArrayView2<'a, f64>],
    pub targets: &'a [ArrayView2<'a, f64>],
    pub adversarial: Option<AdversarialInput<'a>>,
    pub featurizer: Option<&'a dyn Featurizer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TermValue {
    pub term: LossTerm,
    pub weight: f64,
    pub value: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<TermValue>,
}

impl LossBreakdown {
    pub fn get(&self, term: LossTerm) -> Option<&TermValue> {
        self.terms.iter().find(|t| t.term == term)
    }

    pub fn values(&self) -> BTreeMap<LossTerm, f64> {
        self.terms.iter().map(|t| (t.term, t.value)).collect()
    }
}

/// Gradients of the weighted total.
#[derive(Clone, Debug)]
pub struct LossGrads {
    /// One gradient per predicted image.
    pub preds: Vec<Array2<f64>>,
    /// Gradient w.r.t. the discriminator probabilities on the fakes.
    pub d_fake: Vec<f64>,
}

/// Weighted sum of the active terms, each averaged over the batch.
pub fn compose_loss(spec: &LossSpec, inputs: &LossInputs<'_>) -> Result<LossBreakdown> {
    Ok(compose(spec, inputs, false)?.0)
}

pub fn compose_loss_grad(spec: &LossSpec, inputs: &LossInputs<'_>) -> Result<(LossBreakdown, LossGrads)> {
    compose(spec, inputs, true)
}

type PairGrad = fn(ArrayView2<f64>, ArrayView2<f64>) -> Result<(f64, Array2<f64>)>;

fn compose(spec: &LossSpec, inputs: &LossInputs<'_>, want_grad: bool) -> Result<(LossBreakdown, LossGrads)> {
    spec.weights.validate()?;
    let n = inputs.preds.len();
    let image_terms = spec.terms.iter().any(|t| !t.is_adversarial());
    if image_terms && (n == 0 || inputs.targets.len() != n) {
        let term = spec.terms.iter().find(|t| !t.is_adversarial()).expect("checked");
        return Err(Error::config(format!(
            "{term} needs matching predictions and targets ({n} vs {})",
            inputs.targets.len()
        )));
    }
    let mut grads = LossGrads {
        preds: inputs.preds.iter().map(|p| Array2::zeros(p.dim())).collect(),
        d_fake: Vec::new(),
    };
    let mut terms = Vec::with_capacity(spec.terms.len());
    let mut total = 0.0;
    for &term in &spec.terms {
        let weight = spec.weights.weight(term);
        let value = match term {
            LossTerm::Global | LossTerm::Context => {
                let wanted = if term == LossTerm::Context {
                    DiscriminatorKind::Context
                } else {
                    DiscriminatorKind::Basic
                };
                let adv = inputs
                    .adversarial
                    .filter(|a| a.kind == wanted)
                    .ok_or_else(|| Error::config(format!("{term} needs {wanted:?} discriminator outputs")))?;
                let (v, g) = context_adversarial_loss_g_grad(adv.d_fake)?;
                if want_grad {
                    grads.d_fake = g.iter().map(|x| x * weight).collect();
                }
                v
            }
            LossTerm::Vgg => {
                let feat = inputs
                    .featurizer
                    .ok_or_else(|| Error::config(format!("{term} needs a featurizer")))?;
                let mut sum = 0.0;
                for i in 0..n {
                    if want_grad {
                        let (v, g) = perceptual_loss_grad(inputs.preds[i], inputs.targets[i], feat)?;
                        grads.preds[i].scaled_add(weight / n as f64, &g);
                        sum += v;
                    } else {
                        sum += perceptual_loss(inputs.preds[i], inputs.targets[i], feat)?;
                    }
                }
                sum / n as f64
            }
            LossTerm::Imag | LossTerm::Freq | LossTerm::Ssim => {
                let f: PairGrad = match term {
                    LossTerm::Imag => l1_image_loss_grad,
                    LossTerm::Freq => frequency_loss_grad,
                    _ => ssim_loss_grad,
                };
                let mut sum = 0.0;
                for i in 0..n {
                    let (v, g) = f(inputs.preds[i], inputs.targets[i])?;
                    if want_grad {
                        grads.preds[i].scaled_add(weight / n as f64, &g);
                    }
                    sum += v;
                }
                sum / n as f64
            }
        };
        let weighted = weight * value;
        total += weighted;
        terms.push(TermValue {
            term,
            weight,
            value,
            weighted,
        });
    }
    Ok((LossBreakdown { total, terms }, grads))
}
