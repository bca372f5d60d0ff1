//! Alternating adversarial training, evaluation sweeps and the segmentation
//! downstream experiment.

mod evaluate;
mod segmentation;

pub use evaluate::*;
pub use segmentation::*;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array4, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, RoiMode, RoiProvider, RoiSpec, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::kspace::{make_cartesian_mask, undersample, DEFAULT_CENTER_FRACTION};
use crate::losses::{
    compose_loss_grad, context_adversarial_loss_d_grad, AdversarialInput, Featurizer, LossBreakdown,
    LossInputs, LossSpec, LossTerm, LossWeights, RandomConvFeaturizer, Variant, DEFAULT_FEATURIZER_SEED,
};
use crate::networks::{save_checkpoint, DiscriminatorNet, GeneratorConfig, GeneratorNet};
use crate::nn::{sigmoid, Module};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seeds::{derive, train_mask_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub acceleration: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub roi_mode: RoiMode,
    /// Write numbered checkpoints every this many epochs; 0 disables them.
    pub checkpoint_every: usize,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_every: usize,
    pub center_fraction: f64,
    pub g_optimizer: OptimizerConfig,
    pub d_optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    /// Skip discriminator updates entirely.
    pub freeze_discriminator: bool,
    pub featurizer_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ReconGlgan,
            acceleration: 4,
            epochs: 150,
            batch_size: 8,
            seed: 0,
            roi_mode: RoiMode::Oracle,
            checkpoint_every: 10,
            val_every: 1,
            center_fraction: DEFAULT_CENTER_FRACTION,
            g_optimizer: OptimizerConfig::adam(1e-3),
            d_optimizer: OptimizerConfig::sgd(5e-3),
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            freeze_discriminator: false,
            featurizer_seed: DEFAULT_FEATURIZER_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.acceleration) {
            return Err(Error::config(format!("acceleration must be 2, 4 or 8, got {}", self.acceleration)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.val_every == 0 {
            return Err(Error::config("val_every must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.center_fraction) {
            return Err(Error::config("center_fraction must lie in [0, 1]"));
        }
        for (name, opt) in [("g_optimizer", self.g_optimizer), ("d_optimizer", self.d_optimizer)] {
            let lr = opt.lr();
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(format!("{name} learning rate must be positive, got {lr}")));
            }
        }
        self.weights.validate()?;
        self.generator.validate()?;
        // Surfaces impossible mask settings before any work is done.
        make_cartesian_mask(IMAGE_SIZE, self.acceleration, self.center_fraction, 0)?;
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec::new(self.variant, self.weights)
    }
}

/// One row per completed epoch. Inactive terms and skipped validations are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub g_total: f64,
    #[serde(rename = "L_imag")]
    pub l_imag: Option<f64>,
    #[serde(rename = "L_global")]
    pub l_global: Option<f64>,
    #[serde(rename = "L_context")]
    pub l_context: Option<f64>,
    #[serde(rename = "L_freq")]
    pub l_freq: Option<f64>,
    #[serde(rename = "L_ssim")]
    pub l_ssim: Option<f64>,
    #[serde(rename = "L_vgg")]
    pub l_vgg: Option<f64>,
    pub d_loss: Option<f64>,
    pub val_l_imag: Option<f64>,
    pub val_fi_nmse: Option<f64>,
    pub val_fi_psnr: Option<f64>,
    pub val_fi_ssim: Option<f64>,
    pub val_roi_psnr: Option<f64>,
    pub val_roi_ssim: Option<f64>,
}

impl HistoryRow {
    fn term_mut(&mut self, term: LossTerm) -> &mut Option<f64> {
        match term {
            LossTerm::Imag => &mut self.l_imag,
            LossTerm::Global => &mut self.l_global,
            LossTerm::Context => &mut self.l_context,
            LossTerm::Freq => &mut self.l_freq,
            LossTerm::Ssim => &mut self.l_ssim,
            LossTerm::Vgg => &mut self.l_vgg,
        }
    }

    pub fn term(&self, term: LossTerm) -> Option<f64> {
        match term {
            LossTerm::Imag => self.l_imag,
            LossTerm::Global => self.l_global,
            LossTerm::Context => self.l_context,
            LossTerm::Freq => self.l_freq,
            LossTerm::Ssim => self.l_ssim,
            LossTerm::Vgg => self.l_vgg,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    /// Seconds per epoch. Kept apart from `rows` so the CSV stays reproducible.
    pub wall_time: Vec<f64>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<HistoryRow>, _>>()?;
        Ok(Self {
            rows,
            wall_time: Vec::new(),
        })
    }

    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "wall_time_s"])?;
        for (row, t) in self.rows.iter().zip(&self.wall_time) {
            w.write_record([row.epoch.to_string(), format!("{t:.3}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean validation metrics of one model (or the zero-filled baseline).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ValMetrics {
    pub l_imag: f64,
    pub fi_nmse: f64,
    pub fi_psnr: f64,
    pub fi_ssim: f64,
    pub roi_psnr: Option<f64>,
    pub roi_ssim: Option<f64>,
}

pub struct TrainOutcome {
    pub generator: GeneratorNet<f32>,
    /// Generator with the best validation FI-PSNR.
    pub best_generator: GeneratorNet<f32>,
    pub best_epoch: usize,
    pub discriminator: DiscriminatorNet<f32>,
    pub history: TrainHistory,
    pub zero_filled: ValMetrics,
    /// Generator parameter digest after every optimizer step.
    pub step_digests: Vec<u64>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where checkpoints go; nothing is written when `None`.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&HistoryRow, f64)>,
}

struct Batch {
    xu: Array4<f32>,
    xf: Array4<f32>,
    targets: Vec<Array2<f64>>,
    rois: Vec<RoiSpec>,
}

fn to_f32_batch(images: &[Array2<f64>]) -> Array4<f32> {
    let mut out = Array4::zeros((images.len(), 1, IMAGE_SIZE, IMAGE_SIZE));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, 0, .., ..]).assign(&img.mapv(|v| v as f32));
    }
    out
}

fn batch_images(batch: &Array4<f32>) -> Vec<Array2<f64>> {
    (0..batch.dim().0)
        .map(|i| batch.slice(s![i, 0, .., ..]).mapv(f64::from))
        .collect()
}

/// Fixed-order plan shared by the adversarial trainer and the L1 reference trainer.
struct Plan<'a> {
    config: &'a TrainConfig,
    data: &'a DatasetSplit,
    rois: Vec<Option<RoiSpec>>,
}

impl<'a> Plan<'a> {
    fn new(config: &'a TrainConfig, data: &'a DatasetSplit, need_rois: bool) -> Result<Self> {
        data.ensure_nonempty()?;
        let mut rois = Vec::with_capacity(data.len());
        for item in &data.items {
            let roi = config.roi_mode.roi_for(item)?;
            if roi.is_none() && need_rois {
                return Err(Error::config(format!(
                    "{} needs an ROI for every training slice; '{}' has none under roi_mode {:?}",
                    config.variant, item.image.slice_id, config.roi_mode
                )));
            }
            rois.push(roi);
        }
        Ok(Self { config, data, rois })
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(&[self.config.seed, 3, epoch as u64])));
        idx
    }

    fn batch(&self, epoch: usize, idxs: &[usize]) -> Result<Batch> {
        let mut zfs = Vec::with_capacity(idxs.len());
        let mut targets = Vec::with_capacity(idxs.len());
        let mut rois = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let item = &self.data.items[i];
            let mask = make_cartesian_mask(
                IMAGE_SIZE,
                self.config.acceleration,
                self.config.center_fraction,
                train_mask_seed(self.config.seed, epoch, i),
            )?;
            zfs.push(undersample(item.image.pixels(), &mask)?);
            targets.push(item.image.pixels().to_owned());
            rois.push(self.rois[i].unwrap_or_else(RoiSpec::image_center));
        }
        Ok(Batch {
            xu: to_f32_batch(&zfs),
            xf: to_f32_batch(&targets),
            targets,
            rois,
        })
    }
}

fn init_generator(config: &TrainConfig) -> Result<GeneratorNet<f32>> {
    GeneratorNet::new(config.generator, &mut ChaCha8Rng::seed_from_u64(derive(&[config.seed, 10])))
}

fn init_discriminator(config: &TrainConfig) -> DiscriminatorNet<f32> {
    DiscriminatorNet::new(
        config.variant.discriminator(),
        &mut ChaCha8Rng::seed_from_u64(derive(&[config.seed, 11])),
    )
}

fn check_finite(breakdown: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    for t in &breakdown.terms {
        if !t.value.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: t.term.name().into(),
                epoch,
                batch,
            });
        }
    }
    Ok(())
}

fn isolation(what: &str, before: u64, after: u64) -> Result<()> {
    if before != after {
        return Err(Error::config(format!("{what} parameters changed during the other network's update")));
    }
    Ok(())
}

/// `∂L/∂logit` from `∂L/∂p` for `p = σ(logit)`.
fn through_sigmoid(grad_p: &[f64], probs: &Array1<f32>) -> Array1<f32> {
    Array1::from_iter(
        grad_p
            .iter()
            .zip(probs)
            .map(|(&g, &p)| (g * f64::from(p) * (1.0 - f64::from(p))) as f32),
    )
}

fn to_f64(a: &Array1<f32>) -> Vec<f64> {
    a.iter().map(|&v| f64::from(v)).collect()
}

fn save_pair(dir: &Path, tag: &str, config: &TrainConfig, epoch: usize, g: &GeneratorNet<f32>, d: Option<&DiscriminatorNet<f32>>) -> Result<()> {
    save_checkpoint(
        &dir.join(format!("generator_{tag}.ckpt")),
        g,
        "generator",
        serde_json::to_value(g.config)?,
        config.seed,
        epoch,
    )?;
    if let Some(d) = d {
        save_checkpoint(
            &dir.join(format!("discriminator_{tag}.ckpt")),
            d,
            "discriminator",
            serde_json::json!({ "kind": d.kind() }),
            config.seed,
            epoch,
        )?;
    }
    Ok(())
}

/// Mean validation metrics: zero-filled input at fixed per-slice masks,
/// ROI rows wherever the provider yields a window.
pub fn validation_metrics(
    recon: &dyn Reconstructor,
    data: &DatasetSplit,
    acceleration: usize,
    center_fraction: f64,
    roi_provider: &dyn RoiProvider,
) -> Result<ValMetrics> {
    let out = evaluate(recon, data, acceleration, center_fraction, roi_provider)?;
    let mean = |v: Vec<f64>| -> Option<f64> {
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    use crate::metrics::Region;
    let l1: Vec<f64> = out
        .samples
        .iter()
        .map(|s| crate::losses::l1_image_loss(s.recon.view(), s.fs.view()))
        .collect::<Result<_>>()?;
    Ok(ValMetrics {
        l_imag: mean(l1).expect("nonempty"),
        fi_nmse: mean(out.recon.values(Region::Full, "nmse")).expect("nonempty"),
        fi_psnr: mean(out.recon.values(Region::Full, "psnr")).expect("nonempty"),
        fi_ssim: mean(out.recon.values(Region::Full, "ssim")).expect("nonempty"),
        roi_psnr: mean(out.recon.values(Region::Roi, "psnr")),
        roi_ssim: mean(out.recon.values(Region::Roi, "ssim")),
    })
}

/// Checks configuration and data without doing any work: validates the
/// config, requires a nonempty validation split and, for context variants,
/// an ROI for every training slice.
pub fn preflight(config: &TrainConfig, train_split: &DatasetSplit, val_split: &DatasetSplit) -> Result<()> {
    config.validate()?;
    val_split.ensure_nonempty()?;
    Plan::new(config, train_split, config.variant.uses_context()).map(|_| ())
}

/// Joint optimisation: per batch one discriminator step on (x_f, G(x_u)),
/// then one generator step on the variant's composed loss.
pub fn train(
    config: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    preflight(config, train_split, val_split)?;
    let spec = config.loss_spec();
    let plan = Plan::new(config, train_split, config.variant.uses_context())?;
    let featurizer = RandomConvFeaturizer::new(8, config.featurizer_seed);
    let mut g = init_generator(config)?;
    let mut d = init_discriminator(config);
    let mut g_opt: Optimizer<f32> = config.g_optimizer.build();
    let mut d_opt: Optimizer<f32> = config.d_optimizer.build();
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let zero_filled = validation_metrics(
        &IdentityReconstructor,
        val_split,
        config.acceleration,
        config.center_fraction,
        &config.roi_mode,
    )?;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, GeneratorNet<f32>)> = None;
    let mut step_digests = Vec::new();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut row = HistoryRow {
            epoch,
            g_total: 0.0,
            l_imag: None,
            l_global: None,
            l_context: None,
            l_freq: None,
            l_ssim: None,
            l_vgg: None,
            d_loss: None,
            val_l_imag: None,
            val_fi_nmse: None,
            val_fi_psnr: None,
            val_fi_ssim: None,
            val_roi_psnr: None,
            val_roi_ssim: None,
        };
        let mut d_sum = 0.0;
        let order = plan.order(epoch);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (b, idxs) in batches.iter().enumerate() {
            let batch = plan.batch(epoch, idxs)?;
            let (fake, g_cache) = g.forward_cached(&batch.xu)?;

            if !config.freeze_discriminator {
                let g_before = g.param_digest();
                d.zero_grad();
                let (lr, cr) = d.logits_cached(&batch.xf, &batch.rois)?;
                let (lf, cf) = d.logits_cached(&fake, &batch.rois)?;
                let (pr, pf) = (lr.mapv(sigmoid), lf.mapv(sigmoid));
                let (d_loss, gr, gf) = context_adversarial_loss_d_grad(&to_f64(&pr), &to_f64(&pf))?;
                if !d_loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        term: "L_d".into(),
                        epoch,
                        batch: b,
                    });
                }
                d.backward(&cr, &through_sigmoid(&gr, &pr));
                d.backward(&cf, &through_sigmoid(&gf, &pf));
                d_opt.step(&mut d);
                isolation("generator", g_before, g.param_digest())?;
                d_sum += d_loss;
            }

            let d_before = d.param_digest();
            let (lf, cf) = d.logits_cached(&fake, &batch.rois)?;
            let pf = lf.mapv(sigmoid);
            let pf64 = to_f64(&pf);
            let preds = batch_images(&fake);
            let pred_views: Vec<ArrayView2<f64>> = preds.iter().map(|p| p.view()).collect();
            let target_views: Vec<ArrayView2<f64>> = batch.targets.iter().map(|t| t.view()).collect();
            let inputs = LossInputs {
                preds: &pred_views,
                targets: &target_views,
                adversarial: Some(AdversarialInput {
                    kind: d.kind(),
                    d_fake: &pf64,
                }),
                featurizer: Some(&featurizer as &dyn Featurizer),
            };
            let (breakdown, grads) = compose_loss_grad(&spec, &inputs)?;
            check_finite(&breakdown, epoch, b)?;
            let mut grad_out = to_f32_batch(&grads.preds);
            if !grads.d_fake.is_empty() {
                grad_out += &d.backward(&cf, &through_sigmoid(&grads.d_fake, &pf));
                d.zero_grad();
            }
            g.zero_grad();
            g.backward(&g_cache, &grad_out);
            g_opt.step(&mut g);
            isolation("discriminator", d_before, d.param_digest())?;
            step_digests.push(g.param_digest());

            row.g_total += breakdown.total;
            for t in &breakdown.terms {
                *row.term_mut(t.term).get_or_insert(0.0) += t.value;
            }
        }

        let nb = batches.len() as f64;
        row.g_total /= nb;
        for term in LossTerm::ALL {
            if let Some(v) = row.term_mut(term) {
                *v /= nb;
            }
        }
        if !config.freeze_discriminator {
            row.d_loss = Some(d_sum / nb);
        }

        if epoch % config.val_every == 0 || epoch == config.epochs {
            let val = validation_metrics(&g, val_split, config.acceleration, config.center_fraction, &config.roi_mode)?;
            row.val_l_imag = Some(val.l_imag);
            row.val_fi_nmse = Some(val.fi_nmse);
            row.val_fi_psnr = Some(val.fi_psnr);
            row.val_fi_ssim = Some(val.fi_ssim);
            row.val_roi_psnr = val.roi_psnr;
            row.val_roi_ssim = val.roi_ssim;
            if best.as_ref().is_none_or(|(p, _, _)| val.fi_psnr > *p) {
                best = Some((val.fi_psnr, epoch, g.clone()));
                if let Some(dir) = &options.checkpoint_dir {
                    save_pair(dir, "best", config, epoch, &g, None)?;
                }
            }
        }
        if let Some(dir) = &options.checkpoint_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                save_pair(dir, &format!("epoch{epoch:04}"), config, epoch, &g, Some(&d))?;
            }
        }
        let secs = started.elapsed().as_secs_f64();
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&row, secs);
        }
        history.rows.push(row);
        history.wall_time.push(secs);
    }

    if let Some(dir) = &options.checkpoint_dir {
        save_pair(dir, "last", config, config.epochs, &g, Some(&d))?;
    }
    let (_, best_epoch, best_generator) = best.expect("last epoch is always validated");
    Ok(TrainOutcome {
        generator: g,
        best_generator,
        best_epoch,
        discriminator: d,
        history,
        zero_filled,
        step_digests,
    })
}

/// Reference trainer: the same generator, data order, masks and optimizer,
/// minimising `λ₁·L_imag` alone with no discriminator at all.
pub fn train_l1_regression(config: &TrainConfig, train_split: &DatasetSplit) -> Result<(GeneratorNet<f32>, Vec<u64>)> {
    config.validate()?;
    let spec = LossSpec {
        variant: config.variant,
        terms: vec![LossTerm::Imag],
        weights: config.weights,
    };
    let plan = Plan::new(config, train_split, false)?;
    let mut g = init_generator(config)?;
    let mut opt: Optimizer<f32> = config.g_optimizer.build();
    let mut digests = Vec::new();
    for epoch in 1..=config.epochs {
        let order = plan.order(epoch);
        for (b, idxs) in order.chunks(config.batch_size).enumerate() {
            let batch = plan.batch(epoch, idxs)?;
            let (fake, cache) = g.forward_cached(&batch.xu)?;
            let preds = batch_images(&fake);
            let pred_views: Vec<ArrayView2<f64>> = preds.iter().map(|p| p.view()).collect();
            let target_views: Vec<ArrayView2<f64>> = batch.targets.iter().map(|t| t.view()).collect();
            let inputs = LossInputs {
                preds: &pred_views,
                targets: &target_views,
                ..Default::default()
            };
            let (breakdown, grads) = compose_loss_grad(&spec, &inputs)?;
            check_finite(&breakdown, epoch, b)?;
            g.zero_grad();
            g.backward(&cache, &to_f32_batch(&grads.preds));
            opt.step(&mut g);
            digests.push(g.param_digest());
        }
    }
    Ok((g, digests))
}
