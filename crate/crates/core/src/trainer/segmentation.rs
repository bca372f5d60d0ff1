use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{eval_zero_filled, Reconstructor};
use crate::data::{label_name, DatasetSplit, ImageSlice, SegMask, IMAGE_SIZE, LABEL_LV, LABEL_MC, LABEL_RV};
use crate::error::{Error, Result};
use crate::metrics::{dice, hausdorff, Summary};
use crate::networks::{seg_forward, softmax_channels, to_batch, Norm, SegNet};
use crate::nn::Module;
use crate::optim::OptimizerConfig;
use crate::seeds::derive;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub depth: usize,
    pub base_channels: usize,
    pub norm: Norm,
    pub optimizer: OptimizerConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            seed: 0,
            depth: 4,
            base_channels: 8,
            norm: Norm::Instance,
            optimizer: OptimizerConfig::adam(1e-3),
        }
    }
}

/// Pixel-wise cross-entropy training on fully sampled images.
/// Returns the network and the mean training loss per epoch.
pub fn train_segmentation(data: &DatasetSplit, config: &SegTrainConfig) -> Result<(SegNet<f32>, Vec<f64>)> {
    data.ensure_nonempty()?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::config("segmentation epochs and batch_size must be positive"));
    }
    let masks: Vec<&SegMask> = data
        .items
        .iter()
        .map(|it| {
            it.mask
                .as_ref()
                .ok_or_else(|| Error::config(format!("slice '{}' has no segmentation mask", it.image.slice_id)))
        })
        .collect::<Result<_>>()?;
    let mut net = SegNet::new(
        config.depth,
        config.base_channels,
        config.norm,
        &mut ChaCha8Rng::seed_from_u64(derive(&[config.seed, 20])),
    )?;
    let mut opt = config.optimizer.build::<f32>();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(&[config.seed, 21, epoch as u64])));
        let mut sum = 0.0;
        let mut count = 0;
        for idxs in order.chunks(config.batch_size) {
            let images: Vec<_> = idxs.iter().map(|&i| data.items[i].image.pixels()).collect();
            let x = to_batch::<f32>(&images);
            let (scores, cache) = net.unet.forward_cached(&x)?;
            let n = idxs.len();
            let scale = 1.0 / (n * IMAGE_SIZE * IMAGE_SIZE) as f32;
            let mut grad = Array4::zeros(scores.raw_dim());
            let mut loss = 0.0f64;
            for (b, &i) in idxs.iter().enumerate() {
                let probs = softmax_channels(&scores.index_axis(Axis(0), b).to_owned());
                let labels = masks[i].labels();
                let mut g = grad.index_axis_mut(Axis(0), b);
                g.assign(&probs);
                for ((r, c), &l) in labels.indexed_iter() {
                    let l = usize::from(l);
                    loss -= f64::from(probs[[l, r, c]].max(1e-12)).ln();
                    g[[l, r, c]] -= 1.0;
                }
            }
            grad.mapv_inplace(|v| v * scale);
            let loss = loss * f64::from(scale);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "cross_entropy".into(),
                    epoch,
                    batch: count,
                });
            }
            net.zero_grad();
            net.unet.backward(&cache, &grad);
            opt.step(&mut net);
            sum += loss;
            count += 1;
        }
        losses.push(sum / count as f64);
    }
    Ok((net, losses))
}

pub const SEG_LABELS: [u8; 3] = [LABEL_RV, LABEL_MC, LABEL_LV];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEvalRow {
    pub source: String,
    pub slice_id: String,
    pub label: String,
    pub dice: f64,
    /// `None` when either label set is empty.
    pub hd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegSummaryRow {
    pub source: String,
    pub label: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
    pub hd_undefined: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegEvalTable {
    pub rows: Vec<SegEvalRow>,
}

impl SegEvalTable {
    pub fn summary(&self) -> Vec<SegSummaryRow> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.source.clone(), r.label.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(source, label)| {
                let sel: Vec<&SegEvalRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.source == source && r.label == label)
                    .collect();
                let dices: Vec<f64> = sel.iter().map(|r| r.dice).collect();
                let hds: Vec<f64> = sel.iter().filter_map(|r| r.hd).collect();
                let d = Summary::of(&dices);
                let h = (!hds.is_empty()).then(|| Summary::of(&hds));
                SegSummaryRow {
                    source,
                    label,
                    dice_mean: d.mean,
                    dice_std: d.std,
                    hd_mean: h.map(|s| s.mean),
                    hd_std: h.map(|s| s.std),
                    hd_undefined: sel.len() - hds.len(),
                }
            })
            .collect()
    }

    pub fn summary_for(&self, source: &str, label: u8) -> Option<SegSummaryRow> {
        self.summary()
            .into_iter()
            .find(|r| r.source == source && r.label == label_name(label))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.summary() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Predicted masks for one evaluation source, keyed like the test split.
pub struct SegPrediction {
    pub source: String,
    pub image: ImageSlice,
    pub mask: SegMask,
}

/// Scores segmentations of FS, ZF and each reconstruction against the
/// segmentation of the FS image, which serves as ground truth.
pub fn segmentation_eval(
    seg: &SegNet<f32>,
    generators: &[(&str, &dyn Reconstructor)],
    data: &DatasetSplit,
    acceleration: usize,
    center_fraction: f64,
) -> Result<(SegEvalTable, Vec<Vec<SegPrediction>>)> {
    data.ensure_nonempty()?;
    let mut rows = Vec::new();
    let mut predictions = Vec::with_capacity(data.len());
    for item in &data.items {
        let fs = &item.image;
        let truth = seg_forward(seg, fs)?;
        let zf = eval_zero_filled(fs, acceleration, center_fraction)?;
        let mut sources: Vec<(String, ImageSlice)> = vec![("FS".into(), fs.clone()), ("ZF".into(), zf.clone())];
        for (name, g) in generators {
            sources.push(((*name).to_string(), g.reconstruct(&zf)?));
        }
        let mut per_item = Vec::with_capacity(sources.len());
        for (source, image) in sources {
            let mask = if source == "FS" { truth.clone() } else { seg_forward(seg, &image)? };
            for label in SEG_LABELS {
                let hd = match hausdorff(&mask, &truth, label) {
                    Ok(v) => Some(v),
                    Err(Error::UndefinedMetric(_)) => None,
                    Err(e) => return Err(e),
                };
                rows.push(SegEvalRow {
                    source: source.clone(),
                    slice_id: fs.slice_id.clone(),
                    label: label_name(label).to_string(),
                    dice: dice(&mask, &truth, label)?,
                    hd,
                });
            }
            per_item.push(SegPrediction { source, image, mask });
        }
        predictions.push(per_item);
    }
    Ok((SegEvalTable { rows }, predictions))
}

/// Mean Dice of one label between predictions on FS images and the stored masks.
pub fn dice_against_masks(seg: &SegNet<f32>, data: &DatasetSplit, label: u8) -> Result<f64> {
    data.ensure_nonempty()?;
    let mut sum = 0.0;
    for item in &data.items {
        let mask = item
            .mask
            .as_ref()
            .ok_or_else(|| Error::config(format!("slice '{}' has no mask", item.image.slice_id)))?;
        sum += dice(&seg_forward(seg, &item.image)?, mask, label)?;
    }
    Ok(sum / data.len() as f64)
}
