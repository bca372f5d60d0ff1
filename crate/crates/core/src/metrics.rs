//! Reconstruction metrics (NMSE, PSNR, SSIM) on the full image and the ROI,
//! and segmentation agreement (Dice, Hausdorff distance).
//!
//! Argument order is always `(prediction, reference)`; NMSE and PSNR are not
//! symmetric.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{crop_roi, RoiSpec, SegMask};
use crate::error::{Error, Result};

fn same_shape<A, B>(a: &ArrayView2<A>, b: &ArrayView2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::param(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `‖pred − target‖² / ‖target‖²`.
pub fn nmse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    same_shape(&pred, &target)?;
    let energy: f64 = target.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::UndefinedMetric("NMSE against an all-zero reference".into()));
    }
    let err: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(err / energy)
}

pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    same_shape(&pred, &target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n)
}

/// `10·log10(range² / MSE)`; `+inf` for identical inputs.
pub fn psnr(pred: ArrayView2<f64>, target: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Array1<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g = Array1::from_shape_fn(self.window, |i| {
            (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()
        });
        let s = g.sum();
        g / s
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Separable "valid" correlation with `taps` along both axes.
fn filter_valid(x: ArrayView2<f64>, taps: &Array1<f64>) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::zeros((h, wo));
    for r in 0..h {
        for c in 0..wo {
            let mut acc = 0.0;
            for (j, &t) in taps.iter().enumerate() {
                acc += t * x[[r, c + j]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((ho, wo));
    for r in 0..ho {
        for (i, &t) in taps.iter().enumerate() {
            let src = rows.row(r + i);
            let mut dst = out.row_mut(r);
            dst.scaled_add(t, &src);
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters each window value back over its footprint.
fn filter_adjoint(m: ArrayView2<f64>, taps: &Array1<f64>, h: usize, w: usize) -> Array2<f64> {
    let (ho, wo) = m.dim();
    let mut rows = Array2::zeros((h, wo));
    for r in 0..ho {
        for (i, &t) in taps.iter().enumerate() {
            let mut dst = rows.row_mut(r + i);
            dst.scaled_add(t, &m.row(r));
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..wo {
            let v = rows[[r, c]];
            for (j, &t) in taps.iter().enumerate() {
                out[[r, c + j]] += t * v;
            }
        }
    }
    out
}

struct SsimMaps {
    map: Array2<f64>,
    mu_x: Array2<f64>,
    mu_y: Array2<f64>,
    a1: Array2<f64>,
    a2: Array2<f64>,
    b1: Array2<f64>,
    b2: Array2<f64>,
}

fn ssim_maps(x: ArrayView2<f64>, y: ArrayView2<f64>, p: &SsimParams) -> Result<SsimMaps> {
    same_shape(&x, &y)?;
    let (h, w) = x.dim();
    if h < p.window || w < p.window {
        return Err(Error::param(format!(
            "{h}x{w} image smaller than the {}x{0} SSIM window",
            p.window
        )));
    }
    let taps = p.taps();
    let mu_x = filter_valid(x, &taps);
    let mu_y = filter_valid(y, &taps);
    let exx = filter_valid(x.mapv(|v| v * v).view(), &taps);
    let eyy = filter_valid(y.mapv(|v| v * v).view(), &taps);
    let exy = filter_valid((&x * &y).view(), &taps);
    let (c1, c2) = (p.c1(), p.c2());
    let a1 = ndarray::Zip::from(&mu_x).and(&mu_y).map_collect(|&mx, &my| 2.0 * mx * my + c1);
    let a2 = ndarray::Zip::from(&exy)
        .and(&mu_x)
        .and(&mu_y)
        .map_collect(|&sxy, &mx, &my| 2.0 * (sxy - mx * my) + c2);
    let b1 = ndarray::Zip::from(&mu_x).and(&mu_y).map_collect(|&mx, &my| mx * mx + my * my + c1);
    let b2 = ndarray::Zip::from(&exx)
        .and(&eyy)
        .and(&mu_x)
        .and(&mu_y)
        .map_collect(|&sxx, &syy, &mx, &my| (sxx - mx * mx) + (syy - my * my) + c2);
    let map = ndarray::Zip::from(&a1)
        .and(&a2)
        .and(&b1)
        .and(&b2)
        .map_collect(|&a1, &a2, &b1, &b2| a1 * a2 / (b1 * b2));
    Ok(SsimMaps {
        map,
        mu_x,
        mu_y,
        a1,
        a2,
        b1,
        b2,
    })
}

/// Mean SSIM over all valid window positions (no padding).
pub fn ssim(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    ssim_with(pred, target, &SsimParams::default())
}

pub fn ssim_with(pred: ArrayView2<f64>, target: ArrayView2<f64>, params: &SsimParams) -> Result<f64> {
    let maps = ssim_maps(pred, target, params)?;
    Ok(maps.map.mean().expect("non-empty map"))
}

/// Mean SSIM and its gradient with respect to `pred`.
pub fn ssim_with_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    params: &SsimParams,
) -> Result<(f64, Array2<f64>)> {
    let SsimMaps {
        map,
        mu_x,
        mu_y,
        a1,
        a2,
        b1,
        b2,
    } = ssim_maps(pred, target, params)?;
    let n = map.len() as f64;
    let value = map.sum() / n;
    // S = A1·A2 / (B1·B2) with A1, A2, B1, B2 functions of the window moments
    // m = Σw·x, exx = Σw·x², exy = Σw·x·y.
    let mut g_m = Array2::zeros(map.dim());
    let mut g_xx = Array2::zeros(map.dim());
    let mut g_xy = Array2::zeros(map.dim());
    for (idx, &s) in map.indexed_iter() {
        let (mx, my) = (mu_x[idx], mu_y[idx]);
        let (a1, a2, b1, b2) = (a1[idx], a2[idx], b1[idx], b2[idx]);
        let den = b1 * b2;
        let d_a = (2.0 * my * a2 - 2.0 * my * a1) / den;
        let d_b = s * (2.0 * mx / b1 - 2.0 * mx / b2);
        g_m[idx] = (d_a - d_b) / n;
        g_xy[idx] = 2.0 * a1 / den / n;
        g_xx[idx] = -s / b2 / n;
    }
    let taps = params.taps();
    let (h, w) = pred.dim();
    let gm = filter_adjoint(g_m.view(), &taps, h, w);
    let gxx = filter_adjoint(g_xx.view(), &taps, h, w);
    let gxy = filter_adjoint(g_xy.view(), &taps, h, w);
    let grad = ndarray::Zip::from(&gm)
        .and(&gxx)
        .and(&gxy)
        .and(&pred)
        .and(&target)
        .map_collect(|&a, &b, &c, &x, &y| a + 2.0 * x * b + y * c);
    Ok((value, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "FI")]
    Full,
    #[serde(rename = "ROI")]
    Roi,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Full => "FI",
            Region::Roi => "ROI",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub slice_id: String,
    pub region: Region,
    pub nmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// FI row, plus an ROI row computed on the cropped windows when `roi` is given.
pub fn evaluate_pair(
    slice_id: &str,
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    roi: Option<&RoiSpec>,
) -> Result<Vec<MetricRow>> {
    let row = |region, p: ArrayView2<f64>, t: ArrayView2<f64>| -> Result<MetricRow> {
        Ok(MetricRow {
            slice_id: slice_id.to_string(),
            region,
            nmse: nmse(p, t)?,
            psnr: psnr(p, t, 1.0)?,
            ssim: ssim(p, t)?,
        })
    };
    let mut rows = vec![row(Region::Full, pred, target)?];
    if let Some(roi) = roi {
        let p = crop_roi(pred, roi)?;
        let t = crop_roi(target, roi)?;
        rows.push(row(Region::Roi, p.view(), t.view())?);
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if mean.is_finite() {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        } else {
            f64::NAN
        };
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ± {}", fmt_metric(self.mean), fmt_metric(self.std))
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.5}")
    }
}

pub const METRIC_NAMES: [&str; 3] = ["nmse", "psnr", "ssim"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        Self { rows }
    }

    pub fn values(&self, region: Region, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.region == region)
            .map(|r| match metric {
                "nmse" => r.nmse,
                "psnr" => r.psnr,
                "ssim" => r.ssim,
                other => panic!("unknown metric {other}"),
            })
            .collect()
    }

    pub fn summary(&self, region: Region, metric: &str) -> Summary {
        Summary::of(&self.values(region, metric))
    }

    /// `region → metric → summary`, for the regions present.
    pub fn aggregate(&self) -> BTreeMap<Region, BTreeMap<&'static str, Summary>> {
        let mut out = BTreeMap::new();
        for region in [Region::Full, Region::Roi] {
            if self.rows.iter().any(|r| r.region == region) {
                let per: BTreeMap<_, _> = METRIC_NAMES
                    .iter()
                    .map(|&m| (m, self.summary(region, m)))
                    .collect();
                out.insert(region, per);
            }
        }
        out
    }

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
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Aggregates as JSON: `{"FI": {"psnr": {"mean", "std", "display": "m ± s"}}}`.
    pub fn aggregate_json(&self) -> serde_json::Value {
        let mut root = serde_json::Map::new();
        for (region, per) in self.aggregate() {
            let mut obj = serde_json::Map::new();
            for (metric, s) in per {
                obj.insert(
                    metric.to_string(),
                    serde_json::json!({
                        "mean": finite_or_string(s.mean),
                        "std": finite_or_string(s.std),
                        "display": s.to_string(),
                    }),
                );
            }
            root.insert(region.to_string(), serde_json::Value::Object(obj));
        }
        serde_json::Value::Object(root)
    }
}

fn finite_or_string(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(fmt_metric(v))
    }
}

/// `2|A∩B| / (|A|+|B|)` for one label; 1.0 when both sets are empty.
pub fn dice(a: &SegMask, b: &SegMask, label: u8) -> Result<f64> {
    same_shape(&a.labels(), &b.labels())?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels().iter()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Exact squared Euclidean distance transform (lower-envelope method) to the
/// pixels where `set` is true.
pub fn squared_distance_transform(set: ArrayView2<bool>) -> Array2<f64> {
    let inf = 1e20;
    let mut d = set.mapv(|s| if s { 0.0 } else { inf });
    let mut buf = Vec::new();
    for axis in [Axis(0), Axis(1)] {
        for mut lane in d.lanes_mut(axis) {
            buf.clear();
            buf.extend(lane.iter().copied());
            let out = lower_envelope(&buf);
            for (dst, v) in lane.iter_mut().zip(out) {
                *dst = v;
            }
        }
    }
    d
}

fn lower_envelope(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
    out
}

fn directed_hausdorff(from: ArrayView2<bool>, to_dt: &Array2<f64>) -> f64 {
    from.indexed_iter()
        .filter(|(_, &s)| s)
        .map(|(idx, _)| to_dt[idx])
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between the pixel sets of `label`, in pixels.
pub fn hausdorff(a: &SegMask, b: &SegMask, label: u8) -> Result<f64> {
    same_shape(&a.labels(), &b.labels())?;
    let sa = a.labels().mapv(|v| v == label);
    let sb = b.labels().mapv(|v| v == label);
    if !sa.iter().any(|&s| s) || !sb.iter().any(|&s| s) {
        return Err(Error::UndefinedMetric(format!(
            "Hausdorff distance with an empty label-{label} set"
        )));
    }
    let da = squared_distance_transform(sa.view());
    let db = squared_distance_transform(sb.view());
    Ok(directed_hausdorff(sa.view(), &db).max(directed_hausdorff(sb.view(), &da)))
}
