//! Oracles and finite-difference helpers shared by the test targets.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use recon_glgan::data::SegMask;

pub const FD_STEP: f64 = 1e-6;

/// The loss-terms table, transcribed as strings.
pub const TABLE: [(&str, &[&str]); 10] = [
    ("GAN", &["L_imag", "L_global"]),
    ("Recon-GLGAN", &["L_imag", "L_context"]),
    ("ReconGAN", &["L_imag", "L_global", "L_freq"]),
    ("GL-ReconGAN", &["L_imag", "L_context", "L_freq"]),
    ("DAGAN", &["L_imag", "L_global", "L_freq", "L_vgg"]),
    ("GL-DAGAN", &["L_imag", "L_context", "L_freq", "L_vgg"]),
    ("SEGAN", &["L_imag", "L_global", "L_ssim"]),
    ("GL-SEGAN", &["L_imag", "L_context", "L_ssim"]),
    ("ComGAN", &["L_imag", "L_freq", "L_global", "L_ssim"]),
    ("GL-ComGAN", &["L_imag", "L_freq", "L_context", "L_ssim"]),
];

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((h, w), || rng.gen_range(0.05..0.95))
}

pub fn probes(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect()
}

/// Largest relative error between `grad` and central differences of `f` at `points`.
pub fn max_pixel_grad_err(
    f: &dyn Fn(&Array2<f64>) -> f64,
    grad: &Array2<f64>,
    x: &Array2<f64>,
    points: &[(usize, usize)],
) -> f64 {
    let mut worst = 0.0f64;
    for &(r, c) in points {
        let mut xp = x.clone();
        xp[[r, c]] += FD_STEP;
        let mut xm = x.clone();
        xm[[r, c]] -= FD_STEP;
        let fd = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grad[[r, c]], fd));
    }
    worst
}

/// Largest relative error of a gradient over a flat vector of inputs.
pub fn max_vec_grad_err(f: &dyn Fn(&[f64]) -> f64, grad: &[f64], x: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] += FD_STEP;
        let mut xm = x.to_vec();
        xm[i] -= FD_STEP;
        let fd = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grad[i], fd));
    }
    worst
}

pub fn unit_image(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, n), || rng.gen_range(0.0..1.0))
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> SegMask {
    // Blocky masks so labels form regions rather than salt and pepper.
    let cells = Array2::from_shape_simple_fn((4, 4), || rng.gen_range(0..4u8));
    let flip = rng.gen_range(0..n * n);
    let block = n / 4;
    let mut l = Array2::from_shape_fn((n, n), |(r, c)| cells[[r / block, c / block]]);
    l[[flip / n, flip % n]] = rng.gen_range(0..4);
    SegMask::new(l).unwrap()
}

pub fn oracle_ssim(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let n = x.nrows();
    let mut w = Array2::from_shape_fn((k, k), |(i, j)| {
        let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    w /= w.sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for r in 0..=n - k {
        for c in 0..=n - k {
            let mut mx = 0.0;
            let mut my = 0.0;
            for i in 0..k {
                for j in 0..k {
                    mx += w[[i, j]] * x[[r + i, c + j]];
                    my += w[[i, j]] * y[[r + i, c + j]];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (a, b) = (x[[r + i, c + j]] - mx, y[[r + i, c + j]] - my);
                    vx += w[[i, j]] * a * a;
                    vy += w[[i, j]] * b * b;
                    cov += w[[i, j]] * a * b;
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

fn points(m: &SegMask, label: u8) -> Vec<(f64, f64)> {
    m.labels()
        .indexed_iter()
        .filter(|(_, &v)| v == label)
        .map(|((r, c), _)| (r as f64, c as f64))
        .collect()
}

pub fn oracle_hausdorff(a: &SegMask, b: &SegMask, label: u8) -> Option<f64> {
    let (pa, pb) = (points(a, label), points(b, label));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}

pub fn oracle_dice(a: &SegMask, b: &SegMask, label: u8) -> f64 {
    let (pa, pb) = (points(a, label), points(b, label));
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    let inter = pa.iter().filter(|p| pb.contains(p)).count();
    2.0 * inter as f64 / (pa.len() + pb.len()) as f64
}
