//! Full-reference fidelity metrics on RGB images in `[0, 1]`.

use crate::error::{Error, TensorError};
use crate::losses::gaussian_kernel_1d;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize), Error> {
    let dims = a.chw()?;
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op: "metric", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }.into());
    }
    Ok(dims)
}

/// `10·log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64, Error> {
    check_dims(a, b)?;
    let n = a.numel().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, valid positions), averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, Error> {
    let (ch, h, w) = check_dims(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_kernel_1d(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = a.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let mxx = filter_valid(&prod(&x, &x), h, w, &k);
        let myy = filter_valid(&prod(&y, &y), h, w, &k);
        let mxy = filter_valid(&prod(&x, &y), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / ch as f64)
}

/// Scores of one (enhanced, reference) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub path: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-pair scores and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_image: Vec<PairMetrics>,
}

impl MetricReport {
    pub fn from_pairs(per_image: Vec<PairMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let psnr_db = per_image.iter().map(|p| p.psnr_db).sum::<f64>() / n;
        let ssim = per_image.iter().map(|p| p.ssim).sum::<f64>() / n;
        Self { psnr_db, ssim, per_image }
    }
}
