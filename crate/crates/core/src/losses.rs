//! Regularization terms of the decomposition objective.
//!
//! | term | value |
//! |------|-------|
//! | reconstruction | `mean((I − R⊙L)²)` |
//! | illumination consistency | `mean(|T − L|)`, `T` = channel max of the blurred input |
//! | smoothness | `mean(|∇L| / exp(w)) + τ·mean(|∇R|)`, `w` = colour-mean of `|∇R|` per direction |
//! | illumination control | `mean(|E − R⊙L^γ|)` |
//!
//! The total is `λ_re·re + λ_e·e + λ_s·s + λ_i·i`. A term whose weight is zero is
//! still evaluated for reporting but never connected to the total.

use crate::autodiff::{channel_max, Graph, Var};
use crate::error::{Error, TensorError};
use crate::retinex;
use crate::tensor::{reflect_index, Real, Tensor};

pub const BLUR_SIZE: usize = 25;
pub const BLUR_SIGMA: f64 = 2.0;

/// Loss weights and targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_re: f64,
    pub lambda_e: f64,
    pub lambda_s: f64,
    pub lambda_i: f64,
    pub tau: f64,
    pub exposure: f64,
}

impl LossWeights {
    pub const TAU_NO_REFERENCE: f64 = 0.2;
    pub const TAU_PAIRED: f64 = 0.6;

    /// Weights for paired (reference available) runs.
    pub fn paired() -> Self {
        Self { lambda_re: 12.0, lambda_e: 0.05, lambda_s: 0.03, lambda_i: 0.01, tau: Self::TAU_PAIRED, exposure: 0.6 }
    }

    pub fn no_reference() -> Self {
        Self { tau: Self::TAU_NO_REFERENCE, ..Self::paired() }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let named = [
            ("lambda_re", self.lambda_re),
            ("lambda_e", self.lambda_e),
            ("lambda_s", self.lambda_s),
            ("lambda_i", self.lambda_i),
            ("tau", self.tau),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.exposure > 0.0 && self.exposure < 1.0) {
            return Err(Error::Config(format!("exposure must lie in (0, 1), got {}", self.exposure)));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::paired()
    }
}

/// Graph handles of the four terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reconstruction: Var,
    pub consistency: Var,
    pub smoothness: Var,
    pub control: Var,
    pub total: Var,
}

/// Scalar values of one evaluation, as logged per iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub reconstruction: f64,
    pub consistency: f64,
    pub smoothness: f64,
    pub control: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read<T: Real>(g: &Graph<T>, v: &LossVars) -> Self {
        Self {
            reconstruction: g.item(v.reconstruction).as_f64(),
            consistency: g.item(v.consistency).as_f64(),
            smoothness: g.item(v.smoothness).as_f64(),
            control: g.item(v.control).as_f64(),
            total: g.item(v.total).as_f64(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.reconstruction, self.consistency, self.smoothness, self.control, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Normalized 1-D Gaussian taps (sum is 1 in 64-bit).
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur of every channel with reflect padding. Accumulates
/// in 64-bit so constant images stay exactly constant.
pub fn gaussian_blur(input: &Tensor, size: usize, sigma: f64) -> Result<Tensor, Error> {
    if size % 2 == 0 {
        return Err(Error::Invalid(format!("blur size must be odd, got {size}")));
    }
    let (ch, h, w) = input.chw()?;
    let taps = gaussian_kernel_1d(size, sigma);
    let r = (size / 2) as isize;
    let plane = h * w;
    let src = input.data();
    let mut out = Vec::with_capacity(ch * plane);
    let mut tmp = vec![0.0f64; plane];
    for c in 0..ch {
        let p = &src[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * p[y * w + reflect_index(x as isize + k as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[reflect_index(y as isize + k as isize - r, h) * w + x])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Ok(Tensor::new(&[ch, h, w], out)?)
}

/// Illumination prior: per-pixel channel max of the Gaussian-blurred input
/// (25×25, σ = 2). Constant with respect to the optimization.
pub fn illumination_target(i_low: &Tensor) -> Result<Tensor, Error> {
    let (ch, _, _) = i_low.chw()?;
    if ch != 3 {
        return Err(Error::Invalid(format!("illumination target needs 3 channels, got {ch}")));
    }
    let blurred = gaussian_blur(i_low, BLUR_SIZE, BLUR_SIGMA)?;
    Ok(channel_max(&blurred)?)
}

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::ShapeMismatch { op, lhs: g.shape(a).to_vec(), rhs: g.shape(b).to_vec() });
    }
    Ok(())
}

pub fn loss_reconstruction<T: Real>(g: &mut Graph<T>, i_low: Var, reconstruction: Var) -> Result<Var, TensorError> {
    same_shape(g, "loss_reconstruction", i_low, reconstruction)?;
    let d = g.sub(i_low, reconstruction)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

pub fn loss_illumination_consistency<T: Real>(g: &mut Graph<T>, target: Var, illumination: Var) -> Result<Var, TensorError> {
    same_shape(g, "loss_illumination_consistency", target, illumination)?;
    let d = g.sub(target, illumination)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

pub fn loss_smoothness<T: Real>(g: &mut Graph<T>, illumination: Var, reflectance: Var, tau: f64) -> Result<Var, TensorError> {
    let (ls, rs) = (g.shape(illumination).to_vec(), g.shape(reflectance).to_vec());
    if ls.len() != 3 || rs.len() != 3 || ls[1..] != rs[1..] {
        return Err(TensorError::ShapeMismatch { op: "loss_smoothness", lhs: ls, rhs: rs });
    }
    if ls[0] != 1 {
        return Err(TensorError::Invalid {
            op: "loss_smoothness",
            msg: format!("illumination must have 1 channel, got {}", ls[0]),
        });
    }
    let grad_l = g.spatial_gradient(illumination)?;
    let grad_l = g.abs(grad_l);
    let grad_r = g.spatial_gradient(reflectance)?;
    let grad_r = g.abs(grad_r);
    // One weight per direction, averaged over the colour channels.
    let weight = g.channel_group_mean(grad_r, 2)?;
    let weight = g.exp(weight);
    let ratio = g.div(grad_l, weight)?;
    let first = g.mean(ratio);
    let second = g.mean(grad_r);
    let second = g.scale(second, tau);
    g.add(first, second)
}

pub fn loss_illumination_control<T: Real>(
    g: &mut Graph<T>,
    reflectance: Var,
    illumination: Var,
    gamma: Var,
    exposure: f64,
) -> Result<Var, TensorError> {
    let enhanced = retinex::enhance_compose(g, reflectance, illumination, gamma)?;
    let e = g.scalar(T::from_f64(exposure));
    let d = g.sub(e, enhanced)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Weighted sum; zero-weight terms are left out of the graph of the total.
pub fn loss_total<T: Real>(g: &mut Graph<T>, parts: [Var; 4], w: &LossWeights) -> Result<Var, TensorError> {
    let lambdas = [w.lambda_re, w.lambda_e, w.lambda_s, w.lambda_i];
    let mut total: Option<Var> = None;
    for (part, lambda) in parts.into_iter().zip(lambdas) {
        if lambda == 0.0 {
            continue;
        }
        let term = g.scale(part, lambda);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.scalar(T::zero()),
    })
}

/// Builds all four terms and the total for one decomposition.
pub fn all_losses<T: Real>(
    g: &mut Graph<T>,
    i_low: Var,
    target: Var,
    reflectance: Var,
    illumination: Var,
    gamma: Var,
    w: &LossWeights,
) -> Result<LossVars, TensorError> {
    let recon = retinex::reconstruct(g, reflectance, illumination)?;
    let reconstruction = loss_reconstruction(g, i_low, recon)?;
    let consistency = loss_illumination_consistency(g, target, illumination)?;
    let smoothness = loss_smoothness(g, illumination, reflectance, w.tau)?;
    let control = loss_illumination_control(g, reflectance, illumination, gamma, w.exposure)?;
    let total = loss_total(g, [reconstruction, consistency, smoothness, control], w)?;
    Ok(LossVars { reconstruction, consistency, smoothness, control, total })
}
