//! Update rules and the seed-space optimization loop.

mod run;

pub use run::{build_decoders, run, run_with, EnhanceResult, Snapshot};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, TensorError};
use crate::tensor::Tensor;

/// Which tensors receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizationMode {
    /// Seeds and gamma; decoder weights stay frozen.
    #[default]
    SeedOnly,
    /// Decoder weights and gamma; seeds stay fixed.
    ParamsOnly,
    /// Seeds, decoder weights and gamma.
    Joint,
}

impl OptimizationMode {
    pub fn seeds_learnable(self) -> bool {
        matches!(self, Self::SeedOnly | Self::Joint)
    }

    pub fn weights_learnable(self) -> bool {
        matches!(self, Self::ParamsOnly | Self::Joint)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SeedOnly => "seed",
            Self::ParamsOnly => "params",
            Self::Joint => "joint",
        }
    }
}

impl fmt::Display for OptimizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "seed" | "seed-only" => Ok(Self::SeedOnly),
            "params" | "params-only" => Ok(Self::ParamsOnly),
            "joint" => Ok(Self::Joint),
            other => Err(Error::Config(format!("unknown mode {other:?} (seed, params, joint)"))),
        }
    }
}

/// How the two decoders are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitSetting {
    /// Pretrained reflectance decoder, random illumination decoder.
    #[default]
    PretrainedReflectance,
    /// Both decoders random.
    RandomAll,
    /// Both decoders loaded from weight files.
    PretrainedBoth,
}

impl InitSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PretrainedReflectance => "pretrained-reflectance",
            Self::RandomAll => "random-all",
            Self::PretrainedBoth => "pretrained-both",
        }
    }
}

impl fmt::Display for InitSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "pretrained-reflectance" => Ok(Self::PretrainedReflectance),
            "random-all" => Ok(Self::RandomAll),
            "pretrained-both" => Ok(Self::PretrainedBoth),
            other => Err(Error::Config(format!(
                "unknown init {other:?} (pretrained-reflectance, random-all, pretrained-both)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent, `z ← z − lr·∇z`.
    Gd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::Gd => "gd",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "adam" => Ok(Self::Adam),
            "gd" => Ok(Self::Gd),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (adam, gd)"))),
        }
    }
}

/// A named learnable tensor handed to an optimizer.
pub struct Param<'a> {
    pub name: &'a str,
    pub tensor: &'a mut Tensor,
}

impl<'a> Param<'a> {
    pub fn new(name: &'a str, tensor: &'a mut Tensor) -> Self {
        Self { name, tensor }
    }
}

/// One gradient-descent step: returns `leaf − lr·grad`.
pub fn gd_step(leaf: &Tensor, lr: f32) -> Result<Tensor, TensorError> {
    let grad = leaf.grad().ok_or(TensorError::Invalid {
        op: "gd_step",
        msg: "leaf has no gradient".into(),
    })?;
    let data = leaf.data().iter().zip(grad).map(|(&x, &g)| x - lr * g).collect();
    let mut out = Tensor::new(leaf.shape(), data)?;
    out.set_requires_grad(leaf.requires_grad());
    Ok(out)
}

fn check_finite(params: &[Param<'_>], iteration: usize) -> Result<(), Error> {
    for p in params {
        if let Some(g) = p.tensor.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("gradient of {}[{i}]", p.name), iteration });
            }
        }
    }
    Ok(())
}

/// Applies [`gd_step`] in place to every parameter that has a gradient.
pub fn gd_update(params: &mut [Param<'_>], lr: f32, iteration: usize) -> Result<(), Error> {
    check_finite(params, iteration)?;
    for p in params.iter_mut() {
        if p.tensor.grad().is_some() {
            let next = gd_step(p.tensor, lr)?;
            p.tensor.data_mut().copy_from_slice(next.data());
        }
    }
    Ok(())
}

/// Bias-corrected Adam with per-parameter moment buffers (kept in 64-bit).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter from its gradient (a missing gradient counts
    /// as zero). Parameters must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [Param<'_>], iteration: usize) -> Result<(), Error> {
        check_finite(params, iteration)?;
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.tensor.numel()], vec![0.0; p.tensor.numel()])).collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Invalid(format!(
                "adam: expected {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            if m.len() != p.tensor.numel() {
                return Err(Error::Invalid(format!("adam: parameter {} changed size", p.name)));
            }
            let grad: Vec<f64> = match p.tensor.grad() {
                Some(g) => g.iter().map(|&x| x as f64).collect(),
                None => vec![0.0; m.len()],
            };
            for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x = (*x as f64 - self.lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}
