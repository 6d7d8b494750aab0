//! Retinex composition: `I = R ⊙ L` for reconstruction and `R ⊙ L^γ` for the
//! enhanced output. The single-channel illumination broadcasts over the three
//! reflectance channels.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, TensorError};
use crate::tensor::{Real, Tensor};

pub const GAMMA_MIN: f32 = 0.01;
pub const GAMMA_MAX: f32 = 10.0;
pub const GAMMA_INIT: f32 = 0.5;

/// Learnable gamma exponent, clamped to `[min, max]` after every update.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaParam {
    pub tensor: Tensor,
    pub min: f32,
    pub max: f32,
}

impl GammaParam {
    pub fn new(value: f32) -> Result<Self, Error> {
        Self::with_bounds(value, GAMMA_MIN, GAMMA_MAX)
    }

    pub fn with_bounds(value: f32, min: f32, max: f32) -> Result<Self, Error> {
        if !(min > 0.0 && min <= max) {
            return Err(Error::Invalid(format!("gamma bounds [{min}, {max}] are invalid")));
        }
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Invalid(format!("gamma must be positive, got {value}")));
        }
        let mut p = Self { tensor: Tensor::scalar(value).with_requires_grad(true), min, max };
        p.clamp();
        Ok(p)
    }

    pub fn value(&self) -> f32 {
        self.tensor.data()[0]
    }

    pub fn clamp(&mut self) {
        let v = self.tensor.data()[0].clamp(self.min, self.max);
        self.tensor.data_mut()[0] = v;
    }
}

impl Default for GammaParam {
    fn default() -> Self {
        Self::new(GAMMA_INIT).expect("default gamma is valid")
    }
}

/// Decomposed maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RetinexState {
    pub reflectance: Tensor,
    pub illumination: Tensor,
    pub gamma: GammaParam,
}

impl RetinexState {
    pub fn new(reflectance: Tensor, illumination: Tensor, gamma: GammaParam) -> Result<Self, Error> {
        let (rc, rh, rw) = reflectance.chw()?;
        let (lc, lh, lw) = illumination.chw()?;
        if rc != 3 || lc != 1 || rh != lh || rw != lw {
            return Err(TensorError::ShapeMismatch {
                op: "retinex state",
                lhs: reflectance.shape().to_vec(),
                rhs: illumination.shape().to_vec(),
            }
            .into());
        }
        Ok(Self { reflectance, illumination, gamma })
    }

    fn with_graph(&self, f: impl FnOnce(&mut Graph<f32>, Var, Var, Var) -> Result<Var, TensorError>) -> Result<Tensor, Error> {
        let mut g = Graph::new();
        let r = g.leaf(&self.reflectance);
        let l = g.leaf(&self.illumination);
        let gamma = g.leaf(&self.gamma.tensor);
        let out = f(&mut g, r, l, gamma)?;
        Ok(g.tensor(out))
    }

    pub fn reconstruct(&self) -> Result<Tensor, Error> {
        self.with_graph(|g, r, l, _| reconstruct(g, r, l))
    }

    pub fn enhance_compose(&self) -> Result<Tensor, Error> {
        self.with_graph(|g, r, l, gamma| enhance_compose(g, r, l, gamma))
    }
}

/// `R ⊙ L`.
pub fn reconstruct<T: Real>(g: &mut Graph<T>, reflectance: Var, illumination: Var) -> Result<Var, TensorError> {
    g.mul(reflectance, illumination)
}

/// Lower bound applied to the illumination before exponentiation. A sigmoid
/// output can underflow to exactly zero, where `L^γ` has no gradient in `γ`.
pub const ILLUMINATION_FLOOR: f64 = 1e-6;

/// `max(L, 1e-6)^γ`; differentiable in both the map and the exponent.
pub fn gamma_transform<T: Real>(g: &mut Graph<T>, illumination: Var, gamma: Var) -> Result<Var, TensorError> {
    if let Some(&bad) = g.value(gamma).iter().find(|v| **v <= T::zero()) {
        return Err(TensorError::Invalid { op: "gamma_transform", msg: format!("gamma must be positive, got {bad}") });
    }
    let l = g.clamp_min(illumination, ILLUMINATION_FLOOR);
    g.pow(l, gamma)
}

/// `R ⊙ L^γ`.
pub fn enhance_compose<T: Real>(g: &mut Graph<T>, reflectance: Var, illumination: Var, gamma: Var) -> Result<Var, TensorError> {
    let lg = gamma_transform(g, illumination, gamma)?;
    g.mul(reflectance, lg)
}
