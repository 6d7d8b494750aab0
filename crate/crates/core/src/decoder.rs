//! Convolutional decoder generators for reflectance and illumination maps.
//!
//! Each stage upsamples 2× (nearest), applies a 3×3 reflect-padded convolution
//! and a leaky ReLU; a final 3×3 convolution and sigmoid produce the map. There
//! are no normalization layers, so a frozen decoder has no hidden state that
//! could drift during optimization.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, TensorError};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 3;

/// Decoder architecture. The number of upsampling stages is `stage_channels.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub seed_channels: usize,
    pub stage_channels: Vec<usize>,
    pub out_channels: usize,
}

impl Arch {
    pub fn new(seed_channels: usize, stage_channels: Vec<usize>, out_channels: usize) -> Result<Self, Error> {
        let arch = Self { seed_channels, stage_channels, out_channels };
        arch.validate()?;
        Ok(arch)
    }

    /// Default reflectance decoder: 4 stages, 32 seed channels, 3 outputs.
    pub fn reflectance() -> Self {
        Self { seed_channels: 32, stage_channels: vec![64, 64, 32, 16], out_channels: 3 }
    }

    /// Same as [`Arch::reflectance`] with a single output channel.
    pub fn illumination() -> Self {
        Self { out_channels: 1, ..Self::reflectance() }
    }

    pub fn with_out_channels(&self, out_channels: usize) -> Self {
        Self { out_channels, ..self.clone() }
    }

    pub fn n_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial upscaling factor `2^n`.
    pub fn scale(&self) -> usize {
        1 << self.n_stages()
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.seed_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Invalid(format!("arch {self}: channel counts must be positive")));
        }
        if !matches!(self.out_channels, 1 | 3) {
            return Err(Error::Invalid(format!("arch {self}: out_channels must be 1 or 3")));
        }
        if self.n_stages() > 12 {
            return Err(Error::Invalid(format!("arch {self}: too many stages")));
        }
        Ok(())
    }

    /// Expected `(name, shape)` of every layer, in storage order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(2 * self.n_stages() + 2);
        let mut prev = self.seed_channels;
        for (i, &ch) in self.stage_channels.iter().enumerate() {
            out.push((format!("stage{i}.weight"), vec![ch, prev, KERNEL, KERNEL]));
            out.push((format!("stage{i}.bias"), vec![ch]));
            prev = ch;
        }
        out.push(("out.weight".to_string(), vec![self.out_channels, prev, KERNEL, KERNEL]));
        out.push(("out.bias".to_string(), vec![self.out_channels]));
        out
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stages={} seed_channels={} stage_channels={:?} out_channels={}",
            self.n_stages(),
            self.seed_channels,
            self.stage_channels,
            self.out_channels
        )
    }
}

/// Named convolution kernels and biases of one decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    arch: Arch,
    layers: Vec<(String, Tensor)>,
}

impl DecoderWeights {
    /// Validates that `layers` match `arch` exactly (names, order, shapes).
    pub fn from_layers(arch: Arch, layers: Vec<(String, Tensor)>) -> Result<Self, Error> {
        arch.validate()?;
        let expected = arch.layer_shapes();
        if expected.len() != layers.len() {
            return Err(Error::Invalid(format!(
                "arch {arch} needs {} layers, got {}",
                expected.len(),
                layers.len()
            )));
        }
        for ((en, es), (name, t)) in expected.iter().zip(&layers) {
            if en != name || es.as_slice() != t.shape() {
                return Err(Error::Invalid(format!(
                    "layer {name} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { arch, layers })
    }

    /// He-normal kernels (`σ = sqrt(2 / fan_in)`) and zero biases.
    pub fn init_random(arch: &Arch, rng_seed: u64) -> Result<Self, Error> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                    Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self { arch: arch.clone(), layers })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[(String, Tensor)] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// `(name, tensor)` pairs in layer order.
    pub fn layers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.layers.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().map(|(_, t)| t)
    }

    /// Marks every weight learnable or frozen.
    pub fn set_learnable(&mut self, learnable: bool) {
        self.tensors_mut().for_each(|t| t.set_requires_grad(learnable));
    }

    pub fn is_learnable(&self) -> bool {
        self.layers.iter().any(|(_, t)| t.requires_grad())
    }

    /// Registers the weights on `g` as leaves (cast to `T`), honouring each
    /// tensor's `requires_grad` flag.
    pub fn register<T: Real>(&self, g: &mut Graph<T>) -> DecoderVars {
        DecoderVars {
            arch: self.arch.clone(),
            layers: self.layers.iter().map(|(_, t)| g.leaf(&t.cast::<T>())).collect(),
        }
    }

    /// SHA-256 of the serialized weight file, hex encoded.
    pub fn sha256_hex(&self) -> String {
        crate::format::sha256_hex(&crate::format::encode_weights(self))
    }
}

/// Graph handles of one decoder's registered weights.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    arch: Arch,
    layers: Vec<Var>,
}

impl DecoderVars {
    pub fn from_vars(arch: Arch, layers: Vec<Var>) -> Self {
        Self { arch, layers }
    }

    pub fn vars(&self) -> &[Var] {
        &self.layers
    }

    /// Runs the decoder on a registered seed of shape `seed_channels × h × w`.
    /// Each stage's upsample and convolution run as one fused op.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, seed: Var) -> Result<Var, TensorError> {
        let s = g.shape(seed);
        if s.len() != 3 || s[0] != self.arch.seed_channels {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: vec![self.arch.seed_channels],
                rhs: s.to_vec(),
            });
        }
        let mut x = seed;
        for stage in 0..self.arch.n_stages() {
            x = g.upsample_conv2d(x, self.layers[2 * stage], Some(self.layers[2 * stage + 1]), Padding::Reflect)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        let n = self.layers.len();
        x = g.conv2d(x, self.layers[n - 2], Some(self.layers[n - 1]), Padding::Reflect)?;
        Ok(g.sigmoid(x))
    }
}

/// Learnable generator input.
#[derive(Clone, Debug, PartialEq)]
pub struct Seed {
    pub tensor: Tensor,
    pub rng_seed: u64,
}

impl Seed {
    /// Draws an i.i.d. N(0, 1) seed for an output of `height × width` (both
    /// divisible by `arch.scale()`), continuing the caller's RNG stream.
    pub fn sample(arch: &Arch, height: usize, width: usize, rng: &mut ChaCha8Rng, rng_seed: u64) -> Result<Self, Error> {
        let scale = arch.scale();
        if height % scale != 0 || width % scale != 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "map {height}x{width} is not a positive multiple of {scale}"
            )));
        }
        let shape = [arch.seed_channels, height / scale, width / scale];
        let tensor = Tensor::from_fn(&shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .with_requires_grad(true);
        Ok(Self { tensor, rng_seed })
    }

    /// Convenience for a fresh stream seeded by `rng_seed`.
    pub fn from_rng_seed(arch: &Arch, height: usize, width: usize, rng_seed: u64) -> Result<Self, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Self::sample(arch, height, width, &mut rng, rng_seed)
    }
}

/// Decodes `seed` through `weights` on a fresh graph. With `freeze`, the
/// weights are registered as non-learnable regardless of their flags.
pub fn decode(seed: &Seed, weights: &DecoderWeights, freeze: bool) -> Result<Tensor, Error> {
    let mut g = Graph::<f32>::new();
    let z = g.leaf(&seed.tensor);
    let vars = if freeze {
        let mut frozen = weights.clone();
        frozen.set_learnable(false);
        frozen.register(&mut g)
    } else {
        weights.register(&mut g)
    };
    let out = vars.decode(&mut g, z)?;
    Ok(g.tensor(out))
}
