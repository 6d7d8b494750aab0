use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gd_update, Adam, InitSetting, OptimizerKind, Param};
use crate::autodiff::Graph;
use crate::config::EnhanceConfig;
use crate::decoder::{DecoderWeights, Seed};
use crate::error::Error;
use crate::format;
use crate::image_io::{crop, pad_to_multiple};
use crate::losses::{all_losses, illumination_target, LossValues};
use crate::retinex::{GammaParam, RetinexState};
use crate::tensor::Tensor;

/// Maps and losses captured at one iteration, before that iteration's update.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iteration: usize,
    pub reflectance: Tensor,
    pub illumination: Tensor,
    pub enhanced: Tensor,
    pub losses: LossValues,
}

/// Everything produced by one enhancement run. Maps are cropped to the input size.
#[derive(Clone, Debug)]
pub struct EnhanceResult {
    pub enhanced: Tensor,
    pub reflectance: Tensor,
    pub illumination: Tensor,
    pub gamma: f32,
    pub trace: Vec<LossValues>,
    pub iter_seconds: Vec<f64>,
    /// SHA-256 of the serialized (reflectance, illumination) weights before the run.
    pub hashes_before: [String; 2],
    pub hashes_after: [String; 2],
    pub weights_r: DecoderWeights,
    pub weights_l: DecoderWeights,
    pub seed_r: Seed,
    pub seed_l: Seed,
}

impl EnhanceResult {
    pub fn mean_iter_seconds(&self) -> f64 {
        if self.iter_seconds.is_empty() {
            0.0
        } else {
            self.iter_seconds.iter().sum::<f64>() / self.iter_seconds.len() as f64
        }
    }
}

/// Derives an independent stream seed from the run seed and a tag.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loads or initializes the (reflectance, illumination) decoders for `cfg.init`.
pub fn build_decoders(cfg: &EnhanceConfig) -> Result<(DecoderWeights, DecoderWeights), Error> {
    let load = |p: &Option<std::path::PathBuf>, what: &str| match p {
        Some(p) => format::load_weights(p),
        None => Err(Error::Config(format!("init {} needs {what}", cfg.init))),
    };
    let random = |arch: &crate::decoder::Arch, tag| DecoderWeights::init_random(arch, derive_seed(cfg.seed, tag));
    let (wr, wl) = match cfg.init {
        InitSetting::RandomAll => {
            let arch = cfg.arch();
            (random(&arch, 1)?, random(&arch.with_out_channels(1), 2)?)
        }
        InitSetting::PretrainedReflectance => {
            let wr = load(&cfg.weights_r, "weights_r")?;
            let wl = random(&wr.arch().with_out_channels(1), 2)?;
            (wr, wl)
        }
        InitSetting::PretrainedBoth => (load(&cfg.weights_r, "weights_r")?, load(&cfg.weights_l, "weights_l")?),
    };
    if wr.arch().out_channels != 3 || wl.arch().out_channels != 1 {
        return Err(Error::Config(format!(
            "reflectance decoder must output 3 channels and illumination 1, got {} and {}",
            wr.arch().out_channels,
            wl.arch().out_channels
        )));
    }
    Ok((wr, wl))
}

/// Runs the optimization without progress callbacks.
pub fn run(i_low: &Tensor, weights_r: &DecoderWeights, weights_l: &DecoderWeights, cfg: &EnhanceConfig) -> Result<EnhanceResult, Error> {
    run_with(i_low, weights_r, weights_l, cfg, |_, _, _| {}, |_| Ok(()))
}

/// Optimizes the mode's learnable set for `cfg.iterations` steps on `i_low`
/// (`3 × H × W`). `on_iter` sees every iteration's losses and the gamma used
/// in that forward pass; `on_snapshot`
/// is called every `cfg.snapshot_every` iterations.
pub fn run_with(
    i_low: &Tensor,
    weights_r: &DecoderWeights,
    weights_l: &DecoderWeights,
    cfg: &EnhanceConfig,
    mut on_iter: impl FnMut(usize, &LossValues, f32),
    mut on_snapshot: impl FnMut(&Snapshot) -> Result<(), Error>,
) -> Result<EnhanceResult, Error> {
    cfg.loss.validate()?;
    let (c, h, w) = i_low.chw()?;
    if c != 3 {
        return Err(Error::Invalid(format!("input must have 3 channels, got {c}")));
    }
    let scale = weights_r.arch().scale();
    if weights_l.arch().scale() != scale {
        return Err(Error::Config(format!(
            "decoders disagree on upsampling: {} vs {}",
            weights_r.arch(),
            weights_l.arch()
        )));
    }
    if h < scale || w < scale {
        return Err(Error::TooSmall { height: h, width: w, min: scale, stages: weights_r.arch().n_stages() });
    }
    let padded = pad_to_multiple(i_low, scale)?;
    let (_, ph, pw) = padded.chw()?;
    let target = illumination_target(&padded)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seed_r = Seed::sample(weights_r.arch(), ph, pw, &mut rng, cfg.seed)?;
    let mut seed_l = Seed::sample(weights_l.arch(), ph, pw, &mut rng, cfg.seed)?;
    seed_r.tensor.set_requires_grad(cfg.mode.seeds_learnable());
    seed_l.tensor.set_requires_grad(cfg.mode.seeds_learnable());
    let mut wr = weights_r.clone();
    let mut wl = weights_l.clone();
    wr.set_learnable(cfg.mode.weights_learnable());
    wl.set_learnable(cfg.mode.weights_learnable());
    let mut gamma = GammaParam::new(cfg.gamma_init as f32)?;
    let hashes_before = [wr.sha256_hex(), wl.sha256_hex()];

    let names_r: Vec<String> = wr.layers().iter().map(|(n, _)| format!("weights_r.{n}")).collect();
    let names_l: Vec<String> = wl.layers().iter().map(|(n, _)| format!("weights_l.{n}")).collect();
    let mut adam = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut iter_seconds = Vec::with_capacity(cfg.iterations);

    let mut g = Graph::<f32>::new();
    for t in 0..cfg.iterations {
        let start = Instant::now();
        g.reset();
        let i_var = g.constant(padded.clone());
        let t_var = g.constant(target.clone());
        let zr = g.leaf(&seed_r.tensor);
        let zl = g.leaf(&seed_l.tensor);
        let vr = wr.register(&mut g);
        let vl = wl.register(&mut g);
        let gv = g.leaf(&gamma.tensor);
        let r = vr.decode(&mut g, zr)?;
        let l = vl.decode(&mut g, zl)?;
        let lv = all_losses(&mut g, i_var, t_var, r, l, gv, &cfg.loss)?;
        let values = LossValues::read(&g, &lv);
        if !values.is_finite() {
            return Err(Error::NonFinite { what: format!("loss ({values:?})"), iteration: t });
        }
        on_iter(t, &values, gamma.value());
        if cfg.snapshot_every.is_some_and(|k| t % k == 0) {
            let state = RetinexState::new(g.tensor(r), g.tensor(l), gamma.clone())?;
            let snap = Snapshot {
                iteration: t,
                enhanced: crop(&state.enhance_compose()?, h, w)?,
                reflectance: crop(&state.reflectance, h, w)?,
                illumination: crop(&state.illumination, h, w)?,
                losses: values.clone(),
            };
            on_snapshot(&snap)?;
        }
        trace.push(values);

        let grads = g.backward(lv.total)?;
        seed_r.tensor.zero_grad();
        seed_l.tensor.zero_grad();
        gamma.tensor.zero_grad();
        grads.accumulate_into(zr, &mut seed_r.tensor)?;
        grads.accumulate_into(zl, &mut seed_l.tensor)?;
        grads.accumulate_into(gv, &mut gamma.tensor)?;
        for (tensors, vars) in [(&mut wr, &vr), (&mut wl, &vl)] {
            for (tensor, &var) in tensors.tensors_mut().zip(vars.vars()) {
                tensor.zero_grad();
                grads.accumulate_into(var, tensor)?;
            }
        }

        let mut params = Vec::new();
        if cfg.mode.seeds_learnable() {
            params.push(Param::new("seed_r", &mut seed_r.tensor));
            params.push(Param::new("seed_l", &mut seed_l.tensor));
        }
        if cfg.mode.weights_learnable() {
            for (name, (_, tensor)) in names_r.iter().zip(wr.layers_mut()) {
                params.push(Param::new(name, tensor));
            }
            for (name, (_, tensor)) in names_l.iter().zip(wl.layers_mut()) {
                params.push(Param::new(name, tensor));
            }
        }
        params.push(Param::new("gamma", &mut gamma.tensor));
        match cfg.optimizer {
            OptimizerKind::Adam => adam.step(&mut params, t)?,
            OptimizerKind::Gd => gd_update(&mut params, cfg.lr as f32, t)?,
        }
        gamma.clamp();
        iter_seconds.push(start.elapsed().as_secs_f64());
    }

    g.reset();
    let zr = g.constant(seed_r.tensor.clone());
    let zl = g.constant(seed_l.tensor.clone());
    let mut frozen_r = wr.clone();
    let mut frozen_l = wl.clone();
    frozen_r.set_learnable(false);
    frozen_l.set_learnable(false);
    let r = frozen_r.register(&mut g).decode(&mut g, zr)?;
    let l = frozen_l.register(&mut g).decode(&mut g, zl)?;
    let state = RetinexState::new(g.tensor(r), g.tensor(l), gamma.clone())?;
    let enhanced = crop(&state.enhance_compose()?, h, w)?;

    let hashes_after = [wr.sha256_hex(), wl.sha256_hex()];
    for tensor in wr.tensors_mut().chain(wl.tensors_mut()) {
        tensor.set_requires_grad(false);
    }
    Ok(EnhanceResult {
        enhanced,
        reflectance: crop(&state.reflectance, h, w)?,
        illumination: crop(&state.illumination, h, w)?,
        gamma: gamma.value(),
        trace,
        iter_seconds,
        hashes_before,
        hashes_after,
        weights_r: wr,
        weights_l: wl,
        seed_r,
        seed_l,
    })
}
