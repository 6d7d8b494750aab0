//! Desk-scale decoder pretraining by generative latent optimization: shared
//! decoder weights and one learnable seed per corpus image, fitted jointly to
//! reconstruct the corpus.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::decoder::{decode, Arch, DecoderWeights, Seed};
use crate::error::{Error, FormatError};
use crate::format;
use crate::image_io::load_square;
use crate::metrics::psnr;
use crate::optimizer::{Adam, Param};
use crate::tensor::Tensor;

/// Training images, all `3 × resolution × resolution`.
#[derive(Clone, Debug)]
pub struct Corpus {
    items: Vec<(PathBuf, Tensor)>,
    resolution: usize,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

impl Corpus {
    pub fn new(items: Vec<(PathBuf, Tensor)>) -> Result<Self, Error> {
        let Some((_, first)) = items.first() else {
            return Err(Error::Invalid("corpus is empty".into()));
        };
        let (_, resolution, _) = first.chw()?;
        for (path, t) in &items {
            if t.shape() != [3, resolution, resolution] {
                return Err(Error::Invalid(format!(
                    "{}: shape {:?} does not match corpus resolution {resolution}",
                    path.display(),
                    t.shape()
                )));
            }
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!("{}: values outside [0, 1]", path.display())));
            }
        }
        Ok(Self { items, resolution })
    }

    /// Loads every PNG/JPEG in `dir` (sorted by name), center-cropped and
    /// resized to `resolution × resolution`.
    pub fn load_dir(dir: &Path, resolution: usize) -> Result<Self, Error> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() && is_image(&path) {
                paths.push(path);
            }
        }
        paths.sort();
        let items = paths
            .into_iter()
            .map(|p| load_square(&p, resolution).map(|t| (p, t)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn items(&self) -> &[(PathBuf, Tensor)] {
        &self.items
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    /// Adam learning rate for the shared weights.
    pub lr: f64,
    /// Adam learning rate for the per-image seeds.
    pub seed_lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub resolution: usize,
    pub rng_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { lr: 3e-4, seed_lr: 1e-2, epochs: 100, batch: 4, resolution: 128, rng_seed: 0 }
    }
}

/// Outcome of [`pretrain_with`].
#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub weights: DecoderWeights,
    /// Mean per-image MSE over each epoch, measured before that epoch's updates.
    pub epoch_losses: Vec<f64>,
    /// Final reconstruction PSNR per image.
    pub per_image_psnr: Vec<(PathBuf, f64)>,
}

pub fn pretrain(corpus: &Corpus, arch: &Arch, cfg: &PretrainConfig) -> Result<DecoderWeights, Error> {
    Ok(pretrain_with(corpus, arch, cfg, |_, _| {})?.weights)
}

/// Runs GLO training; `on_epoch(epoch, mean_loss)` is called after every epoch.
pub fn pretrain_with(
    corpus: &Corpus,
    arch: &Arch,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PretrainReport, Error> {
    arch.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("corpus is empty".into()));
    }
    if cfg.resolution != corpus.resolution() {
        return Err(Error::Invalid(format!(
            "corpus resolution {} does not match configured {}",
            corpus.resolution(),
            cfg.resolution
        )));
    }
    if cfg.resolution % arch.scale() != 0 || cfg.resolution < arch.scale() {
        return Err(Error::Invalid(format!(
            "resolution {} is not a positive multiple of {}",
            cfg.resolution,
            arch.scale()
        )));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0 && cfg.seed_lr > 0.0) {
        return Err(Error::Config("batch and learning rates must be positive".into()));
    }
    let out_c = arch.out_channels;
    let targets: Vec<Tensor> = corpus
        .items()
        .iter()
        .map(|(_, t)| if out_c == 3 { Ok(t.clone()) } else { crate::autodiff::channel_max(t) })
        .collect::<Result<_, _>>()?;

    let mut weights = DecoderWeights::init_random(arch, cfg.rng_seed)?;
    weights.set_learnable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5EED_5EED_5EED_5EED);
    let mut seeds: Vec<Seed> = (0..corpus.len())
        .map(|_| Seed::sample(arch, cfg.resolution, cfg.resolution, &mut rng, cfg.rng_seed))
        .collect::<Result<_, _>>()?;
    let names: Vec<String> = weights.layers().iter().map(|(n, _)| n.clone()).collect();
    let mut adam_w = Adam::new(cfg.lr);
    let mut adam_z: Vec<Adam> = (0..corpus.len()).map(|_| Adam::new(cfg.seed_lr)).collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut g = Graph::<f32>::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            g.reset();
            let vars = weights.register(&mut g);
            let mut seed_vars = Vec::with_capacity(batch.len());
            let mut total = None;
            for &i in batch {
                let z = g.leaf(&seeds[i].tensor);
                let out = vars.decode(&mut g, z)?;
                let target = g.constant(targets[i].clone());
                let d = g.sub(out, target)?;
                let sq = g.mul(d, d)?;
                let mse = g.mean(sq);
                epoch_sum += g.item(mse) as f64;
                total = Some(match total {
                    Some(t) => g.add(t, mse)?,
                    None => mse,
                });
                seed_vars.push(z);
            }
            let total = total.expect("batch is non-empty");
            if !g.item(total).is_finite() {
                return Err(Error::NonFinite { what: "pretraining loss".into(), iteration: step });
            }
            let grads = g.backward(total)?;
            for (tensor, &var) in weights.tensors_mut().zip(vars.vars()) {
                tensor.zero_grad();
                grads.accumulate_into(var, tensor)?;
            }
            let mut params: Vec<Param> =
                names.iter().zip(weights.layers_mut()).map(|(n, (_, t))| Param::new(n, t)).collect();
            adam_w.step(&mut params, step)?;
            for (&i, &z) in batch.iter().zip(&seed_vars) {
                let seed = &mut seeds[i].tensor;
                seed.zero_grad();
                grads.accumulate_into(z, seed)?;
                adam_z[i].step(&mut [Param::new("seed", seed)], step)?;
            }
            step += 1;
        }
        let mean = epoch_sum / corpus.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }

    weights.set_learnable(false);
    let per_image_psnr = corpus
        .items()
        .iter()
        .zip(&seeds)
        .zip(&targets)
        .map(|(((path, _), seed), target)| Ok((path.clone(), psnr(&decode(seed, &weights, true)?, target)?)))
        .collect::<Result<_, Error>>()?;
    Ok(PretrainReport { weights, epoch_losses, per_image_psnr })
}

/// Loads externally produced weights, requiring `expected` architecture when given.
pub fn import_weights(path: &Path, expected: Option<&Arch>) -> Result<DecoderWeights, Error> {
    let w = format::load_weights(path)?;
    if let Some(arch) = expected {
        if w.arch() != arch {
            return Err(FormatError::ArchMismatch { expected: arch.to_string(), found: w.arch().to_string() }.into());
        }
    }
    Ok(w)
}
