//! Enhancement run configuration and its flat `key = value` text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::decoder::Arch;
use crate::error::Error;
use crate::losses::LossWeights;
use crate::optimizer::{InitSetting, OptimizationMode, OptimizerKind};
use crate::retinex::{GAMMA_INIT, GAMMA_MAX, GAMMA_MIN};

/// Iteration/τ presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Paired evaluation: 2500 iterations, τ = 0.6.
    Paired,
    /// No-reference evaluation: 5000 iterations, τ = 0.2.
    NoReference,
    /// Fast: 900 iterations, τ = 0.6.
    Fast,
}

impl Preset {
    pub fn iterations(self) -> usize {
        match self {
            Preset::Paired => 2500,
            Preset::NoReference => 5000,
            Preset::Fast => 900,
        }
    }

    pub fn tau(self) -> f64 {
        match self {
            Preset::Paired | Preset::Fast => LossWeights::TAU_PAIRED,
            Preset::NoReference => LossWeights::TAU_NO_REFERENCE,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "paired" => Ok(Preset::Paired),
            "noref" | "no-reference" => Ok(Preset::NoReference),
            "fast" => Ok(Preset::Fast),
            other => Err(Error::Config(format!("unknown preset {other:?} (paired, noref, fast)"))),
        }
    }
}

/// Every knob of one enhancement run.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceConfig {
    pub iterations: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub mode: OptimizationMode,
    pub init: InitSetting,
    pub weights_r: Option<PathBuf>,
    pub weights_l: Option<PathBuf>,
    pub loss: LossWeights,
    pub gamma_init: f64,
    pub seed: u64,
    pub snapshot_every: Option<usize>,
    pub seed_channels: usize,
    pub stage_channels: Vec<usize>,
    pub output: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        let arch = Arch::reflectance();
        Self {
            iterations: Preset::Paired.iterations(),
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            mode: OptimizationMode::SeedOnly,
            init: InitSetting::PretrainedReflectance,
            weights_r: None,
            weights_l: None,
            loss: LossWeights::paired(),
            gamma_init: GAMMA_INIT as f64,
            seed: 0,
            snapshot_every: None,
            seed_channels: arch.seed_channels,
            stage_channels: arch.stage_channels,
            output: None,
            run_dir: None,
        }
    }
}

const KEYS: &[&str] = &[
    "iterations",
    "lr",
    "optimizer",
    "mode",
    "init",
    "weights_r",
    "weights_l",
    "lambda_re",
    "lambda_e",
    "lambda_s",
    "lambda_i",
    "tau",
    "exposure",
    "gamma_init",
    "seed",
    "snapshot_every",
    "seed_channels",
    "stage_channels",
    "output",
    "run_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl EnhanceConfig {
    pub fn with_preset(preset: Preset) -> Self {
        let mut c = Self::default();
        c.apply_preset(preset);
        c
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        self.iterations = preset.iterations();
        self.loss.tau = preset.tau();
    }

    /// Reflectance decoder architecture used for random initialization.
    pub fn arch(&self) -> Arch {
        Arch { seed_channels: self.seed_channels, stage_channels: self.stage_channels.clone(), out_channels: 3 }
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let value = value.trim();
        match key {
            "preset" => self.apply_preset(value.parse()?),
            "iterations" => self.iterations = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "init" => self.init = value.parse()?,
            "weights_r" => self.weights_r = opt_path(value),
            "weights_l" => self.weights_l = opt_path(value),
            "lambda_re" => self.loss.lambda_re = parse(key, value)?,
            "lambda_e" => self.loss.lambda_e = parse(key, value)?,
            "lambda_s" => self.loss.lambda_s = parse(key, value)?,
            "lambda_i" => self.loss.lambda_i = parse(key, value)?,
            "tau" => self.loss.tau = parse(key, value)?,
            "exposure" => self.loss.exposure = parse(key, value)?,
            "gamma_init" => self.gamma_init = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "snapshot_every" => {
                self.snapshot_every = if value.is_empty() { None } else { Some(parse(key, value)?) }
            }
            "seed_channels" => self.seed_channels = parse(key, value)?,
            "stage_channels" => {
                self.stage_channels = value
                    .split(',')
                    .map(|s| parse::<usize>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "output" => self.output = opt_path(value),
            "run_dir" => self.run_dir = opt_path(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines into a map. Blank lines and lines starting
    /// with `#` are skipped; a repeated key is an error.
    pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, Error> {
        let mut out = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", no + 1)));
            };
            let k = k.trim().to_string();
            if out.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
        }
        Ok(out)
    }

    /// Applies a config file on top of `self`. A `preset` key is applied
    /// before the other keys.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Error> {
        let mut kv = Self::parse_kv(text)?;
        if let Some(p) = kv.remove("preset") {
            self.set("preset", &p)?;
        }
        for (k, v) in &kv {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Text form that [`EnhanceConfig::apply_text`] reads back to an identical config.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        for key in KEYS {
            let v = match *key {
                "iterations" => self.iterations.to_string(),
                "lr" => self.lr.to_string(),
                "optimizer" => self.optimizer.as_str().to_string(),
                "mode" => self.mode.to_string(),
                "init" => self.init.to_string(),
                "weights_r" => path(&self.weights_r),
                "weights_l" => path(&self.weights_l),
                "lambda_re" => self.loss.lambda_re.to_string(),
                "lambda_e" => self.loss.lambda_e.to_string(),
                "lambda_s" => self.loss.lambda_s.to_string(),
                "lambda_i" => self.loss.lambda_i.to_string(),
                "tau" => self.loss.tau.to_string(),
                "exposure" => self.loss.exposure.to_string(),
                "gamma_init" => self.gamma_init.to_string(),
                "seed" => self.seed.to_string(),
                "snapshot_every" => self.snapshot_every.map(|v| v.to_string()).unwrap_or_default(),
                "seed_channels" => self.seed_channels.to_string(),
                "stage_channels" => {
                    self.stage_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
                }
                "output" => path(&self.output),
                "run_dir" => path(&self.run_dir),
                _ => unreachable!(),
            };
            if v.is_empty() {
                let _ = writeln!(s, "{key} =");
            } else {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        s
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.loss.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        let g = self.gamma_init;
        if !(g.is_finite() && g >= GAMMA_MIN as f64 && g <= GAMMA_MAX as f64) {
            return Err(Error::Config(format!("gamma_init must lie in [{GAMMA_MIN}, {GAMMA_MAX}], got {g}")));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::Config("snapshot_every must be positive".into()));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Config("stage_channels must list at least one stage".into()));
        }
        self.arch().validate().map_err(|e| Error::Config(e.to_string()))?;
        match self.init {
            InitSetting::PretrainedReflectance if self.weights_r.is_none() => Err(Error::Config(
                "init pretrained-reflectance needs weights_r (or use init random-all)".into(),
            )),
            InitSetting::PretrainedBoth if self.weights_r.is_none() || self.weights_l.is_none() => {
                Err(Error::Config("init pretrained-both needs weights_r and weights_l".into()))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = EnhanceConfig::default();
        assert_eq!(c.lr, 1e-2);
        assert_eq!(c.iterations, 2500);
        assert_eq!(
            (c.loss.lambda_re, c.loss.lambda_e, c.loss.lambda_s, c.loss.lambda_i),
            (12.0, 0.05, 0.03, 0.01)
        );
        assert_eq!(c.loss.tau, 0.6);
        assert_eq!(c.loss.exposure, 0.6);
        assert_eq!(c.gamma_init, 0.5);
        assert_eq!(c.mode, OptimizationMode::SeedOnly);
        let noref = EnhanceConfig::with_preset(Preset::NoReference);
        assert_eq!((noref.iterations, noref.loss.tau), (5000, 0.2));
        assert_eq!(EnhanceConfig::with_preset(Preset::Fast).iterations, 900);
    }

    #[test]
    fn text_round_trip() {
        let mut c = EnhanceConfig::default();
        c.lr = 0.003;
        c.loss.tau = 0.2;
        c.weights_r = Some("w/r.rswt".into());
        c.snapshot_every = Some(50);
        c.stage_channels = vec![8, 4];
        c.mode = OptimizationMode::Joint;
        let text = c.to_text();
        let mut back = EnhanceConfig::with_preset(Preset::Fast);
        back.apply_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn comments_and_preset_order() {
        let mut c = EnhanceConfig::default();
        c.apply_text("# comment\n\ntau = 0.3\npreset = noref\n").unwrap();
        assert_eq!(c.iterations, 5000);
        assert_eq!(c.loss.tau, 0.3);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = EnhanceConfig::default();
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("lr").is_err());
        assert!(c.apply_text("lr = 1\nlr = 2").is_err());
        assert!(c.apply_text("iterations = -3").is_err());
        let mut c = EnhanceConfig::default();
        c.init = InitSetting::RandomAll;
        assert!(c.validate().is_ok());
        c.loss.lambda_s = -0.1;
        assert!(c.validate().is_err());
        let c = EnhanceConfig::default();
        assert!(c.validate().is_err(), "pretrained init without weights");
    }
}
