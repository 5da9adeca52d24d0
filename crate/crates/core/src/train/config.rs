use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{DiscriminatorConfig, Fusion, GeneratorConfig};
use crate::objectives::LossWeights;
use crate::volume::{Normalization, Preprocess};

/// Training configuration, read from flat `key = value` text. `#` starts a
/// comment; unknown or repeated keys are errors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub volume_size: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub dense_layers_per_block: usize,
    pub fusion: Fusion,
    pub disc_layers: usize,
    pub disc_base_channels: usize,
    pub cond_channels: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub lambda_adv: f64,
    pub lambda_vox: f64,
    pub lambda_proj: f64,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    pub spacing_mm: f32,
    pub normalization: Normalization,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            volume_size: 32,
            levels: 3,
            base_channels: 16,
            growth: 8,
            dense_layers_per_block: 2,
            fusion: Fusion::Cvaa,
            disc_layers: 3,
            disc_base_channels: 32,
            cond_channels: 8,
            batch_size: 4,
            epochs: 30,
            lr: 2e-4,
            lr_disc: 2e-4,
            beta1: 0.5,
            beta2: 0.99,
            eps_adam: 1e-8,
            lambda_adv: 0.1,
            lambda_vox: 10.0,
            lambda_proj: 10.0,
            d_steps_per_g_step: 1,
            seed: 0,
            spacing_mm: 2.0,
            normalization: Normalization::FixedSpan,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value `{raw}` for {key}")))
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            match key {
                "volume_size" => c.volume_size = parse_value(key, raw)?,
                "levels" => c.levels = parse_value(key, raw)?,
                "base_channels" => c.base_channels = parse_value(key, raw)?,
                "growth" => c.growth = parse_value(key, raw)?,
                "dense_layers_per_block" => c.dense_layers_per_block = parse_value(key, raw)?,
                "fusion" => c.fusion = raw.parse()?,
                "disc_layers" => c.disc_layers = parse_value(key, raw)?,
                "disc_base_channels" => c.disc_base_channels = parse_value(key, raw)?,
                "cond_channels" => c.cond_channels = parse_value(key, raw)?,
                "batch_size" => c.batch_size = parse_value(key, raw)?,
                "epochs" => c.epochs = parse_value(key, raw)?,
                "lr" => c.lr = parse_value(key, raw)?,
                "lr_disc" => c.lr_disc = parse_value(key, raw)?,
                "beta1" => c.beta1 = parse_value(key, raw)?,
                "beta2" => c.beta2 = parse_value(key, raw)?,
                "eps_adam" => c.eps_adam = parse_value(key, raw)?,
                "lambda_adv" => c.lambda_adv = parse_value(key, raw)?,
                "lambda_vox" => c.lambda_vox = parse_value(key, raw)?,
                "lambda_proj" => c.lambda_proj = parse_value(key, raw)?,
                "d_steps_per_g_step" => c.d_steps_per_g_step = parse_value(key, raw)?,
                "seed" => c.seed = parse_value(key, raw)?,
                "spacing_mm" => c.spacing_mm = parse_value(key, raw)?,
                "normalization" => c.normalization = raw.parse()?,
                "data_dir" => c.data_dir = PathBuf::from(raw),
                "out_dir" => c.out_dir = PathBuf::from(raw),
                other => return Err(Error::Config(format!("line {}: unknown key {other}", lineno + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` returns an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("volume_size", &self.volume_size);
        kv("levels", &self.levels);
        kv("base_channels", &self.base_channels);
        kv("growth", &self.growth);
        kv("dense_layers_per_block", &self.dense_layers_per_block);
        kv("fusion", &self.fusion);
        kv("disc_layers", &self.disc_layers);
        kv("disc_base_channels", &self.disc_base_channels);
        kv("cond_channels", &self.cond_channels);
        kv("batch_size", &self.batch_size);
        kv("epochs", &self.epochs);
        kv("lr", &self.lr);
        kv("lr_disc", &self.lr_disc);
        kv("beta1", &self.beta1);
        kv("beta2", &self.beta2);
        kv("eps_adam", &self.eps_adam);
        kv("lambda_adv", &self.lambda_adv);
        kv("lambda_vox", &self.lambda_vox);
        kv("lambda_proj", &self.lambda_proj);
        kv("d_steps_per_g_step", &self.d_steps_per_g_step);
        kv("seed", &self.seed);
        kv("spacing_mm", &self.spacing_mm);
        kv("normalization", &self.normalization);
        kv("data_dir", &self.data_dir.display());
        kv("out_dir", &self.out_dir.display());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.lr_disc >= 0.0 && self.lr_disc.is_finite()) {
            return Err(Error::Config(format!("lr_disc must be >= 0, got {}", self.lr_disc)));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::Config("eps_adam must be > 0".into()));
        }
        if self.batch_size == 0 || self.d_steps_per_g_step == 0 {
            return Err(Error::Config("batch_size and d_steps_per_g_step must be >= 1".into()));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::Config("spacing_mm must be > 0".into()));
        }
        self.generator().validate()?;
        self.discriminator().validate()?;
        self.weights().validate()
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            volume_size: self.volume_size,
            levels: self.levels,
            base_channels: self.base_channels,
            growth: self.growth,
            dense_layers_per_block: self.dense_layers_per_block,
            fusion: self.fusion,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            volume_size: self.volume_size,
            layers: self.disc_layers,
            base_channels: self.disc_base_channels,
            cond_channels: self.cond_channels,
            ..Default::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            adv: self.lambda_adv,
            vox: self.lambda_vox,
            proj: self.lambda_proj,
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            spacing_mm: self.spacing_mm,
            size: self.volume_size,
            normalization: self.normalization,
            ..Default::default()
        }
    }
}
