//! Flat `key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored. `--override` style pairs are
//! applied after the file, so they win. [`RunConfig::to_text`] is the single
//! canonical form: every key, fixed order, one per line.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::dataio::SplitProfile;
use crate::error::{Error, Result};
use crate::model::{HeadMode, ModelConfig};
use crate::patching::PatchConfig;
use crate::training::LossSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub profile: SplitProfile,
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub dim: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub heads: HeadMode,
    pub depth: usize,
    pub loss: LossSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Keep only the first `max_steps` time steps; 0 keeps everything.
    pub max_steps: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            profile: SplitProfile::Etth,
            lookback: 336,
            horizon: 96,
            patch_len: PatchConfig::DEFAULT_PATCH_LEN,
            stride: PatchConfig::DEFAULT_STRIDE,
            dim: PatchConfig::DEFAULT_DIM,
            kernel: ModelConfig::DEFAULT_KERNEL,
            dropout: ModelConfig::DEFAULT_DROPOUT,
            heads: HeadMode::Dual,
            depth: 1,
            loss: LossSpec::default(),
            lr: 1e-4,
            batch_size: 128,
            patience: 3,
            max_epochs: 100,
            max_steps: 0,
            seed: 2024,
            out_dir: PathBuf::from("runs"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "profile",
    "L",
    "T",
    "P",
    "S",
    "D",
    "K",
    "dropout",
    "heads",
    "depth",
    "loss",
    "beta",
    "lr",
    "batch_size",
    "patience",
    "max_epochs",
    "max_steps",
    "seed",
    "out_dir",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("`{value}` is not a valid number")))
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "profile" => self.profile = value.parse()?,
            "L" => self.lookback = num(key, value)?,
            "T" => self.horizon = num(key, value)?,
            "P" => self.patch_len = num(key, value)?,
            "S" => self.stride = num(key, value)?,
            "D" => self.dim = num(key, value)?,
            "K" => self.kernel = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "heads" => self.heads = value.parse()?,
            "depth" => self.depth = num(key, value)?,
            "loss" => self.loss.kind = value.parse()?,
            "beta" => self.loss.beta = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::config(key, format!("unknown key (known: {})", KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Applies a `key=value` pair.
    pub fn apply(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(pair.trim(), "expected key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                cfg.apply(line)?;
            }
        }
        Ok(cfg)
    }

    /// Reads a file, applies overrides in order, then validates parameters.
    pub fn load<S: AsRef<str>>(path: impl AsRef<Path>, overrides: &[S]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        for o in overrides {
            cfg.apply(o.as_ref())?;
        }
        cfg.validate_params()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let patch = PatchConfig {
            lookback: self.lookback,
            patch_len: self.patch_len,
            stride: self.stride,
            dim: self.dim,
        };
        let cfg = ModelConfig {
            patch,
            horizon: self.horizon,
            kernel: self.kernel,
            dropout: self.dropout,
            heads: self.heads,
            depth: self.depth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every constraint that does not touch the file system.
    pub fn validate_params(&self) -> Result<()> {
        self.model_config()?;
        self.profile.borders(usize::MAX / 2)?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr", format!("{} must be finite and >= 0", self.lr)));
        }
        if !(self.loss.beta.is_finite() && self.loss.beta > 0.0) {
            return Err(Error::config("beta", "smooth-L1 threshold must be > 0"));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.max_steps != 0 && self.max_steps < self.lookback + self.horizon {
            return Err(Error::config("max_steps", "must be 0 or at least L + T"));
        }
        Ok(())
    }

    /// [`validate_params`](Self::validate_params) plus a readable dataset.
    pub fn validate(&self) -> Result<()> {
        self.validate_params()?;
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::config("dataset", "no dataset path given"));
        }
        if !self.dataset.is_file() {
            return Err(Error::config(
                "dataset",
                format!("file not found: {}", self.dataset.display()),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dataset={}", self.dataset.display())?;
        writeln!(f, "profile={}", self.profile)?;
        writeln!(f, "L={}", self.lookback)?;
        writeln!(f, "T={}", self.horizon)?;
        writeln!(f, "P={}", self.patch_len)?;
        writeln!(f, "S={}", self.stride)?;
        writeln!(f, "D={}", self.dim)?;
        writeln!(f, "K={}", self.kernel)?;
        writeln!(f, "dropout={}", self.dropout)?;
        writeln!(f, "heads={}", self.heads)?;
        writeln!(f, "depth={}", self.depth)?;
        writeln!(f, "loss={}", self.loss.kind)?;
        writeln!(f, "beta={}", self.loss.beta)?;
        writeln!(f, "lr={}", self.lr)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "patience={}", self.patience)?;
        writeln!(f, "max_epochs={}", self.max_epochs)?;
        writeln!(f, "max_steps={}", self.max_steps)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "out_dir={}", self.out_dir.display())
    }
}
