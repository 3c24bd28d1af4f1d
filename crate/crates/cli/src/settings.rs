//! `key = value` config files and the flag-over-file merge.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Args;
use hemf::{CommunityUpdate, GlobalUpdate, HemfError, Hyperparameters, SymmetricPd};

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "latent_dim",
    "mode",
    "d_init",
    "k_init",
    "sigma2",
    "alpha",
    "beta",
    "lambda0",
    "iota0",
    "w0_scale",
    "spawn_threshold",
    "merge_tau",
    "lr_alpha",
    "lr_iota",
    "chunk_size",
    "max_sweeps",
    "tolerance",
    "propagation",
    "empirical_every",
];

/// Values from a config file. Blank lines and `#` comments are skipped; keys
/// may use `-` or `_`.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HemfError::Parse { line: k + 1, msg: "expected key = value".into() }.into());
            };
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(HemfError::Parse { line: k + 1, msg: format!("unknown key {key:?}") }.into());
            }
            values.insert(key, value.trim().to_owned());
        }
        Ok(Settings { values })
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => match v.parse() {
                Ok(x) => Ok(Some(x)),
                Err(e) => Err(HemfError::InvalidConfig(format!("{key} = {v}: {e}")).into()),
            },
        }
    }

    /// The flag if given, else the file value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }
}

/// `--mode`: how communities and streaming globals are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Literal community recurrences and the delta recurrences when streaming.
    Printed,
    /// Literal community recurrences, streaming globals rebuilt from statistics.
    Recomputed,
    /// Conjugate community updates, streaming globals rebuilt from statistics.
    Conjugate,
}

impl Mode {
    pub fn community_update(self) -> CommunityUpdate {
        match self {
            Mode::Printed | Mode::Recomputed => CommunityUpdate::Printed,
            Mode::Conjugate => CommunityUpdate::Conjugate,
        }
    }

    pub fn global_update(self) -> GlobalUpdate {
        match self {
            Mode::Printed => GlobalUpdate::Printed,
            Mode::Recomputed | Mode::Conjugate => GlobalUpdate::Recomputed,
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "printed" => Ok(Mode::Printed),
            "recomputed" => Ok(Mode::Recomputed),
            "conjugate" => Ok(Mode::Conjugate),
            other => Err(format!("unknown mode {other:?} (printed, recomputed, conjugate)")),
        }
    }
}

/// Model flags shared by every command that builds a model.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Latent dimension L [default: 5]
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// printed | recomputed | conjugate [default: recomputed]
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Initial user components [default: 1]
    #[arg(long)]
    pub d_init: Option<usize>,
    /// Initial item components [default: 1]
    #[arg(long)]
    pub k_init: Option<usize>,
    /// Observation noise variance [default: 1]
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// User-side concentration [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Item-side concentration [default: 1]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Base-mean scale [default: 1]
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Inverse-Wishart degrees of freedom [default: L + 2]
    #[arg(long)]
    pub iota0: Option<f64>,
    /// W0 = w0_scale * I [default: 1]
    #[arg(long)]
    pub w0_scale: Option<f64>,
    #[arg(long)]
    pub spawn_threshold: Option<f64>,
    #[arg(long)]
    pub merge_tau: Option<f64>,
    #[arg(long)]
    pub lr_alpha: Option<f64>,
    #[arg(long)]
    pub lr_iota: Option<f64>,
}

/// Everything needed to build a model, after merging flags and file.
#[derive(Debug, Clone)]
pub struct ModelSetup {
    pub hyper: Hyperparameters,
    pub globals: GlobalUpdate,
    pub d_init: usize,
    pub k_init: usize,
}

impl ModelArgs {
    pub fn resolve(&self, settings: &Settings) -> Result<ModelSetup> {
        let latent_dim = settings.pick(self.latent_dim, "latent_dim", 5)?;
        if latent_dim == 0 {
            bail!(HemfError::InvalidConfig("latent_dim must be >= 1".into()));
        }
        let mode = settings.pick(self.mode, "mode", Mode::Recomputed)?;
        let mut hyper = Hyperparameters::new(latent_dim);
        hyper.community_update = mode.community_update();
        hyper.sigma2 = settings.pick(self.sigma2, "sigma2", hyper.sigma2)?;
        hyper.alpha = settings.pick(self.alpha, "alpha", hyper.alpha)?;
        hyper.beta = settings.pick(self.beta, "beta", hyper.beta)?;
        hyper.lambda0 = settings.pick(self.lambda0, "lambda0", hyper.lambda0)?;
        hyper.iota0 = settings.pick(self.iota0, "iota0", hyper.iota0)?;
        hyper.spawn_threshold = settings.pick(self.spawn_threshold, "spawn_threshold", hyper.spawn_threshold)?;
        hyper.merge_tau = settings.pick(self.merge_tau, "merge_tau", hyper.merge_tau)?;
        hyper.lr_alpha = settings.pick(self.lr_alpha, "lr_alpha", hyper.lr_alpha)?;
        hyper.lr_iota = settings.pick(self.lr_iota, "lr_iota", hyper.lr_iota)?;
        let w0_scale = settings.pick(self.w0_scale, "w0_scale", 1.0)?;
        hyper.w0 = SymmetricPd::scaled_identity(latent_dim, w0_scale)?;
        hyper.validate()?;
        Ok(ModelSetup {
            hyper,
            globals: mode.global_update(),
            d_init: settings.pick(self.d_init, "d_init", 1)?,
            k_init: settings.pick(self.k_init, "k_init", 1)?,
        })
    }
}
