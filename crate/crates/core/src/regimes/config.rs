use std::fmt::Write as _;
use std::path::PathBuf;

use super::Regime;
use crate::error::{Error, Result};

/// Keys accepted in a regime config file, in the order they are written.
pub const CONFIG_KEYS: [&str; 13] = [
    "regime",
    "q",
    "beta",
    "epochs_codec",
    "epochs_task",
    "lr_task",
    "lr_codec",
    "batch_size",
    "seed",
    "dataset_dir",
    "init_codec",
    "init_task",
    "out_dir",
];

/// One fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeConfig {
    pub regime: Regime,
    /// Quality of the pretrained codec the run starts from.
    pub q: u8,
    /// Weight of the rate term, in bits per pixel.
    pub beta: f64,
    pub epochs_codec: usize,
    pub epochs_task: usize,
    /// SGD learning rate of the detector.
    pub lr_task: f64,
    /// Adam learning rate of the codec groups.
    pub lr_codec: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset_dir: Option<PathBuf>,
    pub init_codec: Option<PathBuf>,
    pub init_task: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RegimeConfig {
    /// Defaults: six epochs for whichever side a regime trains; the joint
    /// regimes train the codec for five epochs and the detector for six.
    pub fn new(regime: Regime, q: u8, beta: f64) -> Self {
        let epochs_codec = match regime {
            Regime::JFt | Regime::JFtFd => 5,
            Regime::CFt => 6,
            Regime::Baseline | Regime::TFt => 0,
        };
        let epochs_task = match regime {
            Regime::TFt | Regime::JFt | Regime::JFtFd => 6,
            Regime::Baseline | Regime::CFt => 0,
        };
        Self {
            regime,
            q,
            beta,
            epochs_codec,
            epochs_task,
            lr_task: 0.01,
            lr_codec: 1e-4,
            batch_size: 2,
            seed: 0,
            dataset_dir: None,
            init_codec: None,
            init_task: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.q) {
            return Err(Error::Config(format!("q = {} outside 1..=4", self.q)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta = {} must be finite and non-negative", self.beta)));
        }
        if self.regime.trains_codec() && self.beta <= 0.0 {
            return Err(Error::Config(format!("{} trains the codec and needs beta > 0", self.regime)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (key, lr) in [("lr_task", self.lr_task), ("lr_codec", self.lr_codec)] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Config(format!("{key} = {lr} must be positive")));
            }
        }
        Ok(())
    }

    /// Parses flat `key = value` text. `#` starts a comment; `regime` is
    /// required, every other key falls back to [`RegimeConfig::new`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if pairs.iter().any(|(_, seen, _)| *seen == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            pairs.push((i + 1, k, v));
        }
        let regime = pairs
            .iter()
            .find(|(_, k, _)| *k == "regime")
            .ok_or_else(|| Error::Config("missing key \"regime\"".into()))?
            .2
            .parse::<Regime>()?;
        let mut cfg = Self::new(regime, 1, 0.0);
        for (line, key, value) in pairs {
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("line {line}: {key}: {e}"));
            match key {
                "regime" => {}
                "q" => cfg.q = value.parse().map_err(|e| bad(&e))?,
                "beta" => cfg.beta = value.parse().map_err(|e| bad(&e))?,
                "epochs_codec" => cfg.epochs_codec = value.parse().map_err(|e| bad(&e))?,
                "epochs_task" => cfg.epochs_task = value.parse().map_err(|e| bad(&e))?,
                "lr_task" => cfg.lr_task = value.parse().map_err(|e| bad(&e))?,
                "lr_codec" => cfg.lr_codec = value.parse().map_err(|e| bad(&e))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "dataset_dir" => cfg.dataset_dir = Some(value.into()),
                "init_codec" => cfg.init_codec = Some(value.into()),
                "init_task" => cfg.init_task = Some(value.into()),
                "out_dir" => cfg.out_dir = Some(value.into()),
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`RegimeConfig::parse`]; unset paths are omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "regime = {}", self.regime);
        let _ = writeln!(s, "q = {}", self.q);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "epochs_codec = {}", self.epochs_codec);
        let _ = writeln!(s, "epochs_task = {}", self.epochs_task);
        let _ = writeln!(s, "lr_task = {}", self.lr_task);
        let _ = writeln!(s, "lr_codec = {}", self.lr_codec);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (key, path) in [
            ("dataset_dir", &self.dataset_dir),
            ("init_codec", &self.init_codec),
            ("init_task", &self.init_task),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = path {
                let _ = writeln!(s, "{key} = {}", p.display());
            }
        }
        s
    }
}
