//! Flat `key = value` configuration.
//!
//! One format serves config files, the config echo inside checkpoints, and
//! run manifests. Keys are namespaced `game.*`, `train.*` and `data.*`;
//! `run.*` keys carry manifest metadata and are ignored when a manifest is
//! read back as a config. Any other key is rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::agents::{GameConfig, Variant};
use crate::data::{default_concepts, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Parsed `key = value` lines. Blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {} is not of the form `key = value`", i + 1))
            })?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::config(key, "key given twice"));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(key, "required key is missing"))
    }

    fn parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }
}

/// How the sampling temperature evolves over epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemperatureSchedule {
    Constant,
    /// Linear from the game temperature at epoch 0 down to `floor` at
    /// `decay_epochs`, constant afterwards.
    Linear { floor: f64, decay_epochs: usize },
}

impl TemperatureSchedule {
    pub fn at(&self, start: f64, epoch: usize) -> f64 {
        match *self {
            TemperatureSchedule::Constant => start,
            TemperatureSchedule::Linear { floor, decay_epochs } => {
                if epoch >= decay_epochs || decay_epochs == 0 {
                    floor
                } else {
                    start + (floor - start) * epoch as f64 / decay_epochs as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_episodes: usize,
    /// `None` means one episode per training record.
    pub episodes_per_epoch: Option<usize>,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Validation episodes played after every epoch.
    pub eval_episodes: usize,
    pub temperature: TemperatureSchedule,
    pub init_seed: u64,
    pub episode_seed: u64,
    pub gumbel_seed: u64,
    pub eval_seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_episodes: 32,
            episodes_per_epoch: None,
            max_epochs: 200,
            early_stop_patience: 20,
            eval_episodes: 1000,
            temperature: TemperatureSchedule::Constant,
            init_seed: 0,
            episode_seed: 1,
            gumbel_seed: 2,
            eval_seed: 3,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(key, "must lie strictly between 0 and 1"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("train.epsilon", "must be positive"));
        }
        if self.batch_episodes == 0 {
            return Err(Error::config("train.batch_episodes", "must be at least 1"));
        }
        if self.episodes_per_epoch == Some(0) {
            return Err(Error::config("train.episodes_per_epoch", "must be at least 1"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("train.eval_episodes", "must be at least 1"));
        }
        if let TemperatureSchedule::Linear { floor, .. } = self.temperature {
            if !(floor > 0.0 && floor.is_finite()) {
                return Err(Error::config("train.temperature_floor", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Data handling: split seed, fractions, concept set, standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub split_seed: u64,
    pub fractions: [f64; 3],
    pub standardize: bool,
    pub concepts: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            fractions: DEFAULT_FRACTIONS,
            standardize: true,
            concepts: default_concepts(),
        }
    }
}

/// Everything a training run needs besides the data file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub game: GameConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            game: GameConfig::new(variant),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        for key in kv.keys() {
            if !KNOWN_KEYS.contains(&key) && !key.starts_with("run.") {
                return Err(Error::config(key, "unknown key"));
            }
        }
        let variant: Variant = {
            let v = kv.required("game.variant")?;
            v.parse().map_err(|e: String| Error::config("game.variant", e))?
        };
        if let Some(p) = kv.get("game.conv_padding") {
            if p != "valid" {
                return Err(Error::config("game.conv_padding", "only `valid` is supported"));
            }
        }
        let d = GameConfig::new(variant);
        let game = GameConfig {
            n_concepts: kv.parsed("game.n_concepts", d.n_concepts)?,
            vocab_size: kv.parsed("game.vocab_size", d.vocab_size)?,
            feature_dim: kv.parsed("game.feature_dim", d.feature_dim)?,
            embed_dim: kv.parsed("game.embed_dim", d.embed_dim)?,
            conv_filters: kv.parsed("game.conv_filters", d.conv_filters)?,
            conv_width: kv.parsed("game.conv_width", d.conv_width)?,
            temperature: kv.parsed("game.temperature", d.temperature)?,
            straight_through: kv.parsed("game.straight_through", d.straight_through)?,
            variant,
        };

        let t = TrainConfig::default();
        let episodes_per_epoch = match kv.get("train.episodes_per_epoch") {
            None | Some("auto") => None,
            Some(_) => Some(kv.parsed("train.episodes_per_epoch", 0usize)?),
        };
        let temperature = match kv.get("train.temperature_floor") {
            None | Some("none") => TemperatureSchedule::Constant,
            Some(_) => TemperatureSchedule::Linear {
                floor: kv.parsed("train.temperature_floor", 1.0)?,
                decay_epochs: kv.parsed("train.temperature_decay_epochs", 100usize)?,
            },
        };
        let parallel = kv.parsed("train.parallel", t.exec == Exec::Parallel)?;
        let train = TrainConfig {
            learning_rate: kv.parsed("train.learning_rate", t.learning_rate)?,
            beta1: kv.parsed("train.beta1", t.beta1)?,
            beta2: kv.parsed("train.beta2", t.beta2)?,
            epsilon: kv.parsed("train.epsilon", t.epsilon)?,
            batch_episodes: kv.parsed("train.batch_episodes", t.batch_episodes)?,
            episodes_per_epoch,
            max_epochs: kv.parsed("train.max_epochs", t.max_epochs)?,
            early_stop_patience: kv.parsed("train.early_stop_patience", t.early_stop_patience)?,
            eval_episodes: kv.parsed("train.eval_episodes", t.eval_episodes)?,
            temperature,
            init_seed: kv.parsed("train.init_seed", t.init_seed)?,
            episode_seed: kv.parsed("train.episode_seed", t.episode_seed)?,
            gumbel_seed: kv.parsed("train.gumbel_seed", t.gumbel_seed)?,
            eval_seed: kv.parsed("train.eval_seed", t.eval_seed)?,
            exec: if parallel { Exec::Parallel } else { Exec::Sequential },
        };

        let dd = DataConfig::default();
        let fractions = match kv.get("data.fractions") {
            None => dd.fractions,
            Some(v) => parse_fractions(v)?,
        };
        let concepts = match kv.get("data.concepts") {
            None => dd.concepts,
            Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        };
        let data = DataConfig {
            split_seed: kv.parsed("data.split_seed", dd.split_seed)?,
            fractions,
            standardize: kv.parsed("data.standardize", dd.standardize)?,
            concepts,
        };

        let cfg = Self { game, train, data };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.game.validate()?;
        self.train.validate()?;
        if self.data.concepts.len() != self.game.n_concepts {
            return Err(Error::config(
                "data.concepts",
                format!(
                    "lists {} concepts but game.n_concepts is {}",
                    self.data.concepts.len(),
                    self.game.n_concepts
                ),
            ));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let (g, t, d) = (&self.game, &self.train, &self.data);
        let (floor, decay) = match t.temperature {
            TemperatureSchedule::Constant => ("none".to_string(), 0),
            TemperatureSchedule::Linear { floor, decay_epochs } => (floor.to_string(), decay_epochs),
        };
        vec![
            ("game.variant", g.variant.to_string()),
            ("game.n_concepts", g.n_concepts.to_string()),
            ("game.vocab_size", g.vocab_size.to_string()),
            ("game.feature_dim", g.feature_dim.to_string()),
            ("game.embed_dim", g.embed_dim.to_string()),
            ("game.conv_filters", g.conv_filters.to_string()),
            ("game.conv_width", g.conv_width.to_string()),
            ("game.conv_padding", "valid".to_string()),
            ("game.temperature", g.temperature.to_string()),
            ("game.straight_through", g.straight_through.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.epsilon", t.epsilon.to_string()),
            ("train.batch_episodes", t.batch_episodes.to_string()),
            (
                "train.episodes_per_epoch",
                t.episodes_per_epoch.map_or("auto".to_string(), |n| n.to_string()),
            ),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.early_stop_patience", t.early_stop_patience.to_string()),
            ("train.eval_episodes", t.eval_episodes.to_string()),
            ("train.temperature_floor", floor),
            ("train.temperature_decay_epochs", decay.to_string()),
            ("train.init_seed", t.init_seed.to_string()),
            ("train.episode_seed", t.episode_seed.to_string()),
            ("train.gumbel_seed", t.gumbel_seed.to_string()),
            ("train.eval_seed", t.eval_seed.to_string()),
            ("train.parallel", (t.exec == Exec::Parallel).to_string()),
            ("data.split_seed", d.split_seed.to_string()),
            (
                "data.fractions",
                d.fractions.map(|f| f.to_string()).join(","),
            ),
            ("data.standardize", d.standardize.to_string()),
            ("data.concepts", d.concepts.join(",")),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

const KNOWN_KEYS: &[&str] = &[
    "game.variant",
    "game.n_concepts",
    "game.vocab_size",
    "game.feature_dim",
    "game.embed_dim",
    "game.conv_filters",
    "game.conv_width",
    "game.conv_padding",
    "game.temperature",
    "game.straight_through",
    "train.learning_rate",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.batch_episodes",
    "train.episodes_per_epoch",
    "train.max_epochs",
    "train.early_stop_patience",
    "train.eval_episodes",
    "train.temperature_floor",
    "train.temperature_decay_epochs",
    "train.init_seed",
    "train.episode_seed",
    "train.gumbel_seed",
    "train.eval_seed",
    "train.parallel",
    "data.split_seed",
    "data.fractions",
    "data.standardize",
    "data.concepts",
];

fn parse_fractions(v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::config("data.fractions", e.to_string()))?;
    <[f64; 3]>::try_from(parts)
        .map_err(|_| Error::config("data.fractions", "expected three comma-separated numbers"))
}
