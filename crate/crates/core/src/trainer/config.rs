//! Flat `key = value` training configuration.

use std::fmt::Write as _;

use crate::corpus::{DEFAULT_MAX_DUR, DEFAULT_WINDOW_LEN};
use crate::lstm::{ModelConfig, DEFAULT_DROPOUT, DEFAULT_HIDDEN};
use crate::score::DEFAULT_GRID;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub clip_norm: f64,
    /// A checkpoint is written every this many epochs, plus one at the end.
    pub checkpoint_every: usize,
    /// Fraction of each song's trailing windows held out of training.
    pub holdout: f64,
    pub grid: u32,
    pub max_dur: u32,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub window_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-3,
            epochs: 20,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            clip_norm: 5.0,
            checkpoint_every: 10,
            holdout: 0.0,
            grid: DEFAULT_GRID,
            max_dur: DEFAULT_MAX_DUR,
            hidden: DEFAULT_HIDDEN.to_vec(),
            dropout: DEFAULT_DROPOUT,
            window_len: DEFAULT_WINDOW_LEN,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "lr",
    "epochs",
    "optimizer",
    "seed",
    "clip_norm",
    "checkpoint_every",
    "holdout",
    "grid",
    "max_dur",
    "hidden",
    "dropout",
    "window_len",
];

/// Splits config text into `(key, value)` pairs. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn model_config(&self, note_vocab_size: usize, dur_vocab_size: usize) -> ModelConfig {
        ModelConfig {
            note_vocab_size,
            dur_vocab_size,
            hidden: self.hidden.clone(),
            dropout: self.dropout,
            window_len: self.window_len,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value.parse().map_err(|_| TrainError::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(TrainError::Config(format!("unknown optimizer {value:?}"))),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "holdout" => self.holdout = num(key, value)?,
            "grid" => self.grid = num(key, value)?,
            "max_dur" => self.max_dur = num(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "dropout" => self.dropout = num(key, value)?,
            "window_len" => self.window_len = num(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), TrainError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut c = TrainConfig::default();
        c.apply(&parse_config_text(text)?)?;
        Ok(c)
    }

    /// Resolved values in [`CONFIG_KEYS`] order. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let hidden = self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let values = [
            self.batch_size.to_string(),
            format!("{:?}", self.lr),
            self.epochs.to_string(),
            self.optimizer.as_str().to_string(),
            self.seed.to_string(),
            format!("{:?}", self.clip_norm),
            self.checkpoint_every.to_string(),
            format!("{:?}", self.holdout),
            self.grid.to_string(),
            self.max_dur.to_string(),
            hidden,
            format!("{:?}", self.dropout),
            self.window_len.to_string(),
        ];
        CONFIG_KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, epochs and checkpoint_every must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must be in [0, 1)");
        }
        if self.grid == 0 || self.max_dur == 0 {
            return bad("grid and max_dur must be positive");
        }
        self.model_config(1, 1).validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = TrainConfig {
            lr: 0.1 + 0.2,
            hidden: vec![32, 8],
            optimizer: OptimizerKind::Sgd,
            seed: u64::MAX,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parses_comments_and_rejects_junk() {
        let c = TrainConfig::from_text("# tiny\nepochs = 3\n\n hidden = 8 , 8\n").unwrap();
        assert_eq!((c.epochs, c.hidden.clone()), (3, vec![8, 8]));
        assert!(TrainConfig::from_text("epochs 3").is_err());
        assert!(TrainConfig::from_text("colour = blue").is_err());
        assert!(TrainConfig::from_text("optimizer = rmsprop").is_err());
        assert!(TrainConfig { dropout: 1.0, ..TrainConfig::default() }.validate().is_err());
    }
}
