//! Run configuration: a flat, diff-friendly `key=value` text format.
//!
//! Lines are `dotted.key=value`; blank lines and `#` comments are ignored.
//! Unknown keys are hard errors so typos cannot silently fall back to
//! defaults.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::attention::ModelConfig;
use crate::augment::{AugmentationConfig, NoiseSource};
use crate::tensor::TensorError;

/// Errors surfaced by configuration parsing and validation.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?}: cannot read {value:?} as {expected}")]
    InvalidValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("missing required key {0:?}")]
    MissingKey(&'static str),
    #[error(transparent)]
    Invalid(#[from] TensorError),
}

/// Ordered `key=value` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: idx + 1,
                detail: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Parse {
                    line: idx + 1,
                    detail: "empty key".into(),
                });
            }
            if pairs.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::Parse {
                    line: idx + 1,
                    detail: format!("duplicate key {key:?}"),
                });
            }
            pairs.push((key, value));
        }
        Ok(KeyValues { pairs })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        let value = value.to_string();
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value,
            None => self.pairs.push((key.to_string(), value)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.pairs {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Which model a run trains or serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Text to gloss (symbolic to symbolic).
    T2g,
    /// Gloss to pose (symbolic to continuous).
    G2p,
    /// Text to pose directly (symbolic to continuous).
    T2p,
    /// Pose to text (the back-translation model).
    P2t,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::T2g, Task::G2p, Task::T2p, Task::P2t];

    /// Whether the model produces symbolic tokens (otherwise poses).
    pub fn symbolic_output(self) -> bool {
        matches!(self, Task::T2g | Task::P2t)
    }
}

impl FromStr for Task {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "t2g" => Ok(Task::T2g),
            "g2p" => Ok(Task::G2p),
            "t2p" => Ok(Task::T2p),
            "p2t" => Ok(Task::P2t),
            other => Err(ConfigError::InvalidValue {
                key: "task".into(),
                value: other.into(),
                expected: "one of t2g, g2p, t2p, p2t",
            }),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::T2g => "t2g",
            Task::G2p => "g2p",
            Task::T2p => "t2p",
            Task::P2t => "p2t",
        })
    }
}

/// Everything a training or inference run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub data_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    /// Counter-embedding width for continuous models.
    pub d_counter: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluate the dev split every this many epochs.
    pub eval_every: usize,
    /// Stop after this many evaluations without dev improvement.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub augment: AugmentationConfig,
    /// Free-running production stops once the counter reaches this.
    pub stop_threshold: f32,
    pub max_frames: usize,
    /// Back-translation checkpoint used for dev BLEU-4 model selection on
    /// continuous tasks (free-running dev pose error is used when absent).
    pub backtrans_checkpoint: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults: a 2-layer, 8-head, 256-wide model trained with Adam at
    /// 1e-3.
    pub fn new(task: Task) -> Self {
        RunConfig {
            task,
            data_dir: PathBuf::from("data"),
            seed: 1,
            model: ModelConfig::default(),
            d_counter: 8,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            eval_every: 1,
            patience: 10,
            grad_clip: 1.0,
            augment: AugmentationConfig::baseline(),
            stop_threshold: 0.98,
            max_frames: 512,
            backtrans_checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.augment.validate()?;
        let positive: [(&str, usize); 6] = [
            ("model.d_counter", self.d_counter),
            ("train.batch_size", self.batch_size),
            ("train.max_epochs", self.max_epochs),
            ("train.eval_every", self.eval_every),
            ("train.patience", self.patience),
            ("produce.max_frames", self.max_frames),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ConfigError::InvalidValue {
                    key: key.into(),
                    value: "0".into(),
                    expected: "a positive integer",
                });
            }
        }
        if self.d_counter >= self.model.d_model {
            return Err(ConfigError::InvalidValue {
                key: "model.d_counter".into(),
                value: self.d_counter.to_string(),
                expected: "a width smaller than model.d_model",
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ConfigError::InvalidValue {
                key: "train.learning_rate".into(),
                value: self.learning_rate.to_string(),
                expected: "a non-negative real",
            });
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(ConfigError::InvalidValue {
                key: "train.grad_clip".into(),
                value: self.grad_clip.to_string(),
                expected: "a non-negative real (0 disables)",
            });
        }
        if !(self.stop_threshold.is_finite()
            && self.stop_threshold > 0.0
            && self.stop_threshold <= 1.0)
        {
            return Err(ConfigError::InvalidValue {
                key: "produce.stop_threshold".into(),
                value: self.stop_threshold.to_string(),
                expected: "a real in (0, 1]",
            });
        }
        Ok(())
    }

    /// Builds a config from parsed pairs; `task=` is required, everything
    /// else falls back to defaults. Unknown keys are errors.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ConfigError> {
        const KNOWN: [&str; 22] = [
            "task",
            "data.dir",
            "seed",
            "model.layers",
            "model.heads",
            "model.d_model",
            "model.d_ff",
            "model.max_seq_len",
            "model.d_counter",
            "train.learning_rate",
            "train.batch_size",
            "train.max_epochs",
            "train.eval_every",
            "train.patience",
            "train.grad_clip",
            "augment.future_horizon",
            "augment.just_counter",
            "augment.noise_factor",
            "augment.noise_source",
            "augment.counter_noise",
            "produce.stop_threshold",
            "produce.max_frames",
        ];
        const OPTIONAL_PATHS: [&str; 1] = ["eval.backtranslation_checkpoint"];
        for key in kv.keys() {
            if !KNOWN.contains(&key) && !OPTIONAL_PATHS.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
        }

        let task: Task = kv
            .get("task")
            .ok_or(ConfigError::MissingKey("task"))?
            .parse()?;
        let mut cfg = RunConfig::new(task);

        fn read<T: FromStr>(
            kv: &KeyValues,
            key: &str,
            expected: &'static str,
            into: &mut T,
        ) -> Result<(), ConfigError> {
            if let Some(raw) = kv.get(key) {
                *into = raw.parse().map_err(|_| ConfigError::InvalidValue {
                    key: key.to_string(),
                    value: raw.to_string(),
                    expected,
                })?;
            }
            Ok(())
        }

        if let Some(dir) = kv.get("data.dir") {
            cfg.data_dir = PathBuf::from(dir);
        }
        read(kv, "seed", "an unsigned integer", &mut cfg.seed)?;
        read(kv, "model.layers", "an unsigned integer", &mut cfg.model.num_layers)?;
        read(kv, "model.heads", "a positive integer", &mut cfg.model.num_heads)?;
        read(kv, "model.d_model", "a positive integer", &mut cfg.model.d_model)?;
        read(kv, "model.d_ff", "a positive integer", &mut cfg.model.d_ff)?;
        read(kv, "model.max_seq_len", "a positive integer", &mut cfg.model.max_seq_len)?;
        read(kv, "model.d_counter", "a positive integer", &mut cfg.d_counter)?;
        read(kv, "train.learning_rate", "a real number", &mut cfg.learning_rate)?;
        read(kv, "train.batch_size", "a positive integer", &mut cfg.batch_size)?;
        read(kv, "train.max_epochs", "a positive integer", &mut cfg.max_epochs)?;
        read(kv, "train.eval_every", "a positive integer", &mut cfg.eval_every)?;
        read(kv, "train.patience", "a positive integer", &mut cfg.patience)?;
        read(kv, "train.grad_clip", "a non-negative real", &mut cfg.grad_clip)?;
        read(
            kv,
            "augment.future_horizon",
            "a positive integer",
            &mut cfg.augment.future_horizon,
        )?;
        read(
            kv,
            "augment.just_counter",
            "true or false",
            &mut cfg.augment.just_counter,
        )?;
        read(
            kv,
            "augment.noise_factor",
            "a non-negative real",
            &mut cfg.augment.noise_factor,
        )?;
        read(
            kv,
            "augment.counter_noise",
            "a non-negative real",
            &mut cfg.augment.counter_noise,
        )?;
        if let Some(raw) = kv.get("augment.noise_source") {
            cfg.augment.noise_source =
                raw.parse::<NoiseSource>()
                    .map_err(|_| ConfigError::InvalidValue {
                        key: "augment.noise_source".into(),
                        value: raw.to_string(),
                        expected: "residual or positional",
                    })?;
        }
        read(
            kv,
            "produce.stop_threshold",
            "a real in (0, 1]",
            &mut cfg.stop_threshold,
        )?;
        read(kv, "produce.max_frames", "a positive integer", &mut cfg.max_frames)?;
        if let Some(path) = kv.get("eval.backtranslation_checkpoint") {
            cfg.backtrans_checkpoint = Some(PathBuf::from(path));
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_key_values(&KeyValues::from_file(path)?)
    }

    /// The complete effective configuration, suitable for logging or
    /// writing back out.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("task", self.task);
        kv.set("data.dir", self.data_dir.display());
        kv.set("seed", self.seed);
        kv.set("model.layers", self.model.num_layers);
        kv.set("model.heads", self.model.num_heads);
        kv.set("model.d_model", self.model.d_model);
        kv.set("model.d_ff", self.model.d_ff);
        kv.set("model.max_seq_len", self.model.max_seq_len);
        kv.set("model.d_counter", self.d_counter);
        kv.set("train.learning_rate", self.learning_rate);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.max_epochs", self.max_epochs);
        kv.set("train.eval_every", self.eval_every);
        kv.set("train.patience", self.patience);
        kv.set("train.grad_clip", self.grad_clip);
        kv.set("augment.future_horizon", self.augment.future_horizon);
        kv.set("augment.just_counter", self.augment.just_counter);
        kv.set("augment.noise_factor", self.augment.noise_factor);
        kv.set("augment.noise_source", self.augment.noise_source);
        kv.set("augment.counter_noise", self.augment.counter_noise);
        kv.set("produce.stop_threshold", self.stop_threshold);
        kv.set("produce.max_frames", self.max_frames);
        if let Some(path) = &self.backtrans_checkpoint {
            kv.set("eval.backtranslation_checkpoint", path.display());
        }
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_parse_comments_blanks_and_trimming() {
        let kv = KeyValues::parse("# run\n\n task = t2g \nmodel.layers=2\n").unwrap();
        assert_eq!(kv.get("task"), Some("t2g"));
        assert_eq!(kv.get("model.layers"), Some("2"));
        assert_eq!(kv.get("missing"), None);
    }

    #[test]
    fn malformed_and_duplicate_lines_are_rejected() {
        assert!(matches!(
            KeyValues::parse("just words\n"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            KeyValues::parse("a=1\na=2\n"),
            Err(ConfigError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            KeyValues::parse("=x\n"),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn task_names_round_trip() {
        for task in Task::ALL {
            assert_eq!(task.to_string().parse::<Task>().unwrap(), task);
        }
        assert!("pose".parse::<Task>().is_err());
        assert!(Task::T2g.symbolic_output());
        assert!(Task::P2t.symbolic_output());
        assert!(!Task::G2p.symbolic_output());
        assert!(!Task::T2p.symbolic_output());
    }

    #[test]
    fn defaults_match_the_published_recipe() {
        let cfg = RunConfig::new(Task::T2p);
        assert_eq!(cfg.model.num_layers, 2);
        assert_eq!(cfg.model.num_heads, 8);
        assert_eq!(cfg.model.d_model, 256);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.d_counter, 8);
        assert_eq!(cfg.max_epochs, 100);
        assert_eq!(cfg.patience, 10);
        assert_eq!(cfg.stop_threshold, 0.98);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let mut cfg = RunConfig::new(Task::G2p);
        cfg.seed = 99;
        cfg.model.d_model = 64;
        cfg.model.num_heads = 4;
        cfg.model.d_ff = 128;
        cfg.augment.future_horizon = 10;
        cfg.augment.noise_factor = 5.0;
        cfg.backtrans_checkpoint = Some(PathBuf::from("p2t.ckpt"));
        let text = cfg.to_key_values().to_string();
        let back = RunConfig::from_key_values(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let kv = KeyValues::parse("task=t2g\nmodle.layers=2\n").unwrap();
        assert!(matches!(
            RunConfig::from_key_values(&kv),
            Err(ConfigError::UnknownKey(k)) if k == "modle.layers"
        ));
        let kv = KeyValues::parse("task=t2g\nmodel.layers=two\n").unwrap();
        assert!(matches!(
            RunConfig::from_key_values(&kv),
            Err(ConfigError::InvalidValue { .. })
        ));
        let kv = KeyValues::parse("model.layers=2\n").unwrap();
        assert!(matches!(
            RunConfig::from_key_values(&kv),
            Err(ConfigError::MissingKey("task"))
        ));
    }

    #[test]
    fn validation_rejects_inconsistent_widths() {
        let mut cfg = RunConfig::new(Task::T2p);
        cfg.d_counter = 256;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::new(Task::T2p);
        cfg.stop_threshold = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::new(Task::T2p);
        cfg.model.d_model = 255;
        assert!(cfg.validate().is_err());
    }
}
