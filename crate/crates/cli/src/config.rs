//! Run configuration: scene, model and training settings plus paths, merged
//! from a `key=value` file and command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tseg::dataset::Split;
use tseg::synth::SceneSpec;
use tseg::training::{EvalMode, OptimizerKind, Stage, TrainConfig};
use tseg::ModelConfig;

use crate::CliError;

/// Every accepted key with its help line. Each is also a `--key` flag.
pub const KEYS: &[(&str, &str)] = &[
    ("width", "frame width in pixels, a multiple of 4"),
    ("height", "frame height in pixels, a multiple of 4"),
    ("num_classes", "number of semantic classes (K)"),
    ("ignore_index", "label value excluded from losses and metrics"),
    ("camera_speed", "horizontal camera pan in pixels per frame"),
    ("num_cars", "cars per sequence"),
    ("num_persons", "persons per sequence"),
    ("object_speed_min", "slowest object speed in pixels per frame"),
    ("object_speed_max", "fastest object speed in pixels per frame"),
    ("flicker_prob", "per-frame probability that a class flips its texture"),
    ("border_band", "rows and columns at each border that are blurred and noised"),
    ("noise_sigma", "standard deviation of the border noise"),
    ("num_frames", "frames per sequence"),
    ("seed", "seed for generation, initialization and shuffling"),
    ("num_train", "training sequences to generate"),
    ("num_val", "validation sequences to generate"),
    ("feature_channels", "appearance feature channels (C_f)"),
    ("hidden_channels", "Conv-LSTM hidden channels (N_h)"),
    ("stage", "training stage: 1, 2 or 3"),
    ("learning_rate", "optimizer step size"),
    ("epochs", "passes over the training split"),
    ("batch_size", "frames (stage 1) or windows (stages 2, 3) per step"),
    ("sequence_length", "window length for stages 2 and 3"),
    ("optimizer", "sgd or adam"),
    ("grad_clip", "maximum global gradient L2 norm, or `none`"),
    ("data", "dataset root written by `gen`"),
    ("out", "output directory"),
    ("init", "checkpoint to start from (required for stages 2 and 3)"),
    ("ckpt", "checkpoint to evaluate or run"),
    ("mode", "appearance_only, memory_only or fused"),
    ("split", "train or val"),
    ("sequence", "sequence directory for `infer` and `gates`"),
    ("overwrite", "replace an existing dataset under --out"),
    ("ground_truth", "score the ground truth against itself (debugging aid)"),
];

/// Keys that act as switches on the command line.
pub const FLAG_KEYS: &[&str] = &["overwrite", "ground_truth"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub num_train: usize,
    pub num_val: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub sequence: Option<PathBuf>,
    pub mode: EvalMode,
    pub split: Split,
    pub overwrite: bool,
    pub ground_truth: bool,
    explicit: BTreeSet<String>,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value.trim().parse().map_err(|_| CliError::Usage(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {line:?}", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text)
}

impl RunConfig {
    /// Applies pairs in order, so later pairs win. Training defaults depend on
    /// the stage, which is resolved first.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, CliError> {
        let stage = match pairs.iter().rev().find(|(k, _)| k == "stage") {
            Some((_, v)) => Stage::from_number(parse("stage", v)?).map_err(|e| CliError::Usage(e.to_string()))?,
            None => Stage::Appearance,
        };
        let mut cfg = RunConfig {
            scene: SceneSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::for_stage(stage),
            num_train: 500,
            num_val: 100,
            data: None,
            out: None,
            init: None,
            ckpt: None,
            sequence: None,
            mode: EvalMode::Fused,
            split: Split::Val,
            overwrite: false,
            ground_truth: false,
            explicit: BTreeSet::new(),
        };
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let path = || Some(PathBuf::from(value.trim()));
        match key {
            "seed" => {
                self.train.seed = parse(key, value)?;
                self.scene.seed = self.train.seed;
            }
            "num_classes" => {
                self.model.num_classes = parse(key, value)?;
                self.scene.num_classes = self.model.num_classes;
            }
            "num_train" => self.num_train = parse(key, value)?,
            "num_val" => self.num_val = parse(key, value)?,
            "feature_channels" => self.model.feature_channels = parse(key, value)?,
            "hidden_channels" => self.model.hidden_channels = parse(key, value)?,
            "stage" => {
                let n = parse(key, value)?;
                self.train.stage = Stage::from_number(n).map_err(|e| CliError::Usage(e.to_string()))?;
            }
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "sequence_length" => self.train.sequence_length = parse(key, value)?,
            "optimizer" => {
                self.train.optimizer =
                    OptimizerKind::from_str(value.trim()).map_err(|e| CliError::Usage(e.to_string()))?
            }
            "grad_clip" => {
                self.train.grad_clip = match value.trim() {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "data" => self.data = path(),
            "out" => self.out = path(),
            "init" => self.init = path(),
            "ckpt" => self.ckpt = path(),
            "sequence" => self.sequence = path(),
            "mode" => self.mode = EvalMode::from_str(value.trim()).map_err(|e| CliError::Usage(e.to_string()))?,
            "split" => self.split = Split::from_str(value.trim()).map_err(|e| CliError::Usage(e.to_string()))?,
            "overwrite" => self.overwrite = parse_bool(key, value)?,
            "ground_truth" => self.ground_truth = parse_bool(key, value)?,
            _ => {
                let known = self.scene.set(key, value).map_err(|e| CliError::Usage(e.to_string()))?;
                if !known {
                    return Err(CliError::Usage(format!("unknown config key `{key}`")));
                }
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// The path stored under `key`, or a usage error naming the missing flag.
    pub fn require<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        value.as_deref().ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
    }

    /// Rejects a loaded model whose dimensions contradict explicitly given keys.
    pub fn check_model(&self, found: &ModelConfig) -> Result<(), CliError> {
        let pairs = [
            ("feature_channels", self.model.feature_channels, found.feature_channels),
            ("hidden_channels", self.model.hidden_channels, found.hidden_channels),
            ("num_classes", self.model.num_classes, found.num_classes),
        ];
        for (key, want, got) in pairs {
            if self.is_explicit(key) && want != got {
                return Err(CliError::Mismatch(format!("{key}={want} but the checkpoint has {got}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_config_text(text).unwrap()
    }

    #[test]
    fn every_listed_key_is_known() {
        for (key, _) in KEYS {
            let err = RunConfig::from_pairs(&[(key.to_string(), "@".into())]);
            if let Err(CliError::Usage(msg)) = err {
                assert!(!msg.contains("unknown config key"), "{key}: {msg}");
            }
        }
    }

    #[test]
    fn later_values_win_and_stage_picks_defaults() {
        let cfg = RunConfig::from_pairs(&pairs("epochs=3\n# note\n\nepochs = 4\nstage=3\nseed=9")).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.stage, Stage::Gated);
        assert_eq!(cfg.train.batch_size, TrainConfig::for_stage(Stage::Gated).batch_size);
        assert_eq!((cfg.train.seed, cfg.scene.seed), (9, 9));
        assert!(cfg.is_explicit("epochs") && !cfg.is_explicit("batch_size"));
    }

    #[test]
    fn bad_input_is_a_usage_error() {
        assert!(matches!(RunConfig::from_pairs(&pairs("widht=64")), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::from_pairs(&pairs("width=wide")), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::from_pairs(&pairs("stage=4")), Err(CliError::Usage(_))));
        assert!(matches!(parse_config_text("width 64"), Err(CliError::Usage(_))));
        let cfg = RunConfig::from_pairs(&pairs("grad_clip=2.5\nmode=memory_only\nsplit=train")).unwrap();
        assert_eq!(cfg.train.grad_clip, Some(2.5));
        assert_eq!((cfg.mode, cfg.split), (EvalMode::MemoryOnly, Split::Train));
    }
}
