//! Flat `key = value` experiment configuration.
//!
//! One text format drives everything: config files, command-line `--set`
//! overrides, and the header embedded in checkpoints. Every key has a
//! documented default (see [`key_docs`]); unknown keys are rejected so typos
//! cannot silently fall back to defaults. `#` starts a comment.

use crate::backbone::{ArchDescriptor, AttentionChoice, Family, IniSettings};
use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Where the training/eval data comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// Generated in-process (`synth_*` keys).
    Synth,
    /// The raw `IIDS` container.
    Raw,
    /// CSV rows of label + pixels.
    Csv,
    /// CIFAR-10 binary records.
    Cifar10,
}

impl DataFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(DataFormat::Synth),
            "raw" => Ok(DataFormat::Raw),
            "csv" => Ok(DataFormat::Csv),
            "cifar10" => Ok(DataFormat::Cifar10),
            other => Err(Error::Config(format!(
                "unknown data format '{other}' (expected synth, raw, csv, or cifar10)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DataFormat::Synth => "synth",
            DataFormat::Raw => "raw",
            DataFormat::Csv => "csv",
            DataFormat::Cifar10 => "cifar10",
        }
    }
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    // Architecture
    pub family: Family,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub classes: usize,
    pub base_width: usize,
    pub blocks_per_stage: usize,
    pub widen: usize,
    pub attention: AttentionChoice,
    // Channel-gate settings
    pub preset: String,
    pub t: usize,
    pub aggregation: bool,
    pub dilated: bool,
    pub fold_rows: Option<usize>,
    pub fold_cols: Option<usize>,
    pub joint: bool,
    pub joint_stacked: bool,
    pub spatial: bool,
    pub spatial_tau: usize,
    // Training
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_drops: Vec<f64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentPolicy,
    // Data
    pub data_format: DataFormat,
    pub train_path: String,
    pub test_path: String,
    pub synth_train: usize,
    pub synth_test: usize,
    pub normalize: bool,
    // Outputs
    pub metrics_path: String,
    pub checkpoint_path: String,
    /// Save a checkpoint every this many epochs (0 = final epoch only).
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            family: Family::PreactResnet,
            input_channels: 3,
            input_height: 16,
            input_width: 16,
            classes: 10,
            base_width: 8,
            blocks_per_stage: 1,
            widen: 1,
            attention: AttentionChoice::Ini,
            preset: "square-3".into(),
            t: 16,
            aggregation: true,
            dilated: false,
            fold_rows: None,
            fold_cols: None,
            joint: false,
            joint_stacked: true,
            spatial: false,
            spatial_tau: 1,
            epochs: 400,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            lr_drops: vec![0.5, 0.75, 0.9],
            weight_decay: 5e-4,
            seed: 1,
            augment: AugmentPolicy::FlipTranslate,
            data_format: DataFormat::Synth,
            train_path: String::new(),
            test_path: String::new(),
            synth_train: 4000,
            synth_test: 1000,
            normalize: true,
            metrics_path: "metrics.jsonl".into(),
            checkpoint_path: "model.ck".into(),
            checkpoint_every: 1,
        }
    }
}

/// Documentation row for one configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

/// Every key, its default, and what it means — the single source of truth
/// for the config surface (serialization order follows this table).
pub const KEY_DOCS: &[KeyDoc] = &[
    KeyDoc { key: "family", default: "preact_resnet", help: "backbone family: allcnn | preact_resnet | wrn" },
    KeyDoc { key: "input_channels", default: "3", help: "input image channels" },
    KeyDoc { key: "input_height", default: "16", help: "input image height" },
    KeyDoc { key: "input_width", default: "16", help: "input image width" },
    KeyDoc { key: "classes", default: "10", help: "number of classes" },
    KeyDoc { key: "base_width", default: "8", help: "channel count of the first stage" },
    KeyDoc { key: "blocks_per_stage", default: "1", help: "conv blocks / residual units per stage" },
    KeyDoc { key: "widen", default: "1", help: "width multiplier (wrn style)" },
    KeyDoc { key: "attention", default: "ini", help: "channel gate: none | se | ini" },
    KeyDoc { key: "preset", default: "square-3", help: "grouping-filter preset name (append -d for the dilated add-on)" },
    KeyDoc { key: "t", default: "16", help: "reduction ratio; also sets filter instances per shape" },
    KeyDoc { key: "aggregation", default: "true", help: "combine multi-shape scan results (required for multi-shape presets)" },
    KeyDoc { key: "dilated", default: "false", help: "append the 5x5 dilation-2 filter to the preset" },
    KeyDoc { key: "fold_rows", default: "auto", help: "fold-map rows override (auto = family default)" },
    KeyDoc { key: "fold_cols", default: "auto", help: "fold-map cols override (auto = family default)" },
    KeyDoc { key: "joint", default: "false", help: "gate residual units from branch + identity signals" },
    KeyDoc { key: "joint_map", default: "stacked", help: "joint map layout: stacked | alt_folded" },
    KeyDoc { key: "spatial", default: "false", help: "add per-position attention before the channel gate" },
    KeyDoc { key: "spatial_tau", default: "1", help: "channel blocks for per-position attention (divides width)" },
    KeyDoc { key: "epochs", default: "400", help: "training epochs" },
    KeyDoc { key: "batch_size", default: "128", help: "SGD minibatch size" },
    KeyDoc { key: "base_lr", default: "0.1", help: "initial learning rate" },
    KeyDoc { key: "momentum", default: "0.9", help: "Nesterov momentum coefficient" },
    KeyDoc { key: "lr_drops", default: "0.5,0.75,0.9", help: "epoch fractions where lr divides by 10" },
    KeyDoc { key: "weight_decay", default: "0.0005", help: "L2 decay on conv/FC weights (not biases/BN)" },
    KeyDoc { key: "seed", default: "1", help: "seed for init, shuffling, and augmentation" },
    KeyDoc { key: "augment", default: "flip_translate", help: "batch augmentation: none | flip_translate" },
    KeyDoc { key: "data_format", default: "synth", help: "dataset source: synth | raw | csv | cifar10" },
    KeyDoc { key: "train_path", default: "", help: "training file (raw/csv/cifar10); INI_DATA_ROOT re-roots relative paths" },
    KeyDoc { key: "test_path", default: "", help: "test file; empty = evaluate on the training split" },
    KeyDoc { key: "synth_train", default: "4000", help: "synthetic training examples" },
    KeyDoc { key: "synth_test", default: "1000", help: "synthetic test examples" },
    KeyDoc { key: "normalize", default: "true", help: "standardize channels with train-split statistics" },
    KeyDoc { key: "metrics_path", default: "metrics.jsonl", help: "metrics log file (one JSON record per epoch)" },
    KeyDoc { key: "checkpoint_path", default: "model.ck", help: "checkpoint file" },
    KeyDoc { key: "checkpoint_every", default: "1", help: "checkpoint interval in epochs (0 = final only)" },
];

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: '{v}' is not a non-negative integer")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: '{v}' is not a non-negative integer")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: '{v}' is not a number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: '{v}' is not true/false"))),
    }
}

fn parse_fold(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_usize(key, v).map(Some)
    }
}

fn fold_str(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

fn parse_drops(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_f64(key, p.trim())).collect()
}

fn drops_str(drops: &[f64]) -> String {
    drops.iter().map(|d| format!("{d:?}")).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "family" => self.family = Family::parse(value)?,
            "input_channels" => self.input_channels = parse_usize(key, value)?,
            "input_height" => self.input_height = parse_usize(key, value)?,
            "input_width" => self.input_width = parse_usize(key, value)?,
            "classes" => self.classes = parse_usize(key, value)?,
            "base_width" => self.base_width = parse_usize(key, value)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_usize(key, value)?,
            "widen" => self.widen = parse_usize(key, value)?,
            "attention" => self.attention = AttentionChoice::parse(value)?,
            "preset" => self.preset = value.to_string(),
            "t" => self.t = parse_usize(key, value)?,
            "aggregation" => self.aggregation = parse_bool(key, value)?,
            "dilated" => self.dilated = parse_bool(key, value)?,
            "fold_rows" => self.fold_rows = parse_fold(key, value)?,
            "fold_cols" => self.fold_cols = parse_fold(key, value)?,
            "joint" => self.joint = parse_bool(key, value)?,
            "joint_map" => {
                self.joint_stacked = match value {
                    "stacked" => true,
                    "alt_folded" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "joint_map: '{value}' is not stacked/alt_folded"
                        )))
                    }
                }
            }
            "spatial" => self.spatial = parse_bool(key, value)?,
            "spatial_tau" => self.spatial_tau = parse_usize(key, value)?,
            "epochs" => self.epochs = parse_usize(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "base_lr" => self.base_lr = parse_f64(key, value)?,
            "momentum" => self.momentum = parse_f64(key, value)?,
            "lr_drops" => self.lr_drops = parse_drops(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "augment" => self.augment = AugmentPolicy::parse(value)?,
            "data_format" => self.data_format = DataFormat::parse(value)?,
            "train_path" => self.train_path = value.to_string(),
            "test_path" => self.test_path = value.to_string(),
            "synth_train" => self.synth_train = parse_usize(key, value)?,
            "synth_test" => self.synth_test = parse_usize(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "metrics_path" => self.metrics_path = value.to_string(),
            "checkpoint_path" => self.checkpoint_path = value.to_string(),
            "checkpoint_every" => self.checkpoint_every = parse_usize(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Current value of a key in its textual form.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "family" => self.family.as_str().into(),
            "input_channels" => self.input_channels.to_string(),
            "input_height" => self.input_height.to_string(),
            "input_width" => self.input_width.to_string(),
            "classes" => self.classes.to_string(),
            "base_width" => self.base_width.to_string(),
            "blocks_per_stage" => self.blocks_per_stage.to_string(),
            "widen" => self.widen.to_string(),
            "attention" => self.attention.as_str().into(),
            "preset" => self.preset.clone(),
            "t" => self.t.to_string(),
            "aggregation" => self.aggregation.to_string(),
            "dilated" => self.dilated.to_string(),
            "fold_rows" => fold_str(self.fold_rows),
            "fold_cols" => fold_str(self.fold_cols),
            "joint" => self.joint.to_string(),
            "joint_map" => if self.joint_stacked { "stacked" } else { "alt_folded" }.into(),
            "spatial" => self.spatial.to_string(),
            "spatial_tau" => self.spatial_tau.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "base_lr" => format!("{:?}", self.base_lr),
            "momentum" => format!("{:?}", self.momentum),
            "lr_drops" => drops_str(&self.lr_drops),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "seed" => self.seed.to_string(),
            "augment" => self.augment.as_str().into(),
            "data_format" => self.data_format.as_str().into(),
            "train_path" => self.train_path.clone(),
            "test_path" => self.test_path.clone(),
            "synth_train" => self.synth_train.to_string(),
            "synth_test" => self.synth_test.to_string(),
            "normalize" => self.normalize.to_string(),
            "metrics_path" => self.metrics_path.clone(),
            "checkpoint_path" => self.checkpoint_path.clone(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        })
    }

    /// Parse a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply a config document on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `key=value` override strings (CLI `--set`), after file keys.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!(
                    "override '{item}' is not of the form key=value"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical serialization: every key in documentation order. Parsing
    /// the result reproduces this config exactly; checkpoints embed it.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for doc in KEY_DOCS {
            out.push_str(doc.key);
            out.push_str(" = ");
            out.push_str(&self.get(doc.key).expect("documented key"));
            out.push('\n');
        }
        out
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        ArchDescriptor {
            family: self.family,
            input: (self.input_channels, self.input_height, self.input_width),
            classes: self.classes,
            base_width: self.base_width,
            blocks_per_stage: self.blocks_per_stage,
            widen: self.widen,
            attention: self.attention,
            ini: IniSettings {
                preset: self.preset.clone(),
                t: self.t,
                aggregation: self.aggregation,
                dilated: self.dilated,
                fold_rows: self.fold_rows,
                fold_cols: self.fold_cols,
                joint: self.joint,
                joint_stacked: self.joint_stacked,
                spatial: self.spatial,
                spatial_tau: self.spatial_tau,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            momentum: self.momentum,
            lr_drops: self.lr_drops.clone(),
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    /// Full validation: architecture, training recipe, and data wiring.
    pub fn validate(&self) -> Result<()> {
        self.descriptor().validate()?;
        self.train_config().validate()?;
        match self.data_format {
            DataFormat::Synth => {
                if self.synth_train == 0 {
                    return Err(Error::Config("synth_train must be >= 1".into()));
                }
            }
            DataFormat::Raw | DataFormat::Csv | DataFormat::Cifar10 => {
                if self.train_path.is_empty() {
                    return Err(Error::Config(format!(
                        "data_format = {} needs train_path",
                        self.data_format.as_str()
                    )));
                }
            }
        }
        if self.data_format == DataFormat::Cifar10
            && (self.input_channels, self.input_height, self.input_width) != (3, 32, 32)
        {
            return Err(Error::Config(
                "cifar10 data is 3x32x32; set input_channels/height/width to match".into(),
            ));
        }
        if self.metrics_path.is_empty() || self.checkpoint_path.is_empty() {
            return Err(Error::Config("metrics_path and checkpoint_path must be set".into()));
        }
        Ok(())
    }
}
