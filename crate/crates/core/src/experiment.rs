//! End-to-end experiment drivers: the glue between a parsed configuration
//! and the training loop. The CLI subcommands and the acceptance suite call
//! these instead of wiring datasets, networks, and checkpoints by hand.

use crate::backbone::Network;
use crate::checkpoint::{capture, read_checkpoint, write_checkpoint};
use crate::config::{DataFormat, ExperimentConfig};
use crate::data::{
    parse_cifar_bin, parse_csv, parse_raw, resolve_data_path, synth_dataset, Dataset, Normalizer,
};
use crate::error::{Error, Result};
use crate::gfilter::GFilterSpec;
use crate::ini::InnerImageConfig;
use crate::residual::{JointConfig, JointMapMode};
use crate::train::{evaluate, EpochRecord, EvalMetrics, Trainer};
use crate::verify::{enumerate_groups, FoldKind};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Keeps synthetic train and test splits on different noise streams.
const SYNTH_TEST_SEED_OFFSET: u64 = 0x7E57;

/// What a finished (or resumed) training run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub param_count: u64,
}

/// Result of evaluating a stored checkpoint.
#[derive(Debug)]
pub struct EvalOutcome {
    pub config: ExperimentConfig,
    pub metrics: EvalMetrics,
    pub examples: usize,
    /// Which split the metrics were computed on.
    pub split: &'static str,
}

/// Load the train split and, when available, the test split.
pub fn build_datasets(config: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (c, h, w) = (config.input_channels, config.input_height, config.input_width);
    match config.data_format {
        DataFormat::Synth => {
            let train = synth_dataset(
                config.classes,
                config.synth_train,
                c,
                h,
                w,
                config.seed,
                "train",
            )?;
            let test = if config.synth_test > 0 {
                Some(synth_dataset(
                    config.classes,
                    config.synth_test,
                    c,
                    h,
                    w,
                    config.seed.wrapping_add(SYNTH_TEST_SEED_OFFSET),
                    "test",
                )?)
            } else {
                None
            };
            Ok((train, test))
        }
        DataFormat::Raw => {
            let train = parse_raw(
                &std::fs::read(resolve_data_path(&config.train_path))?,
                Some(config.classes),
                "train",
            )?;
            let test = if config.test_path.is_empty() {
                None
            } else {
                Some(parse_raw(
                    &std::fs::read(resolve_data_path(&config.test_path))?,
                    Some(config.classes),
                    "test",
                )?)
            };
            Ok((train, test))
        }
        DataFormat::Csv => {
            let train = parse_csv(
                &std::fs::read_to_string(resolve_data_path(&config.train_path))?,
                c,
                h,
                w,
                Some(config.classes),
                "train",
            )?;
            let test = if config.test_path.is_empty() {
                None
            } else {
                Some(parse_csv(
                    &std::fs::read_to_string(resolve_data_path(&config.test_path))?,
                    c,
                    h,
                    w,
                    Some(config.classes),
                    "test",
                )?)
            };
            Ok((train, test))
        }
        DataFormat::Cifar10 => {
            let train = parse_cifar_bin(
                &std::fs::read(resolve_data_path(&config.train_path))?,
                "train",
            )?;
            let test = if config.test_path.is_empty() {
                None
            } else {
                Some(parse_cifar_bin(
                    &std::fs::read(resolve_data_path(&config.test_path))?,
                    "test",
                )?)
            };
            Ok((train, test))
        }
    }
}

/// Fresh network + optimizer state for the configuration.
pub fn build_trainer(config: &ExperimentConfig) -> Result<Trainer> {
    let net = Network::build(&config.descriptor(), config.seed)?;
    Trainer::new(net, config.train_config())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Run the remaining epochs of `trainer`, appending one metrics line per
/// epoch and saving checkpoints on the configured cadence (plus a final
/// save). On a training error the message points at the last saved
/// checkpoint so the run can be resumed.
fn train_loop(
    mut trainer: Trainer,
    config: &ExperimentConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    normalizer: Option<&Normalizer>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let metrics_path = PathBuf::from(&config.metrics_path);
    let checkpoint_path = PathBuf::from(&config.checkpoint_path);
    let config_text = config.canonical_text();
    let mut records = Vec::new();
    let mut last_saved: Option<usize> = None;

    let save = |trainer: &Trainer, last_saved: &mut Option<usize>| -> Result<()> {
        let bundle = capture(trainer, &config_text);
        write_checkpoint(&bundle, &checkpoint_path)?;
        *last_saved = Some(trainer.epoch);
        Ok(())
    };

    while trainer.epoch < config.epochs {
        let record = trainer
            .run_epoch(train, test, normalizer, config.augment)
            .map_err(|err| match last_saved {
                Some(epoch) => Error::Train(format!(
                    "{err}; last saved checkpoint: {} (after {epoch} epochs)",
                    checkpoint_path.display()
                )),
                None => err,
            })?;
        append_line(&metrics_path, &record.to_json_line())?;
        progress(&record);
        records.push(record);
        if config.checkpoint_every > 0 && trainer.epoch % config.checkpoint_every == 0 {
            save(&trainer, &mut last_saved)?;
        }
    }
    save(&trainer, &mut last_saved)?;

    Ok(TrainOutcome {
        records,
        checkpoint: checkpoint_path,
        param_count: trainer.net.param_count(),
    })
}

/// Train from scratch according to `config`.
pub fn run_train(
    config: &ExperimentConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (train, test) = build_datasets(config)?;
    let normalizer = config.normalize.then(|| Normalizer::fit(&train));
    let trainer = build_trainer(config)?;
    train_loop(trainer, config, &train, test.as_ref(), normalizer.as_ref(), progress)
}

/// Continue a run from its checkpoint. The configuration embedded in the
/// checkpoint is authoritative; `overrides` may adjust non-architectural
/// keys (extending `epochs` is the usual case). Architectural edits are
/// caught by the parameter-shape comparison during restore.
pub fn run_resume(
    checkpoint: &Path,
    overrides: &[String],
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let bundle = read_checkpoint(checkpoint)?;
    let mut config = ExperimentConfig::parse(&bundle.config_text)?;
    config.apply_overrides(overrides)?;
    config.validate()?;
    let (train, test) = build_datasets(&config)?;
    let normalizer = config.normalize.then(|| Normalizer::fit(&train));
    let mut trainer = build_trainer(&config)?;
    crate::checkpoint::restore_into(&bundle, &mut trainer)?;
    train_loop(trainer, &config, &train, test.as_ref(), normalizer.as_ref(), progress)
}

/// Score a stored checkpoint on the configuration's test split (train split
/// when no test data is configured).
pub fn run_eval(checkpoint: &Path) -> Result<EvalOutcome> {
    let bundle = read_checkpoint(checkpoint)?;
    let config = ExperimentConfig::parse(&bundle.config_text)?;
    config.validate()?;
    let (train, test) = build_datasets(&config)?;
    let normalizer = config.normalize.then(|| Normalizer::fit(&train));
    let mut trainer = build_trainer(&config)?;
    crate::checkpoint::restore_into(&bundle, &mut trainer)?;
    let (dataset, split) = match &test {
        Some(t) => (t, "test"),
        None => (&train, "train"),
    };
    let metrics = evaluate(
        &mut trainer.net,
        dataset,
        normalizer.as_ref(),
        config.batch_size,
    )?;
    Ok(EvalOutcome { config, metrics, examples: dataset.len(), split })
}

fn overlap_summary(spec: &GFilterSpec, rows: usize, cols: usize, kind: FoldKind) -> Result<String> {
    let membership = enumerate_groups(spec, rows, cols, kind)?;
    let counts = membership.overlap_counts(kind.total_channels(rows, cols));
    let involved: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let min = involved.iter().min().copied().unwrap_or(0);
    let max = involved.iter().max().copied().unwrap_or(0);
    let mean = if involved.is_empty() {
        0.0
    } else {
        involved.iter().sum::<usize>() as f64 / involved.len() as f64
    };
    let uncovered = counts.len() - involved.len();
    let mut line = format!(
        "    shape {}: {} groups of {} signals; overlap min {} / mean {:.2} / max {}",
        spec.label(),
        membership.cells.len(),
        spec.rows * spec.cols,
        min,
        mean,
        max
    );
    if uncovered > 0 {
        write!(line, "; {uncovered} signals in no group").unwrap();
    }
    Ok(line)
}

/// Human-readable dump of the channel groups each attention block would
/// form under `config`: per stage, the map shape, every kept filter shape
/// with its group count and overlap statistics, and any discarded shapes.
pub fn inspect_groups(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let descriptor = config.descriptor();
    if !matches!(descriptor.attention, crate::backbone::AttentionChoice::Ini) {
        return Err(Error::Config(
            "inspect-groups requires attention = ini".into(),
        ));
    }
    let ini = &descriptor.ini;
    let family = descriptor.family.fold_family();
    let mut out = String::new();
    writeln!(
        out,
        "family {} | preset {} | t {} | joint {}",
        descriptor.family.as_str(),
        ini.preset,
        ini.t,
        if ini.joint {
            if ini.joint_stacked { "stacked" } else { "alt-folded" }
        } else {
            "off"
        }
    )
    .unwrap();

    let fold_override = |total: usize| -> Option<(usize, usize)> {
        match (ini.fold_rows, ini.fold_cols) {
            (Some(r), Some(c)) if r * c == total => Some((r, c)),
            _ => None,
        }
    };

    for (idx, width) in descriptor.stage_widths().iter().copied().enumerate() {
        if ini.joint {
            let cfg = JointConfig::resolve(
                width,
                &ini.preset,
                ini.t,
                ini.joint_stacked,
                if ini.joint_stacked { None } else { fold_override(2 * width) },
                family,
                ini.aggregation,
                ini.dilated,
            )?;
            let (rows, cols) = cfg.mode.map_shape(width);
            let kind = match cfg.mode {
                JointMapMode::Stacked => FoldKind::Stacked,
                JointMapMode::AltFolded { .. } => FoldKind::AltFolded,
            };
            writeln!(
                out,
                "stage {idx}: {width} channels, joint map {rows}x{cols} \
                 (ids 0..{width} residual, {width}..{} identity)",
                2 * width
            )
            .unwrap();
            let set = cfg.filter_set(1)?;
            for spec in set.effective_specs(rows, cols)? {
                writeln!(out, "{}", overlap_summary(&spec, rows, cols, kind)?).unwrap();
            }
            let dropped = set.discarded_specs(rows, cols);
            if !dropped.is_empty() {
                let labels: Vec<String> = dropped.iter().map(|s| s.label()).collect();
                writeln!(out, "    discarded (do not fit): {}", labels.join(", ")).unwrap();
            }
        } else {
            let cfg = InnerImageConfig::resolve(
                width,
                &ini.preset,
                ini.t,
                fold_override(width),
                family,
                ini.aggregation,
                ini.dilated,
            )?;
            writeln!(out, "stage {idx}: {width} channels, map {}x{}", cfg.rows, cfg.cols).unwrap();
            let set = cfg.filter_set(1)?;
            for spec in set.effective_specs(cfg.rows, cfg.cols)? {
                writeln!(out, "{}", overlap_summary(&spec, cfg.rows, cfg.cols, FoldKind::RowMajor)?)
                    .unwrap();
            }
            let dropped = set.discarded_specs(cfg.rows, cfg.cols);
            if !dropped.is_empty() {
                let labels: Vec<String> = dropped.iter().map(|s| s.label()).collect();
                writeln!(out, "    discarded (do not fit): {}", labels.join(", ")).unwrap();
            }
        }
    }
    Ok(out)
}
