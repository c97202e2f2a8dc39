//! Flat key=value run configuration for training.
//!
//! The format is line-oriented: `key=value`, `#` comments, blank lines
//! ignored. A `version` key must come first so old run records stay
//! readable. Unknown keys are rejected with their line number.
//!
//! ```text
//! version=1
//! train_manifest=data/manifest.tsv
//! out_dir=runs/demo
//! epochs=50
//! batch_size=4
//! lr=0.001
//! optimizer=adam
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::{
    AugmentConfig, LossConfig, OptimizerConfig, OptimizerMode, ScheduleConfig, TrainOptions,
};

/// Element precision of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Parsed training run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train_manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub network: NetworkConfig,
    pub options: TrainOptions,
    pub model_seed: u64,
    pub precision: Precision,
}

struct Entry {
    line: usize,
    value: String,
}

fn err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

const KNOWN_KEYS: &[&str] = &[
    "version",
    "train_manifest",
    "val_manifest",
    "out_dir",
    "resume",
    "channel_base",
    "stages",
    "bottlenecks_per_stage",
    "sisl_count",
    "width_ratio",
    "d_switch",
    "batch_norm_decoder",
    "depth_scale",
    "epsilon",
    "epochs",
    "batch_size",
    "lr",
    "optimizer",
    "weight_decay",
    "lambda_smooth",
    "patience",
    "lr_factor",
    "seed",
    "model_seed",
    "precision",
    "augment",
    "flip_h",
    "flip_v",
    "rot_max_deg",
    "noise_sigma",
];

/// Parse a run configuration file. Relative paths resolve against the
/// file's directory.
pub fn parse_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_run_config_str(&text, base)
}

pub fn parse_run_config_str(text: &str, base: &Path) -> Result<RunConfig> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(lineno, line, "expected key=value"));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(err(lineno, &key, "unknown key"));
        }
        if entries
            .insert(key.clone(), Entry { line: lineno, value })
            .is_some()
        {
            return Err(err(lineno, &key, "duplicate key"));
        }
    }

    let version = require(&entries, "version")?;
    let version_val: u32 = parse_field(version, "version")?;
    if version_val != 1 {
        return Err(err(version.line, "version", "only version 1 is supported"));
    }

    let resolve = |p: &str| {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };

    let train_manifest = resolve(&require(&entries, "train_manifest")?.value);
    let val_manifest = entries.get("val_manifest").map(|e| resolve(&e.value));
    let out_dir = entries
        .get("out_dir")
        .map(|e| resolve(&e.value))
        .unwrap_or_else(|| base.join("run"));
    let resume = entries.get("resume").map(|e| resolve(&e.value));

    let defaults = NetworkConfig::default();
    let network = NetworkConfig {
        channel_base: opt(&entries, "channel_base", defaults.channel_base)?,
        stages: opt(&entries, "stages", defaults.stages)?,
        bottlenecks_per_stage: opt(
            &entries,
            "bottlenecks_per_stage",
            defaults.bottlenecks_per_stage,
        )?,
        sisl_count: opt(&entries, "sisl_count", defaults.sisl_count)?,
        width_ratio: opt(&entries, "width_ratio", defaults.width_ratio)?,
        d_switch: opt(&entries, "d_switch", defaults.d_switch)?,
        batch_norm_decoder: opt_bool(&entries, "batch_norm_decoder", defaults.batch_norm_decoder)?,
        depth_scale: opt(&entries, "depth_scale", defaults.depth_scale)?,
        epsilon: opt(&entries, "epsilon", defaults.epsilon)?,
    };
    if let Err(e) = network.validate() {
        return Err(Error::Config {
            line: 0,
            field: "network".into(),
            message: format!("{e}"),
        });
    }

    let lr: f64 = opt(&entries, "lr", 1e-3)?;
    let mode = match entries.get("optimizer").map(|e| e.value.as_str()) {
        None | Some("adam") => OptimizerMode::Adam,
        Some("adamw") => OptimizerMode::AdamW,
        Some(other) => {
            let line = entries.get("optimizer").map(|e| e.line).unwrap_or(0);
            return Err(err(line, "optimizer", format!("unknown optimizer {other:?}")));
        }
    };
    let default_wd = match mode {
        OptimizerMode::Adam => 0.0,
        OptimizerMode::AdamW => 0.01,
    };
    let optimizer = OptimizerConfig {
        mode,
        lr,
        weight_decay: opt(&entries, "weight_decay", default_wd)?,
        ..OptimizerConfig::adam(lr)
    };

    let augment_on = opt_bool(&entries, "augment", true)?;
    let augment = augment_on.then(|| {
        Ok::<AugmentConfig, Error>(AugmentConfig {
            flip_h: opt_bool(&entries, "flip_h", true)?,
            flip_v: opt_bool(&entries, "flip_v", true)?,
            rot_max_deg: opt(&entries, "rot_max_deg", 5.0)?,
            noise_sigma: opt(&entries, "noise_sigma", 0.01)?,
            seed: 0,
        })
    });
    let augment = match augment {
        Some(Ok(a)) => Some(a),
        Some(Err(e)) => return Err(e),
        None => None,
    };

    let seed: u64 = opt(&entries, "seed", 0)?;
    let options = TrainOptions {
        epochs: opt(&entries, "epochs", 50)?,
        batch_size: opt(&entries, "batch_size", 4)?,
        loss: LossConfig {
            lambda_smooth: opt(&entries, "lambda_smooth", 0.1)?,
        },
        optimizer,
        schedule: ScheduleConfig {
            patience: opt(&entries, "patience", 3)?,
            factor: opt(&entries, "lr_factor", 0.5)?,
        },
        augment,
        seed,
        checkpoint_dir: Some(out_dir.clone()),
    };

    let precision = match entries.get("precision").map(|e| e.value.as_str()) {
        None | Some("f32") => Precision::F32,
        Some("f64") => Precision::F64,
        Some(other) => {
            let line = entries.get("precision").map(|e| e.line).unwrap_or(0);
            return Err(err(line, "precision", format!("unknown precision {other:?}")));
        }
    };

    Ok(RunConfig {
        train_manifest,
        val_manifest,
        out_dir,
        resume,
        network,
        options,
        model_seed: opt(&entries, "model_seed", seed)?,
        precision,
    })
}

fn require<'a>(entries: &'a BTreeMap<String, Entry>, key: &str) -> Result<&'a Entry> {
    entries
        .get(key)
        .ok_or_else(|| err(0, key, "missing required key"))
}

fn parse_field<T: std::str::FromStr>(entry: &Entry, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    entry
        .value
        .parse()
        .map_err(|e| err(entry.line, key, format!("{e}")))
}

fn opt<T: std::str::FromStr>(entries: &BTreeMap<String, Entry>, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match entries.get(key) {
        Some(entry) => parse_field(entry, key),
        None => Ok(default),
    }
}

fn opt_bool(entries: &BTreeMap<String, Entry>, key: &str, default: bool) -> Result<bool> {
    match entries.get(key) {
        Some(entry) => match entry.value.as_str() {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(err(entry.line, key, format!("expected true/false, got {other:?}"))),
        },
        None => Ok(default),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_run_config_str(
            "version=1\ntrain_manifest=m.tsv\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(cfg.train_manifest, Path::new("/data/m.tsv"));
        assert_eq!(cfg.options.epochs, 50);
        assert_eq!(cfg.network.channel_base, 32);
        assert_eq!(cfg.precision, Precision::F32);
        assert!(cfg.options.augment.is_some());
    }

    #[test]
    fn unknown_key_reports_line_and_field() {
        let e = parse_run_config_str(
            "version=1\ntrain_manifest=m.tsv\nbogus=3\n",
            Path::new("."),
        )
        .unwrap_err();
        let msg = format!("{e}");
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn bad_value_reports_line_and_field() {
        let e = parse_run_config_str(
            "version=1\ntrain_manifest=m.tsv\nepochs=soon\n",
            Path::new("."),
        )
        .unwrap_err();
        let msg = format!("{e}");
        assert!(msg.contains("line 3") && msg.contains("epochs"), "{msg}");
    }

    #[test]
    fn missing_version_is_rejected() {
        assert!(parse_run_config_str("train_manifest=m.tsv\n", Path::new(".")).is_err());
    }

    #[test]
    fn adamw_defaults_to_published_decay() {
        let cfg = parse_run_config_str(
            "version=1\ntrain_manifest=m.tsv\noptimizer=adamw\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.options.optimizer.mode, OptimizerMode::AdamW);
        assert_eq!(cfg.options.optimizer.weight_decay, 0.01);
    }

    #[test]
    fn augment_can_be_disabled() {
        let cfg = parse_run_config_str(
            "version=1\ntrain_manifest=m.tsv\naugment=false\n",
            Path::new("."),
        )
        .unwrap();
        assert!(cfg.options.augment.is_none());
    }
}
