//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by `--set` pairs.

use std::path::{Path, PathBuf};

use gaze_core::data::SyntheticSceneSpec;
use gaze_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Environment variable naming the directory under which per-command outputs go when
/// neither `--out` nor `out` is given.
pub const OUT_ROOT_ENV: &str = "GAZE_OUT_ROOT";

pub const ECHO_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into `train.seed`, `data.scene.seed` and `gradcheck.seed` on resolution.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub field: FieldConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            field: FieldConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset written by `gen-data`. When absent, scenes are generated in memory from `scene`.
    pub dir: Option<PathBuf>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub scene: SyntheticSceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            train_samples: 2000,
            test_samples: 500,
            scene: SyntheticSceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Model,
    Oracle,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub predictor: PredictorKind,
    pub checkpoint: Option<PathBuf>,
    pub split: SplitName,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            predictor: PredictorKind::Model,
            checkpoint: None,
            split: SplitName::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub head: [f64; 2],
    pub direction: [f64; 2],
    pub size: usize,
    pub gammas: Vec<f64>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            head: [0.5, 0.5],
            direction: [1.0, 0.0],
            size: 16,
            gammas: vec![5.0, 2.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    pub seed: u64,
    /// Name of a check whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            seed: 0,
            corrupt: None,
        }
    }
}

/// Split `key=value` into a dotted key path and a JSON value. Values that are not valid
/// JSON are taken as plain strings.
pub fn parse_override(pair: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{pair}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override `{pair}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

/// Set `path` inside `root`, creating missing object members along the way.
pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("cannot set `{}`: `{}` is not a section", path.join("."), path[..i].join("."))))?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    Ok(())
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

/// Command-line inputs that shape the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

impl RunConfig {
    /// Layer config-file text and `key=value` overrides over the defaults.
    pub fn from_layers(file: Option<&str>, set: &[String]) -> Result<RunConfig, CliError> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(text) = file {
            let layer: Value = serde_json::from_str(text).map_err(|e| CliError::config(format!("config file: {e}")))?;
            if !layer.is_object() {
                return Err(CliError::config("config file: top level must be a JSON object"));
            }
            merge(&mut tree, layer);
        }
        for pair in set {
            let (path, value) = parse_override(pair)?;
            apply_override(&mut tree, &path, value)?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::config(format!("invalid configuration: {e}")))
    }

    /// Apply file, overrides and flags, then fill in derived values.
    pub fn resolve(overrides: &Overrides, command: &str) -> Result<RunConfig, CliError> {
        let text = match &overrides.config {
            Some(path) => Some(
                std::fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?,
            ),
            None => None,
        };
        let mut cfg = RunConfig::from_layers(text.as_deref(), &overrides.set)?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = Some(out.clone());
        }
        cfg.train.seed = cfg.seed;
        cfg.data.scene.seed = cfg.seed;
        cfg.gradcheck.seed = cfg.seed;
        if cfg.out.is_none() {
            let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            cfg.out = Some(root.join(command));
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("output directory is filled in by resolve")
    }

    /// Write the resolved configuration into the output directory.
    pub fn echo(&self) -> Result<PathBuf, CliError> {
        let dir = self.out_dir();
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_parse_as_json_or_string() {
        let (p, v) = parse_override("train.lr=0.01").unwrap();
        assert_eq!(p, vec!["train", "lr"]);
        assert_eq!(v, Value::from(0.01));
        assert_eq!(parse_override("eval.predictor=oracle").unwrap().1, Value::from("oracle"));
        assert_eq!(parse_override("train.gammas=[1]").unwrap().1, serde_json::json!([1]));
        assert_eq!(parse_override("a=b=c").unwrap().1, Value::from("b=c"));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
        assert!(parse_override("=1").is_err());
    }

    #[test]
    fn overrides_cannot_descend_into_scalars() {
        let mut tree = serde_json::json!({"seed": 1, "data": {"dir": null}});
        assert!(apply_override(&mut tree, &["seed".into(), "x".into()], Value::from(2)).is_err());
        apply_override(&mut tree, &["data".into(), "dir".into(), "x".into()], Value::from(2)).unwrap();
        assert_eq!(tree["data"]["dir"]["x"], 2);
    }

    #[test]
    fn nested_merge_keeps_untouched_members() {
        let mut base = serde_json::json!({"train": {"lr": 1, "sigma": 2}, "seed": 0});
        merge(&mut base, serde_json::json!({"train": {"lr": 5}}));
        assert_eq!(base, serde_json::json!({"train": {"lr": 5, "sigma": 2}, "seed": 0}));
    }
}
