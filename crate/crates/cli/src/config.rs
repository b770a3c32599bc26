//! Run configuration: one flat JSON object holding every training field plus
//! file paths and decoding defaults.

use std::path::{Path, PathBuf};

use paragan_core::decode::DecodeMode;
use paragan_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DecodeKind {
    Greedy,
    Sample,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paragraph_corpus: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            train_corpus: None,
            val_corpus: None,
            paragraph_corpus: None,
            out_dir: default_out_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeDefaults {
    pub decode: DecodeKind,
    pub beam: usize,
    pub decode_seed: u64,
}

impl Default for DecodeDefaults {
    fn default() -> Self {
        DecodeDefaults {
            decode: DecodeKind::Beam,
            beam: 2,
            decode_seed: 0,
        }
    }
}

impl DecodeDefaults {
    pub fn mode(&self) -> Result<DecodeMode, CliError> {
        Ok(match self.decode {
            DecodeKind::Greedy => DecodeMode::Greedy,
            DecodeKind::Sample => DecodeMode::Sample { seed: self.decode_seed },
            DecodeKind::Beam if self.beam == 0 => return Err(CliError::usage("beam must be at least 1")),
            DecodeKind::Beam => DecodeMode::Beam { width: self.beam },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: Paths,
    pub decode: DecodeDefaults,
}

const PATH_KEYS: [&str; 4] = ["train_corpus", "val_corpus", "paragraph_corpus", "out_dir"];
const DECODE_KEYS: [&str; 3] = ["decode", "beam", "decode_seed"];

fn take(obj: &mut Map<String, Value>, keys: &[&str]) -> Value {
    Value::Object(keys.iter().filter_map(|k| obj.remove_entry(*k)).collect())
}

fn parse_part<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::usage(format!("config: {e}")))
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        let Value::Object(mut obj) = v else {
            return Err(CliError::usage("config: expected a JSON object"));
        };
        let paths = parse_part(take(&mut obj, &PATH_KEYS))?;
        let decode = parse_part(take(&mut obj, &DECODE_KEYS))?;
        let train: TrainConfig = parse_part(Value::Object(obj))?;
        let cfg = RunConfig { train, paths, decode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        Self::from_value(v)
    }

    pub fn to_value(&self) -> Value {
        let mut obj = Map::new();
        for part in [
            serde_json::to_value(&self.train),
            serde_json::to_value(&self.paths),
            serde_json::to_value(&self.decode),
        ] {
            if let Ok(Value::Object(m)) = part {
                obj.extend(m);
            }
        }
        Value::Object(obj)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train
            .validate()
            .map_err(|e| CliError::usage(format!("config: {e}")))?;
        self.decode.mode()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_value(json!({})).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lambda, 0.001);
        assert_eq!(cfg.train.n_critic, 5);
        assert_eq!(cfg.decode.mode().unwrap(), DecodeMode::Beam { width: 2 });
    }

    #[test]
    fn round_trips_through_a_flat_object() {
        let cfg = RunConfig::from_value(json!({
            "lr": 0.002, "mode": "semi", "epochs": 3,
            "train_corpus": "a.jsonl", "out_dir": "o", "decode": "greedy"
        }))
        .unwrap();
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.paths.train_corpus.as_deref(), Some(Path::new("a.jsonl")));
        assert_eq!(RunConfig::from_value(cfg.to_value()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_value(json!({"learning_rate": 0.1})).unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_value(json!({"clip": 0.0})).unwrap_err();
        assert!(err.to_string().contains("clip"), "{err}");
        let err = RunConfig::from_value(json!({"beam": 0})).unwrap_err();
        assert!(err.to_string().contains("beam"), "{err}");
    }
}
