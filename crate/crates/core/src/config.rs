//! Pipeline configuration as `section.key = value` text.
//!
//! Values are JSON literals (`256`, `0.5`, `true`, `[0.4, 0.8]`); anything
//! else is read as a string. Unknown keys are rejected.
//!
//! ```text
//! seed = 7
//! synth.canvas_size = 128
//! train.total_iters = 4000
//! eval.chance_trials = 100
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::nnet::{SubitNetSpec, TrainConfig};
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {reason}")]
    Syntax { source_name: String, line: usize, reason: String },
    #[error("{source_name}: {reason}")]
    Invalid { source_name: String, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub chance_trials: usize,
    pub iou_threshold: f64,
    pub knn_k: usize,
    pub ndcg_h: usize,
    pub novelty_threshold: f64,
    pub top_patches: usize,
    pub patch_fraction: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            chance_trials: 100,
            iou_threshold: 0.5,
            knn_k: 75,
            ndcg_h: 20,
            novelty_threshold: 0.3,
            top_patches: 9,
            patch_fraction: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitOptions {
    pub train_fraction: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: SubitNetSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub split: SplitOptions,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl PipelineConfig {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut root = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: &str| ConfigError::Syntax {
                source_name: source_name.to_string(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected key = value"))?;
            let key = key.trim();
            if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
                return Err(syntax("empty key"));
            }
            let path: Vec<&str> = key.split('.').collect();
            let mut node = &mut root;
            for (depth, part) in path.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| syntax(&format!("{} is not a section", path[..depth].join("."))))?;
                if !obj.contains_key(*part) {
                    return Err(syntax(&format!("unknown key {key}")));
                }
                node = obj.get_mut(*part).expect("checked");
            }
            if node.is_object() {
                return Err(syntax(&format!("{key} is a section, not a value")));
            }
            *node = parse_value(value.trim());
        }
        serde_json::from_value(root).map_err(|e| ConfigError::Invalid {
            source_name: source_name.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Every key with its resolved value, sorted, one per line, preceded by
    /// the tool version as a comment.
    pub fn to_text(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
            match v {
                Value::Object(m) => {
                    for (k, child) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                other => out.push(format!("{prefix} = {other}")),
            }
        }
        let value = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        walk("", &value, &mut lines);
        lines.sort();
        let mut text = format!("# subitize {}\n", crate::VERSION);
        for l in lines {
            text.push_str(&l);
            text.push('\n');
        }
        text
    }

    /// Writes `config.resolved` into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join("config.resolved");
        std::fs::write(&path, self.to_text()).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}
