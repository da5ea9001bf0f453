//! Run configuration: defaults, then a flat dotted JSON file, then dotted
//! command-line flags, then the canonical flags of each subcommand.

use std::path::{Path, PathBuf};

use seass::decode::DecodeConfig;
use seass::model::ModelConfig;
use seass::rouge::EvalConfig;
use seass::synth::SynthSpec;
use seass::train::OptimizerConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    /// Vocabulary frequency threshold.
    pub min_count: usize,
    /// `preprocess` drops pairs whose source is shorter than this.
    pub min_source_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            min_source_len: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub src: Option<PathBuf>,
    pub tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub vocab_src: Option<PathBuf>,
    pub vocab_tgt: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cand: Option<PathBuf>,
    pub refs: Option<PathBuf>,
    pub buckets: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: OptimizerConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub synth: SynthSpec,
    pub text: TextConfig,
    pub paths: Paths,
    /// Greedy instead of beam decoding.
    pub greedy: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            train: OptimizerConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthSpec::default(),
            text: TextConfig::default(),
            paths: Paths::default(),
            greedy: false,
        }
    }
}

/// Problems with configuration keys or values; reported as usage errors.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("flag --{0} needs a value")]
    MissingValue(String),
    #[error("config file {path}: {reason}")]
    File { path: PathBuf, reason: String },
}

/// Dotted overrides accumulated in order; later entries win.
#[derive(Debug, Clone, Default)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn set(&mut self, key: impl Into<String>, value: Value) {
        self.0.push((key.into(), value));
    }

    pub fn extend(&mut self, other: Overrides) {
        self.0.extend(other.0);
    }

    /// Flat `{"section.key": value}` object.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let file_err = |reason: String| ConfigError::File {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(file_err("expected a JSON object of dotted keys".into()));
        };
        Ok(Self(map.into_iter().collect()))
    }

    /// Applies every override to the defaults and validates the result.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        for (key, value) in &self.0 {
            set_dotted(&mut tree, key, value.clone())?;
        }
        serde_json::from_value(tree).map_err(|e| {
            let reason = e.to_string();
            let key = self
                .0
                .iter()
                .rev()
                .map(|(k, _)| k.as_str())
                .find(|k| reason.contains(k.rsplit('.').next().unwrap_or(k)))
                .unwrap_or("configuration")
                .to_string();
            ConfigError::BadValue { key, reason }
        })
    }
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let unknown = || ConfigError::UnknownKey(key.to_string());
    let root: &mut Map<String, Value> = tree.as_object_mut().expect("config is an object");
    let slot = match key.split_once('.') {
        None => root.get_mut(key).filter(|v| !v.is_object()),
        Some((section, field)) => root
            .get_mut(section)
            .and_then(Value::as_object_mut)
            .and_then(|s| s.get_mut(field)),
    };
    *slot.ok_or_else(unknown)? = value;
    Ok(())
}

/// Command-line strings are read as JSON when they parse (numbers, booleans,
/// `null`, arrays) and as plain strings otherwise.
pub fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Removes `--section.key value` and `--section.key=value` pairs from `args`
/// and returns them as overrides.
pub fn extract_dotted(args: Vec<String>) -> Result<(Vec<String>, Overrides), ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut found = Overrides::default();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--" {
            rest.push(arg);
            rest.extend(it.by_ref());
            break;
        }
        let Some(name) = arg.strip_prefix("--").filter(|n| n.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(arg);
            continue;
        };
        let (key, raw) = match name.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| ConfigError::MissingValue(name.to_string()))?;
                (name.to_string(), v)
            }
        };
        found.set(key, parse_scalar(&raw));
    }
    Ok((rest, found))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn defaults_resolve() {
        assert_eq!(Overrides::default().resolve().unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_flags_are_extracted_in_order() {
        let (rest, ov) = extract_dotted(argv("seass train --model.emb_dim 32 --seed 7 --train.alpha=0.5 --model.emb_dim=16")).unwrap();
        assert_eq!(rest, argv("seass train --seed 7"));
        let cfg = ov.resolve().unwrap();
        assert_eq!(cfg.model.emb_dim, 16);
        assert_eq!(cfg.train.alpha, 0.5);
    }

    #[test]
    fn values_after_double_dash_are_left_alone() {
        let (rest, ov) = extract_dotted(argv("a -- --model.emb_dim 3")).unwrap();
        assert_eq!(rest, argv("a -- --model.emb_dim 3"));
        assert_eq!(ov.resolve().unwrap(), RunConfig::default());
    }

    #[test]
    fn strings_and_options() {
        let mut ov = Overrides::default();
        ov.set("synth.kind", parse_scalar("copy"));
        ov.set("decode.fixed_len", parse_scalar("8"));
        ov.set("eval.metrics", json!(["rouge2"]));
        let cfg = ov.resolve().unwrap();
        assert_eq!(cfg.synth.kind, seass::synth::SynthKind::Copy);
        assert_eq!(cfg.decode.fixed_len, Some(8));
        assert_eq!(cfg.eval.metrics, vec![seass::rouge::Metric::Rouge2]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut ov = Overrides::default();
        ov.set("model.nope", json!(1));
        assert!(matches!(ov.resolve(), Err(ConfigError::UnknownKey(_))));
        let mut ov = Overrides::default();
        ov.set("model", json!(1));
        assert!(matches!(ov.resolve(), Err(ConfigError::UnknownKey(_))));
        let mut ov = Overrides::default();
        ov.set("model.emb_dim", json!("wide"));
        assert!(matches!(ov.resolve(), Err(ConfigError::BadValue { .. })));
        assert!(matches!(extract_dotted(argv("x --model.emb_dim")), Err(ConfigError::MissingValue(_))));
    }

    #[test]
    fn file_values_are_overridden_later() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"model.emb_dim": 40, "seed": 3, "train.steps": 9}"#).unwrap();
        let mut ov = Overrides::from_file(&path).unwrap();
        ov.set("seed", json!(4));
        let cfg = ov.resolve().unwrap();
        assert_eq!((cfg.model.emb_dim, cfg.seed, cfg.train.steps), (40, 4, 9));
    }
}
