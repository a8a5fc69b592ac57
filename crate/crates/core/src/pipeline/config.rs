use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::select::{ModelDims, SelectionParams};
use crate::surgery::SurgeryOptions;
use crate::tokenizer::DEFAULT_UNK_PENALTY;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Original SentencePiece model.
    pub tokenizer: PathBuf,
    /// Original safetensors checkpoint.
    pub checkpoint: PathBuf,
    pub target_corpus: PathBuf,
    pub secondary_corpus: PathBuf,
    pub output_dir: PathBuf,
    /// Text encoded with the pruned tokenizer during verification; defaults
    /// to the target corpus.
    pub sample_corpus: Option<PathBuf>,
}

/// Per-field overrides of the dimensions read from the checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimsOverride {
    pub v_old: Option<u64>,
    pub d_model: Option<u64>,
    pub n_vocab_matrices: Option<u64>,
    pub total_params_old: Option<u64>,
    pub bytes_per_param: Option<u64>,
}

impl DimsOverride {
    pub fn apply(&self, base: ModelDims) -> ModelDims {
        ModelDims {
            v_old: self.v_old.unwrap_or(base.v_old),
            d_model: self.d_model.unwrap_or(base.d_model),
            n_vocab_matrices: self.n_vocab_matrices.unwrap_or(base.n_vocab_matrices),
            total_params_old: self.total_params_old.unwrap_or(base.total_params_old),
            bytes_per_param: self.bytes_per_param.unwrap_or(base.bytes_per_param),
        }
    }
}

fn default_vocab_tensors() -> Vec<String> {
    vec!["shared.weight".to_owned(), "lm_head.weight".to_owned()]
}

fn default_unk_penalty() -> f32 {
    DEFAULT_UNK_PENALTY
}

fn default_jobs() -> usize {
    1
}

fn default_shard_lines() -> usize {
    8192
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub selection: SelectionParams,
    #[serde(default)]
    pub dims: DimsOverride,
    #[serde(default = "default_vocab_tensors")]
    pub vocab_tensor_names: Vec<String>,
    #[serde(default = "default_unk_penalty")]
    pub unk_penalty: f32,
    /// Worker threads for counting; 0 means one per core.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Sentences read per counting shard.
    #[serde(default = "default_shard_lines")]
    pub shard_lines: usize,
    #[serde(default)]
    pub surgery: SurgeryOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            selection: SelectionParams::default(),
            dims: DimsOverride::default(),
            vocab_tensor_names: default_vocab_tensors(),
            unk_penalty: default_unk_penalty(),
            jobs: default_jobs(),
            shard_lines: default_shard_lines(),
            surgery: SurgeryOptions::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{0}")]
    Invalid(String),
}

impl PipelineConfig {
    /// Reads a TOML or JSON (by `.json` extension) config. Relative paths are
    /// taken relative to the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let parse_err = |reason: String| ConfigError::Parse {
            path: path.to_owned(),
            reason,
        };
        let mut config: PipelineConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
        };
        let base = path.parent().unwrap_or(Path::new(""));
        config.paths.resolve_against(base);
        Ok(config)
    }

    /// Checks that inputs exist and settings are coherent. Creates nothing.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.paths;
        let inputs = [
            ("tokenizer", &p.tokenizer),
            ("checkpoint", &p.checkpoint),
            ("target_corpus", &p.target_corpus),
            ("secondary_corpus", &p.secondary_corpus),
        ];
        for (key, path) in inputs
            .into_iter()
            .chain(p.sample_corpus.iter().map(|s| ("sample_corpus", s)))
        {
            if path.as_os_str().is_empty() {
                return Err(ConfigError::Invalid(format!("paths.{key} is not set")));
            }
            if !path.is_file() {
                return Err(ConfigError::Invalid(format!(
                    "paths.{key}: {} does not exist or is not a file",
                    path.display()
                )));
            }
        }
        self.validate_output_dir()?;
        self.selection
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("selection: {e}")))?;
        if self.vocab_tensor_names.is_empty() {
            log::warn!("no vocabulary tensors configured; the checkpoint will only be repacked");
        }
        if !(self.unk_penalty.is_finite() && self.unk_penalty >= 0.0) {
            return Err(ConfigError::Invalid("unk_penalty must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn validate_output_dir(&self) -> Result<(), ConfigError> {
        let out = &self.paths.output_dir;
        if out.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("paths.output_dir is not set".into()));
        }
        if let Ok(meta) = fs::metadata(out) {
            if !meta.is_dir() {
                return Err(ConfigError::Invalid(format!(
                    "paths.output_dir: {} is not a directory",
                    out.display()
                )));
            }
            if meta.permissions().readonly() {
                return Err(ConfigError::Invalid(format!(
                    "paths.output_dir: {} is read-only",
                    out.display()
                )));
            }
        }
        Ok(())
    }

    /// Digest of every setting that affects artifact contents. Paths and
    /// parallelism are excluded; input contents are digested separately.
    pub fn settings_digest(&self) -> String {
        #[derive(Serialize)]
        struct Settings<'a> {
            selection: &'a SelectionParams,
            dims: &'a DimsOverride,
            vocab_tensor_names: &'a [String],
            unk_penalty: f32,
            surgery: &'a SurgeryOptions,
        }
        let bytes = serde_json::to_vec(&Settings {
            selection: &self.selection,
            dims: &self.dims,
            vocab_tensor_names: &self.vocab_tensor_names,
            unk_penalty: self.unk_penalty,
            surgery: &self.surgery,
        })
        .expect("settings serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn worker_threads(&self) -> usize {
        match self.jobs {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }

    pub fn sample_corpus(&self) -> &Path {
        self.paths.sample_corpus.as_deref().unwrap_or(&self.paths.target_corpus)
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.tokenizer);
        fix(&mut self.checkpoint);
        fix(&mut self.target_corpus);
        fix(&mut self.secondary_corpus);
        fix(&mut self.output_dir);
        if let Some(s) = self.sample_corpus.as_mut() {
            fix(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        fs::write(
            &toml_path,
            "jobs = 3\n[paths]\ntokenizer = \"t.model\"\n[selection]\nn_total = 50\nn_top_original = 1\nn_secondary = 2\nspecials = [\"<unk>\"]\n",
        )
        .unwrap();
        let json_path = dir.path().join("c.json");
        fs::write(
            &json_path,
            r#"{"jobs":3,"paths":{"tokenizer":"t.model"},"selection":{"n_total":50,"n_top_original":1,"n_secondary":2,"specials":["<unk>"]}}"#,
        )
        .unwrap();
        let a = PipelineConfig::load(&toml_path).unwrap();
        let b = PipelineConfig::load(&json_path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.paths.tokenizer, dir.path().join("t.model"));
        assert_eq!(a.selection.n_total, 50);
        assert_eq!(a.unk_penalty, 10.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "bogus = 1\n").unwrap();
        assert!(matches!(PipelineConfig::load(&p), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn missing_inputs_fail_validation() {
        let config = PipelineConfig::default();
        assert!(matches!(config.validate(), Err(ConfigError::Invalid(m)) if m.contains("tokenizer")));
    }

    #[test]
    fn dims_override_replaces_fields() {
        let o = DimsOverride {
            d_model: Some(768),
            ..Default::default()
        };
        let base = ModelDims {
            v_old: 10,
            d_model: 4,
            n_vocab_matrices: 2,
            total_params_old: 100,
            bytes_per_param: 4,
        };
        assert_eq!(o.apply(base).d_model, 768);
        assert_eq!(o.apply(base).v_old, 10);
    }
}
