//! Resolved per-command configuration.
//!
//! Layers, lowest first: built-in defaults, top-level keys of the config
//! file that the command knows, the file's section named after the command,
//! then command-line flags. Unknown keys in the command section are errors.

use std::path::{Path, PathBuf};

use carrier_core::corpus::{Family, Regime};
use carrier_core::downstream::ExperimentConfig;
use carrier_core::probe::{GenerationMethod, SurfaceGenerationConfig};
use carrier_core::reduce::DEFAULT_VARIANCE_THRESHOLD;
use carrier_core::surface::ResidualKind;
use carrier_core::validity::ValidityConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{AppError, Result};
use crate::io::EmbeddingFormat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub families: Vec<Family>,
    pub regimes: Vec<Regime>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { families: vec![Family::A], regimes: vec![Regime::C1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub corpus: PathBuf,
    pub endpoint: String,
    pub batch_size: usize,
    pub parallelism: usize,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub output: String,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            corpus: PathBuf::new(),
            endpoint: String::new(),
            batch_size: 256,
            parallelism: 4,
            timeout_secs: 60.0,
            max_retries: 3,
            output: "embeddings.cpge".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// One embeddings file per class.
    pub embeddings: Vec<PathBuf>,
    /// Optional corpus files paired with `embeddings` by position.
    pub corpus: Vec<PathBuf>,
    pub format: Option<EmbeddingFormat>,
    pub variance_threshold: f64,
    pub degrees: Vec<u32>,
    /// Degree of the carrier written to the model file.
    pub model_degree: u32,
    /// Fraction of rows held out for validation residuals; 0 disables.
    pub holdout: f64,
    pub seed: u64,
    pub residual_kind: ResidualKind,
    pub epsilon: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            embeddings: Vec::new(),
            corpus: Vec::new(),
            format: None,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            degrees: vec![1, 2, 3],
            model_degree: 2,
            holdout: 0.0,
            seed: 0,
            residual_kind: ResidualKind::NormalizedSurface,
            epsilon: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub embeddings: Vec<PathBuf>,
    /// Model files paired with `embeddings` by position.
    pub models: Vec<PathBuf>,
    pub fit_inline: bool,
    pub format: Option<EmbeddingFormat>,
    pub variance_threshold: f64,
    pub degree: u32,
    pub methods: Vec<GenerationMethod>,
    pub n_synth: Vec<usize>,
    pub seed: u64,
    pub sigma_scale: f64,
    pub surface: SurfaceGenerationConfig,
    pub validity: ValidityConfig,
    pub save_batches: bool,
    /// Also write batches mapped back to the ambient space.
    pub ambient_batches: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            embeddings: Vec::new(),
            models: Vec::new(),
            fit_inline: false,
            format: None,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            degree: 2,
            methods: GenerationMethod::ALL.to_vec(),
            n_synth: vec![3000],
            seed: 0,
            sigma_scale: 0.5,
            surface: SurfaceGenerationConfig::default(),
            validity: ValidityConfig::default(),
            save_batches: true,
            ambient_batches: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamConfig {
    pub corpus: PathBuf,
    pub embeddings: PathBuf,
    pub format: Option<EmbeddingFormat>,
    pub ablate: bool,
    /// k for the ablation table; defaults to the largest requested k.
    pub ablate_k: Option<usize>,
    pub experiment: ExperimentConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            corpus: PathBuf::new(),
            embeddings: PathBuf::new(),
            format: None,
            ablate: false,
            ablate_k: None,
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Directory holding the reports to render; defaults to the output directory.
    pub input: Option<PathBuf>,
}

/// Reads a config file: a single JSON object.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(AppError::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(AppError::Config(format!("{}: {e}", path.display()))),
    }
}

/// Overlays `patch` on `base`. Objects merge key by key; any other value
/// replaces. Keys absent from `base` are rejected.
pub fn merge_strict(base: &mut Value, patch: &Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge_strict(slot, v, &here)?,
                    None => return Err(AppError::Config(format!("unknown key `{here}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Resolves the config for `command`.
pub fn resolve<T>(command: &str, file: Option<&Map<String, Value>>, flags: &Value) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(T::default())?;
    if let Some(file) = file {
        let defaults = value.as_object().cloned().unwrap_or_default();
        let shared: Map<String, Value> = file
            .iter()
            .filter(|(k, v)| defaults.contains_key(*k) && !is_command_section(k, v))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        merge_strict(&mut value, &Value::Object(shared), "")?;
        if let Some(section) = file.get(command) {
            if !section.is_object() {
                return Err(AppError::Config(format!("section `{command}` must be an object")));
            }
            merge_strict(&mut value, section, command)?;
        }
    }
    merge_strict(&mut value, flags, "")?;
    serde_json::from_value(value).map_err(|e| AppError::Config(e.to_string()))
}

fn is_command_section(key: &str, value: &Value) -> bool {
    value.is_object() && ["corpus", "embed", "fit", "probe", "downstream", "report"].contains(&key)
}

/// Builds a flag overlay from `(dotted.path, value)` pairs, skipping `None`.
pub fn overlay(pairs: Vec<(&str, Option<Value>)>) -> Value {
    let mut root = Value::Object(Map::new());
    for (path, v) in pairs {
        let Some(v) = v else { continue };
        let mut cur = &mut root;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let map = cur.as_object_mut().expect("overlay nodes are objects");
            if i + 1 == parts.len() {
                map.insert((*part).to_string(), v.clone());
                break;
            }
            cur = map.entry((*part).to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
    }
    root
}
