//! Run configuration: strict JSON with every section optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdtm::ptr::{EndpointTable, ProviderSpec};
use sdtm::schedule::ScheduleConfig;
use sdtm::sim::{ModelShape, SdtmParams, TrajectoryConfig};
use sdtm::Parallelism;

use crate::error::CliError;

/// Overrides the remote categorizer base URL from the config.
pub const CATEGORIZER_URL_ENV: &str = "SDTM_CATEGORIZER_URL";

/// A preset name or explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShapeSpec {
    Preset(String),
    Explicit(ModelShape),
}

impl Default for ShapeSpec {
    fn default() -> Self {
        ShapeSpec::Preset("toy".into())
    }
}

impl ShapeSpec {
    pub fn resolve(&self) -> Result<ModelShape, CliError> {
        let shape = match self {
            ShapeSpec::Preset(name) => ModelShape::preset(name)
                .ok_or_else(|| CliError::Config(format!("unknown shape preset {name:?}")))?,
            ShapeSpec::Explicit(s) => s.clone(),
        };
        shape.validate()?;
        Ok(shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtrConfig {
    pub prompt: String,
    pub alpha: f64,
    pub endpoints: Option<EndpointTable>,
    pub provider: Option<ProviderSpec>,
}

impl Default for PtrConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            alpha: 1.5,
            endpoints: None,
            provider: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    /// Directory for `run` and `analyze` outputs when `--out` is absent.
    pub dir: Option<PathBuf>,
    /// Ratio-threshold map used by `run` when `--map` is absent.
    pub map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub shape: ShapeSpec,
    pub schedule: ScheduleConfig,
    pub trajectory: TrajectoryConfig,
    pub merging: SdtmParams,
    pub ptr: Option<PtrConfig>,
    /// Seeds the model weights.
    pub seed: u64,
    pub parallelism: Parallelism,
    pub output: OutputPaths,
}

fn resolve_path(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

impl RunConfig {
    /// Reads and validates a config file. Relative paths inside resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent();
        if let Some(PtrConfig {
            provider: Some(ProviderSpec::File { path: p }),
            ..
        }) = cfg.ptr.as_mut()
        {
            *p = resolve_path(base, p);
        }
        for p in [&mut cfg.output.dir, &mut cfg.output.map]
            .into_iter()
            .flatten()
        {
            *p = resolve_path(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let shape = self.shape.resolve()?;
        self.schedule.validate()?;
        self.trajectory.validate()?;
        self.merging.validate()?;
        let t = &self.trajectory;
        if t.steps != self.schedule.total_steps {
            return Err(CliError::Config(format!(
                "trajectory has {} steps, schedule has {}",
                t.steps, self.schedule.total_steps
            )));
        }
        if (t.height, t.width, t.dim) != (shape.grid_height, shape.grid_width, shape.model_dim) {
            return Err(CliError::Config(format!(
                "trajectory grid {}x{}x{} does not match shape {}x{}x{}",
                t.height, t.width, t.dim, shape.grid_height, shape.grid_width, shape.model_dim
            )));
        }
        if let Some(ptr) = &self.ptr {
            if !(ptr.alpha > 1.0 && ptr.alpha.is_finite()) {
                return Err(CliError::Config(format!(
                    "ptr.alpha must exceed 1, got {}",
                    ptr.alpha
                )));
            }
            if let Some(e) = &ptr.endpoints {
                e.validate()?;
            }
            if let Some(ProviderSpec::File { path }) = &ptr.provider {
                if !path.is_file() {
                    return Err(CliError::Config(format!(
                        "annotation file {} not found",
                        path.display()
                    )));
                }
            }
        }
        if let Some(map) = &self.output.map {
            if !map.is_file() {
                return Err(CliError::Config(format!(
                    "map file {} not found",
                    map.display()
                )));
            }
        }
        Ok(())
    }

    /// The provider after applying the environment override.
    pub fn provider(&self) -> Option<ProviderSpec> {
        let configured = self.ptr.as_ref().and_then(|p| p.provider.clone());
        match std::env::var(CATEGORIZER_URL_ENV) {
            Ok(url) if !url.trim().is_empty() => {
                let timeout_secs = match configured {
                    Some(ProviderSpec::Remote { timeout_secs, .. }) => timeout_secs,
                    _ => sdtm::ptr::DEFAULT_REMOTE_TIMEOUT.as_secs_f64(),
                };
                Some(ProviderSpec::Remote { url, timeout_secs })
            }
            _ => configured,
        }
    }

    /// SHA-256 of the canonical JSON form. Parallelism is left out since
    /// it never changes results.
    pub fn sha256(&self) -> String {
        let normalized = RunConfig {
            parallelism: Parallelism::default(),
            ..self.clone()
        };
        let canonical = serde_json::to_string(&normalized).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
