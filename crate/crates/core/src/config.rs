//! Run configuration: one JSON document covering model, dataset, training,
//! paths, guidance and export. Unknown keys are rejected by name.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::guidance::{Guidance, PhotometricOracle, RemoteGuidance};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Overrides the guidance endpoint with `host:port`.
pub const GUIDANCE_ENV: &str = "ATOM_GUIDANCE_ADDR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { dataset: "data".into(), checkpoints: "checkpoints".into(), output: "out".into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Photometric oracle over the dataset.
    Oracle,
    /// Service at `addr` (`host:port`).
    Remote,
    /// Service spawned from `command`, spoken to over its stdio.
    Stdio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub addr: Option<String>,
    pub command: Vec<String>,
    pub timeout_ms: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { mode: GuidanceMode::Oracle, addr: None, command: Vec::new(), timeout_ms: 30_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Tet grid resolution for `infer`/`export`.
    pub grid_resolution: usize,
    /// Square size of `render` output.
    pub render_resolution: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { grid_resolution: 48, render_resolution: 128 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub guidance: GuidanceConfig,
    pub export: ExportConfig,
    /// Save a checkpoint every this many iterations (0 = stage ends only).
    pub save_every: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `ATOM_GUIDANCE_ADDR`, given its value.
    pub fn apply_guidance_override(&mut self, addr: Option<String>) {
        if let Some(a) = addr.filter(|a| !a.trim().is_empty()) {
            self.guidance.mode = GuidanceMode::Remote;
            self.guidance.addr = Some(a.trim().to_string());
        }
    }

    pub fn apply_env(&mut self) {
        self.apply_guidance_override(std::env::var(GUIDANCE_ENV).ok());
    }

    pub fn open_dataset(&self) -> Result<Dataset> {
        Dataset::open(&self.paths.dataset)
    }

    /// Fills empty prompt lists from the dataset manifest.
    pub fn resolve_prompts(&mut self, ds: &Dataset) {
        if self.train.seen.is_empty() {
            self.train.seen = ds.manifest.seen();
        }
        if self.train.unseen.is_empty() {
            self.train.unseen = ds.manifest.unseen();
        }
    }

    pub fn open_guidance(&self, dataset: Option<Dataset>) -> Result<Box<dyn Guidance>> {
        let timeout = Duration::from_millis(self.guidance.timeout_ms);
        Ok(match self.guidance.mode {
            GuidanceMode::Oracle => {
                let ds = match dataset {
                    Some(d) => d,
                    None => self.open_dataset()?,
                };
                Box::new(PhotometricOracle { targets: ds })
            }
            GuidanceMode::Remote => {
                let addr = self.guidance.addr.as_deref().ok_or_else(|| Error::Config("remote guidance needs addr".into()))?;
                Box::new(RemoteGuidance::connect_tcp(addr, timeout)?)
            }
            GuidanceMode::Stdio => {
                let (prog, args) = self
                    .guidance
                    .command
                    .split_first()
                    .ok_or_else(|| Error::Config("stdio guidance needs a command".into()))?;
                Box::new(RemoteGuidance::spawn_stdio(prog, args, timeout)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_json(r#"{"train": {"stage1": {"iterations": 5, "lr_typo": 1}}}"#).unwrap_err();
        assert!(e.to_string().contains("lr_typo"), "{e}");
        let e = RunConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"stage1": {"iterations": 5}}, "guidance": {"mode": "remote", "addr": "h:1"}}"#).unwrap();
        assert_eq!(c.train.stage1.iterations, 5);
        assert_eq!(c.train.stage1.lr, 4e-4);
        assert_eq!(c.guidance.mode, GuidanceMode::Remote);
        assert_eq!(c.guidance.addr.as_deref(), Some("h:1"));
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn env_override() {
        let mut c = RunConfig::default();
        c.apply_guidance_override(None);
        assert_eq!(c.guidance.mode, GuidanceMode::Oracle);
        c.apply_guidance_override(Some("127.0.0.1:7000".into()));
        assert_eq!(c.guidance.mode, GuidanceMode::Remote);
        assert_eq!(c.guidance.addr.as_deref(), Some("127.0.0.1:7000"));
    }
}
