//! The merged run configuration: model, loss, trainer, and generator settings
//! in one document with defaults for every field. Unknown keys are rejected.

use anyhow::{Context, Result};
use mvhand_core::data::GenConfig;
use mvhand_core::losses::LossConfig;
use mvhand_core::network::ModelConfig;
use mvhand_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub generator: GenConfig,
    /// Optional hand template asset; the procedural toy template otherwise.
    pub template_asset: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| {
                anyhow::Error::new(mvhand_core::Error::Config(format!(
                    "bad config {}: {e}",
                    path.display()
                )))
            })?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Print the resolved config and echo it into the output directory.
    pub fn announce_and_echo(&self, out_dir: &Path) -> Result<()> {
        let pretty = serde_json::to_string_pretty(self)?;
        println!("resolved config:\n{pretty}");
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("resolved_config.json"), pretty)?;
        Ok(())
    }
}

/// Resolve an output path under `MVHAND_OUT_ROOT` when that is set and the
/// path is relative.
pub fn resolve_out_dir(out: PathBuf) -> PathBuf {
    match std::env::var_os("MVHAND_OUT_ROOT") {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out,
    }
}
