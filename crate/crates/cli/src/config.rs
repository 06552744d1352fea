use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use headlab::{DitConfig, TrainConfig};
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    pub noise: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: DitConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Reads a TOML config, or JSON when the extension is `.json`.
pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("config {}", path.display()))?
    };
    cfg.model.validate()?;
    cfg.train.validate()?;
    anyhow::ensure!(cfg.data.count > 0, "data.count must be positive");
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml");
        let cfg = load(&path).unwrap();
        assert_eq!(cfg.model, DitConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
    }
}
