//! Run manifests for `mine` and `ablate`.

use std::fs;
use std::path::{Path, PathBuf};

use alphaloop::miner::MiningConfig;
use alphaloop::panel::{load_csv, synth_panel, Panel, SynthConfig};
use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PanelSource {
    Csv(PathBuf),
    Synth(SynthConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub panel: PanelSource,
    #[serde(default)]
    pub mining: MiningConfig,
    /// `builtin` (default), `empty`, or a path to a memory file.
    #[serde(default = "builtin")]
    pub memory: String,
    /// Directory receiving library.tsv, memory.json and run_log.jsonl.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn builtin() -> String {
    "builtin".into()
}

impl RunConfig {
    /// Parses and validates a manifest; relative paths are taken relative to
    /// the manifest's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            anyhow!(
                "config {}: schema violation at `{}`: {}",
                path.display(),
                e.path(),
                e.inner()
            )
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let PanelSource::Csv(p) = &mut cfg.panel {
            rebase(p);
        }
        if let Some(p) = &mut cfg.output_dir {
            rebase(p);
        }
        if !matches!(cfg.memory.as_str(), "builtin" | "empty") {
            let mut p = PathBuf::from(&cfg.memory);
            rebase(&mut p);
            cfg.memory = p.display().to_string();
        }
        if let PanelSource::Synth(s) = &cfg.panel {
            s.validate()?;
        }
        cfg.mining.thresholds.validate().map_err(|e| anyhow!("config: {e}"))?;
        cfg.mining.gen.validate()?;
        Ok(cfg)
    }

    pub fn panel(&self) -> Result<Panel> {
        Ok(match &self.panel {
            PanelSource::Csv(p) => load_csv(p)?,
            PanelSource::Synth(s) => synth_panel(s)?,
        })
    }
}
