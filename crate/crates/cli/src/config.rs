//! Config file handling: the embedded defaults overlaid with a JSON file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use srmr_core::dataset::SynthPlan;
use srmr_core::evaluation::{AnalysisConfigs, ExperimentPlan};
use srmr_core::{PipelineConfig, PIPELINE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub original: PipelineConfig,
    pub normalized: PipelineConfig,
    pub synth: SynthPlan,
    pub experiment: ExperimentPlan,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            original: PipelineConfig::original(),
            normalized: PipelineConfig::normalized(),
            synth: SynthPlan::default(),
            experiment: ExperimentPlan::default(),
        }
    }
}

impl ConfigFile {
    /// Defaults, with any keys present in `path` replacing them (objects merge recursively).
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut base = serde_json::to_value(ConfigFile::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let overlay: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut base, overlay);
        }
        let config: ConfigFile = serde_json::from_value(base).context("invalid config")?;
        config.original.validate(PIPELINE_RATE as f64)?;
        config.normalized.validate(PIPELINE_RATE as f64)?;
        Ok(config)
    }

    pub fn analysis(&self) -> AnalysisConfigs {
        AnalysisConfigs {
            original: self.original.clone(),
            normalized: self.normalized.clone(),
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
