use std::fs;
use std::path::{Path, PathBuf};

use latreg::grpo::{GrpoConfig, WarmupConfig};
use latreg::network::BackboneConfig;
use latreg::synthdata::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Split {
    pub unlabeled: usize,
    pub labeled: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Split {
    fn default() -> Self {
        Split {
            unlabeled: 40,
            labeled: 10,
            val: 4,
            test: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// GRPO epochs per cell.
    pub epochs: usize,
    pub trajectories: Vec<usize>,
    pub steps: Vec<usize>,
    /// Additional `[J, T]` cells appended to the grid.
    pub extra_cells: Vec<[usize; 2]>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            epochs: 10,
            trajectories: vec![2, 6],
            steps: vec![1, 3],
            extra_cells: vec![[1024, 3]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub dims: Vec<usize>,
    pub groups: usize,
    pub trajectories: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            dims: vec![100, 1_000, 10_000, 100_000],
            groups: 256,
            trajectories: 6,
        }
    }
}

/// Everything one experiment needs. Every field has a default, so `{}` is
/// the reference experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its streams from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Start GRPO from a fresh network instead of the warm-up checkpoint.
    pub no_warmup: bool,
    pub split: Split,
    pub scene: SceneSpec,
    pub backbone: BackboneConfig,
    pub warmup: WarmupConfig,
    pub grpo: GrpoConfig,
    pub ablation: AblationConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            no_warmup: false,
            split: Split::default(),
            scene: SceneSpec::default(),
            backbone: BackboneConfig::default(),
            warmup: WarmupConfig::default(),
            grpo: GrpoConfig::default(),
            ablation: AblationConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: latreg::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        check(self.scene.validate())?;
        check(self.backbone.validate())?;
        check(self.backbone.check_input_dims(self.scene.dims))?;
        check(self.warmup.weights.validate())?;
        check(self.grpo.validate())?;
        if self.split.labeled == 0 || self.split.unlabeled == 0 {
            return Err(CliError::Config("unlabeled and labeled splits must be non-empty".into()));
        }
        if self.ablation.trajectories.contains(&0) || self.ablation.steps.contains(&0) {
            return Err(CliError::Config("ablation grid entries must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
