use std::path::{Path, PathBuf};

use cbmpc::environments::{EnvironmentKind, NarrowGeometry};
use cbmpc::harness::{HarnessConfig, PlannerKind, ReferenceMode};
use cbmpc::mpc::MpcParams;
use serde::{Deserialize, Serialize};

/// Closed-loop limits and reference settings, minus the reference mode,
/// which is chosen per environment unless set explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSettings {
    pub step_limit: usize,
    pub deadlock_window: usize,
    pub deadlock_progress: f64,
    pub deadlock_speed: f64,
    pub cbs_cell_size: f64,
    pub cbs_speed: f64,
}

impl Default for LoopSettings {
    fn default() -> Self {
        let h = HarnessConfig::default();
        Self {
            step_limit: h.step_limit,
            deadlock_window: h.deadlock_window,
            deadlock_progress: h.deadlock_progress,
            deadlock_speed: h.deadlock_speed,
            cbs_cell_size: h.cbs_cell_size,
            cbs_speed: h.cbs_speed,
        }
    }
}

impl LoopSettings {
    pub fn harness(&self, reference: ReferenceMode) -> HarnessConfig {
        HarnessConfig {
            step_limit: self.step_limit,
            deadlock_window: self.deadlock_window,
            deadlock_progress: self.deadlock_progress,
            deadlock_speed: self.deadlock_speed,
            reference,
            cbs_cell_size: self.cbs_cell_size,
            cbs_speed: self.cbs_speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSettings {
    pub planners: Vec<PlannerKind>,
    pub robot_counts: Vec<usize>,
    pub trials: usize,
    pub workers: usize,
}

impl Default for BatchSettings {
    fn default() -> Self {
        Self {
            planners: vec![PlannerKind::Cbmpc, PlannerKind::Distributed, PlannerKind::Prioritized],
            robot_counts: vec![2, 3, 4],
            trials: 5,
            workers: 1,
        }
    }
}

/// Everything a `run` or `batch` invocation needs. Loaded from TOML, then
/// overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvironmentKind,
    pub scenario_file: Option<PathBuf>,
    pub planner: PlannerKind,
    pub seed: u64,
    pub robots: usize,
    pub reference: Option<ReferenceMode>,
    pub out: PathBuf,
    pub mpc: MpcParams,
    #[serde(rename = "loop")]
    pub limits: LoopSettings,
    pub narrow: NarrowGeometry,
    pub batch: BatchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvironmentKind::Narrow,
            scenario_file: None,
            planner: PlannerKind::Cbmpc,
            seed: 0,
            robots: 4,
            reference: None,
            out: PathBuf::from("out"),
            mpc: MpcParams::default(),
            limits: LoopSettings::default(),
            narrow: NarrowGeometry::default(),
            batch: BatchSettings::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Reference used when none is configured: the CBS plan on the open map,
    /// the goal state elsewhere.
    pub fn effective_reference(&self) -> ReferenceMode {
        self.reference.unwrap_or(match (self.env, &self.scenario_file) {
            (EnvironmentKind::Open, None) => ReferenceMode::Cbs,
            _ => ReferenceMode::Goal,
        })
    }

    pub fn harness(&self) -> HarnessConfig {
        self.limits.harness(self.effective_reference())
    }

    /// Label of the scenario source used in output file names.
    pub fn env_label(&self) -> String {
        match &self.scenario_file {
            Some(path) => path
                .file_stem()
                .map_or_else(|| "file".to_string(), |s| s.to_string_lossy().into_owned()),
            None => self.env.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.mpc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.robots == 0 {
            return Err(ConfigError::Invalid("robot count must be at least 1".into()));
        }
        if self.batch.planners.is_empty() {
            return Err(ConfigError::Invalid("batch needs at least one planner".into()));
        }
        if self.batch.robot_counts.contains(&0) {
            return Err(ConfigError::Invalid("batch robot counts must be at least 1".into()));
        }
        if self.limits.step_limit == 0 || self.limits.deadlock_window == 0 {
            return Err(ConfigError::Invalid("step limit and deadlock window must be positive".into()));
        }
        if !(self.limits.cbs_cell_size > 0.0 && self.limits.cbs_speed > 0.0) {
            return Err(ConfigError::Invalid("CBS cell size and speed must be positive".into()));
        }
        Ok(())
    }
}
