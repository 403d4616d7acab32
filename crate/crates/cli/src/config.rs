//! Run configuration: `[world]`, `[schedule]`, `[guidance]`, `[run]`.

use std::path::Path;

use revpers::anonymizer::AttributeMode;
use revpers::world::WorldSpec;
use revpers::{build_schedule, GmmWorld, GuidanceConfig, NoiseSchedule, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_CONFIG: &str = r#"# revpers run configuration

[world]
kind = "rings"
identities = 8
attributes = 2
inner_radius = 2.0
ring_spacing = 2.0
variance = 0.05
seed = 0
# rows written by `revpers world`
samples = 2000

[schedule]
steps = 100
kind = "linear"
beta_min = 0.0001
beta_max = 0.02

[guidance]
lambda_cfg = -10.0
lambda_ipa = 1.0
solver = "dpm_pp_2m"
steps = 100

[run]
seed = 0
# inputs per anonymization, sweep cell, ablation arm
samples = 500
# "uncontrolled", "keep", or { set = <label> }
attribute_mode = "uncontrolled"
grid = "cfg=-20:-5:5; ipa=1"
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSection {
    #[serde(default = "default_world_samples")]
    pub samples: usize,
    #[serde(flatten)]
    pub spec: WorldSpec,
}

fn default_world_samples() -> usize {
    2000
}

impl Default for WorldSection {
    fn default() -> Self {
        Self { samples: default_world_samples(), spec: WorldSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { steps: 100, kind: ScheduleKind::Linear, beta_min: 1e-4, beta_max: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub samples: usize,
    pub attribute_mode: AttributeMode,
    pub grid: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, samples: 500, attribute_mode: AttributeMode::Uncontrolled, grid: "cfg=-20:-5:5; ipa=1".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub world: WorldSection,
    pub schedule: ScheduleSection,
    pub guidance: GuidanceConfig,
    pub run: RunSection,
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Invalid(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn world(&self) -> CliResult<GmmWorld> {
        Ok(self.world.spec.build()?)
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        let s = &self.schedule;
        build_schedule(s.steps, s.kind, s.beta_min, s.beta_max).map_err(|e| CliError::Invalid(format!("schedule: {e}")))
    }

    /// Checks the guidance section and the attribute mode against the world
    /// and schedule.
    pub fn check(&self, w: &GmmWorld, s: &NoiseSchedule) -> CliResult<()> {
        self.guidance.validate(s).map_err(|e| CliError::Invalid(format!("guidance: {e}")))?;
        check_mode(self.run.attribute_mode, w)?;
        if self.run.samples == 0 {
            return Err(CliError::Invalid("run.samples: must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn check_mode(mode: AttributeMode, w: &GmmWorld) -> CliResult<()> {
    if let AttributeMode::Set(a) = mode {
        if !w.has_attribute(a) {
            return Err(revpers::Error::UnknownAttribute(a.0).into());
        }
    }
    Ok(())
}
