//! On-disk TOML configuration. Angles are degrees here and radians inside
//! the library.

use std::path::Path;

use mbsfuse_core::filters::{UnscentedParams, STATE_DIM};
use mbsfuse_core::fusion::{CentralizedRange, FusionConfig, NoiseDefaults};
use mbsfuse_core::geom::Position2;
use mbsfuse_core::sim::{
    LosProcessConfig, NoiseInjection, ScenarioConfig, StopEvent, TrajectoryConfig,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "MBSFUSE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub scenario: ScenarioSection,
    pub trajectory: TrajectorySection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub los: LosSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub study: StudySection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub dt_s: f64,
    pub bs_spacing_m: f64,
    pub bs_height_m: f64,
    pub bs_lateral_offset_m: f64,
    pub ue_height_m: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        Self {
            dt_s: d.dt,
            bs_spacing_m: d.bs_spacing,
            bs_height_m: d.bs_height,
            bs_lateral_offset_m: d.bs_lateral_offset,
            ue_height_m: d.ue_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSection {
    pub at_m: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    /// `[[x, y], ...]` in meters.
    pub waypoints: Vec<[f64; 2]>,
    #[serde(default = "defaults::nominal_speed")]
    pub nominal_speed_mps: f64,
    #[serde(default = "defaults::turn_speed")]
    pub turn_speed_mps: f64,
    #[serde(default = "defaults::turn_radius")]
    pub turn_radius_m: f64,
    #[serde(default = "defaults::accel")]
    pub accel_mps2: f64,
    #[serde(default = "defaults::decel")]
    pub decel_mps2: f64,
    #[serde(default)]
    pub stops: Vec<StopSection>,
    #[serde(default = "defaults::random_stops")]
    pub random_stops: usize,
    #[serde(default = "defaults::random_stop_duration")]
    pub random_stop_duration_s: f64,
}

mod defaults {
    use mbsfuse_core::sim::TrajectoryConfig;

    fn d() -> TrajectoryConfig {
        TrajectoryConfig::default()
    }
    pub fn nominal_speed() -> f64 {
        d().nominal_speed
    }
    pub fn turn_speed() -> f64 {
        d().turn_speed
    }
    pub fn turn_radius() -> f64 {
        d().turn_radius
    }
    pub fn accel() -> f64 {
        d().accel
    }
    pub fn decel() -> f64 {
        d().decel
    }
    pub fn random_stops() -> usize {
        d().random_stops
    }
    pub fn random_stop_duration() -> f64 {
        d().random_stop_duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma_range_m: f64,
    pub sigma_angle_deg: f64,
    pub sigma_rss_range_m: f64,
    pub nlos_bias_mean_m: f64,
    pub nlos_angle_bias_deg: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoiseInjection::default();
        Self {
            sigma_range_m: d.sigma_range,
            sigma_angle_deg: d.sigma_angle.to_degrees(),
            sigma_rss_range_m: d.sigma_rss_range,
            nlos_bias_mean_m: d.nlos_bias_mean,
            nlos_angle_bias_deg: d.nlos_angle_bias.to_degrees(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LosSection {
    /// Probability of 0, 1, 2 and 3 simultaneous LOS BSs.
    pub marginals: [f64; 4],
    pub mean_dwell_s: f64,
    pub candidates: usize,
}

impl Default for LosSection {
    fn default() -> Self {
        let d = LosProcessConfig::default();
        Self {
            marginals: d.marginals,
            mean_dwell_s: d.mean_dwell,
            candidates: d.candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub sigma_range_m: f64,
    pub sigma_angle_deg: f64,
    pub sigma_fix_m: f64,
    pub sigma_accel_mps2: f64,
    pub nlos_epsilon_m: f64,
    pub initial_sigma_position_m: f64,
    pub initial_sigma_velocity_mps: f64,
    /// `slant` or `horizontal`.
    pub centralized_range: String,
    pub ukf_alpha: f64,
    pub ukf_beta: f64,
    pub ukf_kappa: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        let d = FusionConfig::default();
        Self {
            sigma_range_m: d.noise.sigma_range_filter,
            sigma_angle_deg: d.noise.sigma_angle_filter.to_degrees(),
            sigma_fix_m: d.noise.sigma_fix_filter,
            sigma_accel_mps2: d.sigma_accel,
            nlos_epsilon_m: d.nlos_epsilon,
            initial_sigma_position_m: d.initial_sigma_position,
            initial_sigma_velocity_mps: d.initial_sigma_velocity,
            centralized_range: d.centralized_range.name().to_string(),
            ukf_alpha: 1.0,
            ukf_beta: 2.0,
            ukf_kappa: 3.0 - STATE_DIM as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    /// Cloud spread used when the mean offset is closer than `pdf_split_m`.
    pub pdf_sigma_close_m: f64,
    pub pdf_sigma_far_m: f64,
    pub pdf_split_m: f64,
    pub pdf_samples: usize,
    pub mesh_lin_deg: f64,
    pub mesh_lin_range_m: f64,
    pub mesh_grid: String,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            pdf_sigma_close_m: 0.1,
            pdf_sigma_far_m: 3.0,
            pdf_split_m: 10.0,
            pdf_samples: 100_000,
            mesh_lin_deg: 45.0,
            mesh_lin_range_m: std::f64::consts::SQRT_2,
            mesh_grid: "0.25:10:0.25,0.25:10:0.25".to_string(),
        }
    }
}

impl FileConfig {
    /// Built-in defaults: the same values as `configs/default.toml`.
    pub fn builtin() -> Self {
        let t = TrajectoryConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: default_seed(),
            scenario: ScenarioSection::default(),
            trajectory: TrajectorySection {
                waypoints: t.waypoints.iter().map(|p| [p.x, p.y]).collect(),
                nominal_speed_mps: t.nominal_speed,
                turn_speed_mps: t.turn_speed,
                turn_radius_m: t.turn_radius,
                accel_mps2: t.accel,
                decel_mps2: t.decel,
                stops: Vec::new(),
                random_stops: t.random_stops,
                random_stop_duration_s: t.random_stop_duration,
            },
            noise: NoiseSection::default(),
            los: LosSection::default(),
            filter: FilterSection::default(),
            study: StudySection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: FileConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the
    /// environment, then checks that it converts cleanly.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.apply_seed_env()?;
        cfg.scenario_config()?;
        cfg.fusion_config()?;
        Ok(cfg)
    }

    pub fn apply_seed_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|e| CliError::Config(format!("{SEED_ENV}=`{v}`: {e}")))?;
        }
        Ok(())
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig, CliError> {
        let t = &self.trajectory;
        let cfg = ScenarioConfig {
            dt: self.scenario.dt_s,
            trajectory: TrajectoryConfig {
                waypoints: t.waypoints.iter().map(|[x, y]| Position2::new(*x, *y)).collect(),
                nominal_speed: t.nominal_speed_mps,
                turn_speed: t.turn_speed_mps,
                turn_radius: t.turn_radius_m,
                accel: t.accel_mps2,
                decel: t.decel_mps2,
                stops: t
                    .stops
                    .iter()
                    .map(|s| StopEvent {
                        at: s.at_m,
                        duration: s.duration_s,
                    })
                    .collect(),
                random_stops: t.random_stops,
                random_stop_duration: t.random_stop_duration_s,
            },
            bs_spacing: self.scenario.bs_spacing_m,
            bs_height: self.scenario.bs_height_m,
            bs_lateral_offset: self.scenario.bs_lateral_offset_m,
            ue_height: self.scenario.ue_height_m,
            noise: NoiseInjection {
                sigma_range: self.noise.sigma_range_m,
                sigma_angle: self.noise.sigma_angle_deg.to_radians(),
                sigma_rss_range: self.noise.sigma_rss_range_m,
                nlos_bias_mean: self.noise.nlos_bias_mean_m,
                nlos_angle_bias: self.noise.nlos_angle_bias_deg.to_radians(),
            },
            los: LosProcessConfig {
                marginals: self.los.marginals,
                mean_dwell: self.los.mean_dwell_s,
                candidates: self.los.candidates,
            },
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fusion_config(&self) -> Result<FusionConfig, CliError> {
        let f = &self.filter;
        let centralized_range: CentralizedRange = f
            .centralized_range
            .parse()
            .map_err(|e| CliError::Config(format!("filter.centralized_range: {e}")))?;
        let cfg = FusionConfig {
            noise: NoiseDefaults {
                sigma_range_filter: f.sigma_range_m,
                sigma_angle_filter: f.sigma_angle_deg.to_radians(),
                sigma_fix_filter: f.sigma_fix_m,
            },
            centralized_range,
            sigma_accel: f.sigma_accel_mps2,
            nlos_epsilon: f.nlos_epsilon_m,
            ukf: UnscentedParams::scaled(STATE_DIM, f.ukf_alpha, f.ukf_beta, f.ukf_kappa)?,
            initial_sigma_position: f.initial_sigma_position_m,
            initial_sigma_velocity: f.initial_sigma_velocity_mps,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
