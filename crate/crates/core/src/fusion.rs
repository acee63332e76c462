//! Per-epoch measurement assembly and filter stepping for the five schemes.
//!
//! Centralized schemes feed raw (range, azimuth) rows into an EKF or UKF
//! through [`RangeAzimuthStack`]. The decentralized scheme turns every BS's
//! observation into its own position fix first and fuses the fixes with a
//! linear KF, so its observation matrix never depends on the estimate.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{
    ekf_update, kf_update, predict, ukf_update, GaussianBelief, LinearMeasSpec,
    MeasurementModel, StateVector, TransitionSpec, UnscentedParams,
};
use crate::geom::{
    detect_nlos, fix_2d, horizontal_observation, jacobian_rows, range_2d, wrap_angle, BsId,
    BsSite, LosVerdict, NlosInputs, Position2, RangeAngle, DEFAULT_NLOS_EPSILON,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeId {
    LcKf,
    TcEkf,
    TcEkfR,
    TcUkf,
    TcUkfR,
}

impl SchemeId {
    pub const ALL: [SchemeId; 5] = [
        SchemeId::LcKf,
        SchemeId::TcEkf,
        SchemeId::TcEkfR,
        SchemeId::TcUkf,
        SchemeId::TcUkfR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::LcKf => "lc-kf",
            SchemeId::TcEkf => "tc-ekf",
            SchemeId::TcEkfR => "tc-ekf-r",
            SchemeId::TcUkf => "tc-ukf",
            SchemeId::TcUkfR => "tc-ukf-r",
        }
    }

    /// Centralized schemes that also stack azimuth rows.
    pub fn is_hybrid(self) -> bool {
        matches!(self, SchemeId::TcEkf | SchemeId::TcUkf)
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownScheme(pub String);

impl fmt::Display for UnknownScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let valid: Vec<_> = SchemeId::ALL.iter().map(|s| s.name()).collect();
        write!(
            f,
            "unknown scheme `{}` (valid: {})",
            self.0,
            valid.join(", ")
        )
    }
}

impl std::error::Error for UnknownScheme {}

impl FromStr for SchemeId {
    type Err = UnknownScheme;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownScheme(s.to_string()))
    }
}

/// What one BS reported in one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMeasurement {
    /// Time-based (RTT) 3D range, meters.
    pub range_toa: f64,
    /// Azimuth, radians.
    pub azimuth: f64,
    /// Power-based range, meters.
    pub range_rss: f64,
    /// Ground-truth propagation state; never read by the filters.
    pub los: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub site: BsSite,
    pub meas: RawMeasurement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochFrame {
    pub t: f64,
    /// Ground-truth `[x, y, vx, vy]`, used only for evaluation.
    pub truth: StateVector,
    pub obs: Vec<Observation>,
    pub ue_height: f64,
}

/// Filter-side noise assumptions (not the injected noise).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDefaults {
    pub sigma_range_filter: f64,
    pub sigma_angle_filter: f64,
    pub sigma_fix_filter: f64,
}

impl Default for NoiseDefaults {
    fn default() -> Self {
        Self {
            sigma_range_filter: 1e-3,
            sigma_angle_filter: 0.1f64.to_radians(),
            sigma_fix_filter: 1e-2,
        }
    }
}

/// Which range the centralized schemes feed to their horizontal model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CentralizedRange {
    /// The measured slant range, used as is.
    Slant,
    /// The slant range reduced to the horizontal plane with the known
    /// height difference, as the decentralized fixes do.
    Horizontal,
}

impl CentralizedRange {
    pub fn name(self) -> &'static str {
        match self {
            CentralizedRange::Slant => "slant",
            CentralizedRange::Horizontal => "horizontal",
        }
    }
}

impl FromStr for CentralizedRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "slant" => Ok(CentralizedRange::Slant),
            "horizontal" => Ok(CentralizedRange::Horizontal),
            other => Err(format!("unknown range mode `{other}` (valid: slant, horizontal)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub noise: NoiseDefaults,
    pub centralized_range: CentralizedRange,
    /// White-acceleration process noise, m/s².
    pub sigma_accel: f64,
    pub nlos_epsilon: f64,
    pub ukf: UnscentedParams,
    pub initial_sigma_position: f64,
    pub initial_sigma_velocity: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            noise: NoiseDefaults::default(),
            centralized_range: CentralizedRange::Slant,
            sigma_accel: 1.0,
            nlos_epsilon: DEFAULT_NLOS_EPSILON,
            ukf: UnscentedParams::default(),
            initial_sigma_position: 10.0,
            initial_sigma_velocity: 5.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let n = &self.noise;
        for (field, v) in [
            ("filter.sigma_range_m", n.sigma_range_filter),
            ("filter.sigma_angle_deg", n.sigma_angle_filter),
            ("filter.sigma_fix_m", n.sigma_fix_filter),
            ("filter.sigma_accel_mps2", self.sigma_accel),
            ("filter.nlos_epsilon_m", self.nlos_epsilon),
            ("filter.initial_sigma_position_m", self.initial_sigma_position),
            ("filter.initial_sigma_velocity_mps", self.initial_sigma_velocity),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn initial_belief(&self, position: Position2) -> GaussianBelief {
        let sp = self.initial_sigma_position * self.initial_sigma_position;
        let sv = self.initial_sigma_velocity * self.initial_sigma_velocity;
        GaussianBelief::new(
            Vector4::new(position.x, position.y, 0.0, 0.0),
            Matrix4::from_diagonal(&Vector4::new(sp, sp, sv, sv)),
        )
    }
}

/// Stacked horizontal (range, azimuth) or range-only model over several BSs.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeAzimuthStack {
    pub sites: Vec<BsSite>,
    pub hybrid: bool,
    r: DMatrix<f64>,
}

impl RangeAzimuthStack {
    pub fn new(sites: Vec<BsSite>, hybrid: bool, noise: &NoiseDefaults) -> Self {
        let per_site: &[f64] = if hybrid {
            &[
                noise.sigma_range_filter * noise.sigma_range_filter,
                noise.sigma_angle_filter * noise.sigma_angle_filter,
            ]
        } else {
            &[noise.sigma_range_filter * noise.sigma_range_filter]
        };
        let diag: Vec<f64> = sites.iter().flat_map(|_| per_site.iter().copied()).collect();
        Self {
            sites,
            hybrid,
            r: DMatrix::from_diagonal(&DVector::from_vec(diag)),
        }
    }

    fn rows_per_site(&self) -> usize {
        if self.hybrid {
            2
        } else {
            1
        }
    }

    fn is_angle_row(&self, row: usize) -> bool {
        self.hybrid && row % 2 == 1
    }
}

impl MeasurementModel for RangeAzimuthStack {
    fn dim(&self) -> usize {
        self.sites.len() * self.rows_per_site()
    }

    fn predict(&self, state: &StateVector) -> Result<DVector<f64>> {
        let mut z = Vec::with_capacity(self.dim());
        for site in &self.sites {
            let (r, theta) = horizontal_observation(state, site)?;
            z.push(r);
            if self.hybrid {
                z.push(theta);
            }
        }
        Ok(DVector::from_vec(z))
    }

    fn jacobian(&self, state: &StateVector) -> Result<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.dim(), 4);
        let step = self.rows_per_site();
        for (i, site) in self.sites.iter().enumerate() {
            let rows = jacobian_rows(state, site)?;
            for r in 0..step {
                h.row_mut(i * step + r).copy_from(&rows.row(r));
            }
        }
        Ok(h)
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.r
    }

    fn residual(&self, observed: &DVector<f64>, predicted: &DVector<f64>) -> DVector<f64> {
        let mut d = observed - predicted;
        for (row, v) in d.iter_mut().enumerate() {
            if self.is_angle_row(row) {
                *v = wrap_angle(*v);
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedStack {
    pub z: DVector<f64>,
    pub model: RangeAzimuthStack,
    /// BSs whose range was shorter than the known height difference.
    pub dropped: Vec<BsId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecentralizedStack {
    pub z: DVector<f64>,
    pub spec: LinearMeasSpec,
    pub fixes: Vec<(BsId, Position2)>,
    pub dropped: Vec<BsId>,
}

fn sorted_obs(frame: &EpochFrame) -> Vec<&Observation> {
    let mut obs: Vec<_> = frame.obs.iter().collect();
    obs.sort_by_key(|o| o.site.id);
    obs
}

fn check_distinct(frame: &EpochFrame) -> Result<()> {
    let obs = sorted_obs(frame);
    for pair in obs.windows(2) {
        if pair[0].site.id == pair[1].site.id {
            return Err(Error::DuplicateBs(pair[0].site.id));
        }
    }
    Ok(())
}

pub fn assemble_centralized(
    frame: &EpochFrame,
    hybrid: bool,
    noise: &NoiseDefaults,
    range_mode: CentralizedRange,
) -> Result<CentralizedStack> {
    let mut z = Vec::new();
    let mut sites = Vec::new();
    let mut dropped = Vec::new();
    for o in sorted_obs(frame) {
        let range = match range_mode {
            CentralizedRange::Slant => Ok(o.meas.range_toa),
            CentralizedRange::Horizontal => range_2d(o.meas.range_toa, frame.ue_height - o.site.pos.z),
        };
        match range {
            Ok(r2d) => {
                z.push(r2d);
                if hybrid {
                    z.push(o.meas.azimuth);
                }
                sites.push(o.site);
            }
            Err(_) => dropped.push(o.site.id),
        }
    }
    if sites.is_empty() {
        return Err(Error::NoVisibleBs);
    }
    Ok(CentralizedStack {
        z: DVector::from_vec(z),
        model: RangeAzimuthStack::new(sites, hybrid, noise),
        dropped,
    })
}

/// Stacked `[1 0 0 0; 0 1 0 0]` blocks, one per fix.
pub fn position_observation_matrix(fixes: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(2 * fixes, 4);
    for i in 0..fixes {
        h[(2 * i, 0)] = 1.0;
        h[(2 * i + 1, 1)] = 1.0;
    }
    h
}

pub fn assemble_decentralized(frame: &EpochFrame, noise: &NoiseDefaults) -> Result<DecentralizedStack> {
    let mut fixes = Vec::new();
    let mut dropped = Vec::new();
    for o in sorted_obs(frame) {
        let meas = RangeAngle {
            range: o.meas.range_toa,
            azimuth: o.meas.azimuth,
            elevation: None,
        };
        match fix_2d(&o.site, &meas, frame.ue_height) {
            Ok(p) => fixes.push((o.site.id, p)),
            Err(_) => dropped.push(o.site.id),
        }
    }
    if fixes.is_empty() {
        return Err(Error::NoVisibleBs);
    }
    let z = DVector::from_iterator(2 * fixes.len(), fixes.iter().flat_map(|(_, p)| [p.x, p.y]));
    let var = noise.sigma_fix_filter * noise.sigma_fix_filter;
    let spec = LinearMeasSpec {
        h: position_observation_matrix(fixes.len()),
        r: DMatrix::identity(2 * fixes.len(), 2 * fixes.len()) * var,
    };
    Ok(DecentralizedStack {
        z,
        spec,
        fixes,
        dropped,
    })
}

/// Splits a frame into the BSs passing the NLOS gate and the ids it rejected.
/// With the gate off every BS is admitted.
pub fn gate_frame(frame: &EpochFrame, gate_on: bool, epsilon: f64) -> Result<(EpochFrame, Vec<BsId>)> {
    check_distinct(frame)?;
    let mut admitted = Vec::with_capacity(frame.obs.len());
    let mut rejected = Vec::new();
    for o in &frame.obs {
        let verdict = if gate_on {
            detect_nlos(&NlosInputs {
                r_toa: o.meas.range_toa,
                r_rss: o.meas.range_rss,
                epsilon,
            })
        } else {
            LosVerdict::Los
        };
        match verdict {
            LosVerdict::Los => admitted.push(*o),
            LosVerdict::Nlos => rejected.push(o.site.id),
        }
    }
    rejected.sort();
    Ok((
        EpochFrame {
            obs: admitted,
            ..frame.clone()
        },
        rejected,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochDiagnostics {
    pub t: f64,
    /// BSs that contributed to the update, ascending id.
    pub admitted: Vec<BsId>,
    pub rejected: Vec<BsId>,
    pub dropped: Vec<BsId>,
    pub updated: bool,
    pub innovation_norm: Option<f64>,
    pub error_2d: f64,
    /// Numerical failure that turned this epoch into a predict-only one.
    pub update_error: Option<Error>,
}

impl EpochDiagnostics {
    fn new(t: f64, rejected: Vec<BsId>) -> Self {
        Self {
            t,
            admitted: Vec::new(),
            rejected,
            dropped: Vec::new(),
            updated: false,
            innovation_norm: None,
            error_2d: f64::NAN,
            update_error: None,
        }
    }

    fn finish(mut self, belief: &GaussianBelief, frame: &EpochFrame) -> Self {
        let (x, y) = belief.position();
        self.error_2d = (x - frame.truth[0]).hypot(y - frame.truth[1]);
        self
    }
}

struct Correction {
    posterior: GaussianBelief,
    innovation_norm: f64,
    admitted: Vec<BsId>,
    dropped: Vec<BsId>,
}

fn correct(
    cfg: &FusionConfig,
    scheme: SchemeId,
    prior: &GaussianBelief,
    admitted: &EpochFrame,
) -> Result<Correction> {
    let (out, used, dropped) = match scheme {
        SchemeId::LcKf => {
            let stack = assemble_decentralized(admitted, &cfg.noise)?;
            let used = stack.fixes.iter().map(|(id, _)| *id).collect();
            (kf_update(prior, &stack.z, &stack.spec)?, used, stack.dropped)
        }
        SchemeId::TcEkf | SchemeId::TcEkfR | SchemeId::TcUkf | SchemeId::TcUkfR => {
            let stack = assemble_centralized(admitted, scheme.is_hybrid(), &cfg.noise, cfg.centralized_range)?;
            let used = stack.model.sites.iter().map(|s| s.id).collect();
            let out = if matches!(scheme, SchemeId::TcEkf | SchemeId::TcEkfR) {
                ekf_update(prior, &stack.z, &stack.model)?
            } else {
                ukf_update(prior, &stack.z, &stack.model, &cfg.ukf)?
            };
            (out, used, stack.dropped)
        }
    };
    Ok(Correction {
        posterior: out.posterior,
        innovation_norm: out.innovation.norm(),
        admitted: used,
        dropped,
    })
}

/// One predict/update cycle. Epochs where no BS survives the gate (or the
/// geometry checks) are predict-only.
pub fn step(
    cfg: &FusionConfig,
    scheme: SchemeId,
    belief: &GaussianBelief,
    frame: &EpochFrame,
    dt: f64,
    gate_on: bool,
) -> Result<(GaussianBelief, EpochDiagnostics)> {
    let prior = predict(belief, &TransitionSpec::constant_velocity(dt, cfg.sigma_accel));
    let (admitted, rejected) = gate_frame(frame, gate_on, cfg.nlos_epsilon)?;
    let mut diag = EpochDiagnostics::new(frame.t, rejected);
    if admitted.obs.is_empty() {
        return Ok((prior, diag.finish(&prior, frame)));
    }
    match correct(cfg, scheme, &prior, &admitted) {
        Ok(c) => {
            diag.admitted = c.admitted;
            diag.dropped = c.dropped;
            diag.updated = true;
            diag.innovation_norm = Some(c.innovation_norm);
            Ok((c.posterior, diag.finish(&c.posterior, frame)))
        }
        Err(Error::NoVisibleBs) => {
            diag.dropped = admitted.obs.iter().map(|o| o.site.id).collect();
            diag.dropped.sort();
            Ok((prior, diag.finish(&prior, frame)))
        }
        Err(e) => Err(e),
    }
}

/// Initial belief from the first epoch with a usable admitted BS: the fix of
/// the BS with the shortest measured range, zero velocity.
pub fn initialize(cfg: &FusionConfig, frame: &EpochFrame, gate_on: bool) -> Result<Option<GaussianBelief>> {
    let (admitted, _) = gate_frame(frame, gate_on, cfg.nlos_epsilon)?;
    let mut candidates: Vec<_> = admitted.obs.iter().collect();
    candidates.sort_by(|a, b| {
        a.meas
            .range_toa
            .total_cmp(&b.meas.range_toa)
            .then(a.site.id.cmp(&b.site.id))
    });
    for o in candidates {
        let meas = RangeAngle {
            range: o.meas.range_toa,
            azimuth: o.meas.azimuth,
            elevation: None,
        };
        if let Ok(p) = fix_2d(&o.site, &meas, frame.ue_height) {
            return Ok(Some(cfg.initial_belief(p)));
        }
    }
    Ok(None)
}

/// Runs one scheme over a frame stream, owning the belief and epoch timing.
///
/// Updates that fail numerically (degenerate geometry, singular innovation,
/// broken covariance) degrade to predict-only epochs and are recorded in the
/// diagnostics; a divergent centralized filter keeps producing output.
#[derive(Debug, Clone)]
pub struct Tracker<'a> {
    cfg: &'a FusionConfig,
    scheme: SchemeId,
    gate_on: bool,
    state: Option<(GaussianBelief, f64)>,
}

impl<'a> Tracker<'a> {
    pub fn new(cfg: &'a FusionConfig, scheme: SchemeId, gate_on: bool) -> Self {
        Self {
            cfg,
            scheme,
            gate_on,
            state: None,
        }
    }

    pub fn belief(&self) -> Option<&GaussianBelief> {
        self.state.as_ref().map(|(b, _)| b)
    }

    /// Returns `None` while still waiting for an initializing epoch.
    pub fn process(&mut self, frame: &EpochFrame) -> Result<Option<(GaussianBelief, EpochDiagnostics)>> {
        let Some((belief, last_t)) = self.state else {
            let Some(init) = initialize(self.cfg, frame, self.gate_on)? else {
                return Ok(None);
            };
            self.state = Some((init, frame.t));
            let diag = EpochDiagnostics::new(frame.t, Vec::new()).finish(&init, frame);
            return Ok(Some((init, diag)));
        };
        let dt = frame.t - last_t;
        if !(dt > 0.0) {
            return Err(Error::invalid(
                "t",
                format!("epoch times must increase strictly ({last_t} then {})", frame.t),
            ));
        }
        let (next, diag) = match step(self.cfg, self.scheme, &belief, frame, dt, self.gate_on) {
            Ok(ok) => ok,
            Err(e) if e.is_numerical() => {
                let idle = EpochFrame {
                    obs: Vec::new(),
                    ..frame.clone()
                };
                let (prior, mut diag) = step(self.cfg, self.scheme, &belief, &idle, dt, false)?;
                diag.update_error = Some(e);
                (prior, diag)
            }
            Err(e) => return Err(e),
        };
        if !next.is_finite() {
            return Err(Error::NonFinite);
        }
        self.state = Some((next, frame.t));
        Ok(Some((next, diag)))
    }
}
