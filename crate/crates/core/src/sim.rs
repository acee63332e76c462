//! Synthetic drive scenarios: trajectory, BS placement, LOS visibility and
//! measurement corruption.
//!
//! Everything is a pure function of the configuration and its seed. The seed
//! is split into independent ChaCha streams for trajectory events, the LOS
//! process and the measurement noise, so changing the noise level does not
//! move the stop events or the visibility sequence.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Uniform};

use crate::error::{Error, Result};
use crate::fusion::{EpochFrame, Observation, RawMeasurement};
use crate::geom::{measure, wrap_angle, BsSite, Position2, Position3};

pub mod stream;

const STREAM_TRAJECTORY: u64 = 1;
const STREAM_LOS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_STUDY: u64 = 4;

/// Seeded generator for one named stream of a scenario seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator used by the linearization studies.
pub fn study_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_STUDY)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseInjection {
    pub sigma_range: f64,
    /// Radians.
    pub sigma_angle: f64,
    pub sigma_rss_range: f64,
    /// Mean of the exponential excess-path delay added to NLOS TOA ranges.
    pub nlos_bias_mean: f64,
    /// Half-width (radians) of the uniform azimuth error under NLOS.
    pub nlos_angle_bias: f64,
}

impl NoiseInjection {
    pub const ZERO: NoiseInjection = NoiseInjection {
        sigma_range: 0.0,
        sigma_angle: 0.0,
        sigma_rss_range: 0.0,
        nlos_bias_mean: 0.0,
        nlos_angle_bias: 0.0,
    };
}

impl Default for NoiseInjection {
    fn default() -> Self {
        Self {
            sigma_range: 0.1,
            sigma_angle: 0.0017,
            sigma_rss_range: 15.0,
            nlos_bias_mean: 120.0,
            nlos_angle_bias: 20f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosProcessConfig {
    /// Target probability of 0, 1, 2 and 3 simultaneous LOS BSs.
    pub marginals: [f64; 4],
    /// Mean time between visibility redraws, seconds.
    pub mean_dwell: f64,
    /// Number of nearest BSs that report measurements each epoch.
    pub candidates: usize,
}

impl Default for LosProcessConfig {
    fn default() -> Self {
        Self {
            marginals: [0.03, 0.21, 0.46, 0.30],
            mean_dwell: 5.0,
            candidates: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopEvent {
    /// Arc length along the path where the vehicle halts, meters.
    pub at: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub waypoints: Vec<Position2>,
    pub nominal_speed: f64,
    /// Speed held through corner arcs.
    pub turn_speed: f64,
    pub turn_radius: f64,
    pub accel: f64,
    pub decel: f64,
    pub stops: Vec<StopEvent>,
    /// Additional stops placed on straight stretches from the seed.
    pub random_stops: usize,
    pub random_stop_duration: f64,
}

impl TrajectoryConfig {
    /// A two-leg straight route at constant speed, no events.
    pub fn straight(length: f64, speed: f64) -> Self {
        Self {
            waypoints: vec![Position2::new(0.0, 0.0), Position2::new(length, 0.0)],
            nominal_speed: speed,
            turn_speed: speed,
            random_stops: 0,
            stops: Vec::new(),
            ..Self::default()
        }
    }
}

/// A downtown-style grid route of about 7.7 km with fourteen corners.
pub fn default_waypoints() -> Vec<Position2> {
    [
        (0.0, 0.0),
        (700.0, 0.0),
        (700.0, 350.0),
        (300.0, 350.0),
        (300.0, 800.0),
        (1100.0, 800.0),
        (1100.0, 150.0),
        (1500.0, 150.0),
        (1500.0, 1000.0),
        (900.0, 1000.0),
        (900.0, 1300.0),
        (200.0, 1300.0),
        (200.0, 1100.0),
        (-200.0, 1100.0),
        (-200.0, 400.0),
        (100.0, 400.0),
    ]
    .into_iter()
    .map(|(x, y)| Position2::new(x, y))
    .collect()
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            waypoints: default_waypoints(),
            nominal_speed: 12.0,
            turn_speed: 5.0,
            turn_radius: 20.0,
            accel: 1.5,
            decel: 2.5,
            stops: Vec::new(),
            random_stops: 6,
            random_stop_duration: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub dt: f64,
    pub trajectory: TrajectoryConfig,
    pub bs_spacing: f64,
    pub bs_height: f64,
    /// Distance of the BS line to the left of the driven path.
    pub bs_lateral_offset: f64,
    pub ue_height: f64,
    pub noise: NoiseInjection,
    pub los: LosProcessConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            trajectory: TrajectoryConfig::default(),
            bs_spacing: 250.0,
            bs_height: 10.0,
            bs_lateral_offset: 15.0,
            ue_height: 2.0,
            noise: NoiseInjection::default(),
            los: LosProcessConfig::default(),
            seed: 1,
        }
    }
}

fn positive(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be non-negative, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        positive("scenario.dt_s", self.dt)?;
        positive("scenario.bs_spacing_m", self.bs_spacing)?;
        non_negative("scenario.bs_lateral_offset_m", self.bs_lateral_offset)?;
        if !(self.bs_height.is_finite() && self.ue_height.is_finite()) {
            return Err(Error::invalid("scenario", "heights must be finite"));
        }
        let tr = &self.trajectory;
        if tr.waypoints.len() < 2 {
            return Err(Error::invalid("trajectory.waypoints", "at least two waypoints are required"));
        }
        if tr.waypoints.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::invalid("trajectory.waypoints", "coordinates must be finite"));
        }
        positive("trajectory.nominal_speed_mps", tr.nominal_speed)?;
        positive("trajectory.turn_speed_mps", tr.turn_speed)?;
        positive("trajectory.turn_radius_m", tr.turn_radius)?;
        positive("trajectory.accel_mps2", tr.accel)?;
        positive("trajectory.decel_mps2", tr.decel)?;
        non_negative("trajectory.random_stop_duration_s", tr.random_stop_duration)?;
        for s in &tr.stops {
            non_negative("trajectory.stops.at_m", s.at)?;
            non_negative("trajectory.stops.duration_s", s.duration)?;
        }
        let n = &self.noise;
        non_negative("noise.sigma_range_m", n.sigma_range)?;
        non_negative("noise.sigma_angle_deg", n.sigma_angle)?;
        non_negative("noise.sigma_rss_range_m", n.sigma_rss_range)?;
        non_negative("noise.nlos_bias_mean_m", n.nlos_bias_mean)?;
        non_negative("noise.nlos_angle_bias_deg", n.nlos_angle_bias)?;
        let los = &self.los;
        if los.marginals.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || (los.marginals.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid("los.marginals", "must be non-negative and sum to 1"));
        }
        positive("los.mean_dwell_s", los.mean_dwell)?;
        if los.candidates < 3 {
            return Err(Error::invalid("los.candidates", "at least 3 candidate BSs are needed"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Path geometry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Element {
    Line {
        start: Position2,
        dir: (f64, f64),
        length: f64,
    },
    Arc {
        center: Position2,
        radius: f64,
        start_angle: f64,
        /// Signed sweep, positive for left turns.
        sweep: f64,
    },
}

impl Element {
    fn length(&self) -> f64 {
        match *self {
            Element::Line { length, .. } => length,
            Element::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn locate(&self, u: f64) -> (Position2, (f64, f64)) {
        match *self {
            Element::Line { start, dir, .. } => {
                (Position2::new(start.x + dir.0 * u, start.y + dir.1 * u), dir)
            }
            Element::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let phi = start_angle + sweep.signum() * u / radius;
                let (s, c) = phi.sin_cos();
                let tangent = (-s * sweep.signum(), c * sweep.signum());
                (Position2::new(center.x + radius * c, center.y + radius * s), tangent)
            }
        }
    }

    /// Offset along the element of the point nearest to `p`.
    fn project(&self, p: &Position2) -> f64 {
        match *self {
            Element::Line { start, dir, length } => {
                ((p.x - start.x) * dir.0 + (p.y - start.y) * dir.1).clamp(0.0, length)
            }
            Element::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let phi = (p.y - center.y).atan2(p.x - center.x);
                let rel = wrap_angle((phi - start_angle) * sweep.signum());
                let rel = if rel < 0.0 && rel < -(2.0 * PI - sweep.abs()) / 2.0 {
                    rel + 2.0 * PI
                } else {
                    rel
                };
                (rel.clamp(0.0, sweep.abs())) * radius
            }
        }
    }
}

/// Waypoint polyline with circular fillets at every corner.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    elements: Vec<Element>,
    starts: Vec<f64>,
    length: f64,
}

fn unit(a: Position2, b: Position2) -> Option<((f64, f64), f64)> {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = dx.hypot(dy);
    (len > 1e-9).then(|| ((dx / len, dy / len), len))
}

impl Path {
    pub fn new(waypoints: &[Position2], turn_radius: f64) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::invalid("trajectory.waypoints", "at least two waypoints are required"));
        }
        let mut legs = Vec::with_capacity(waypoints.len() - 1);
        for w in waypoints.windows(2) {
            let leg = unit(w[0], w[1]).ok_or_else(|| {
                Error::invalid("trajectory.waypoints", "consecutive waypoints coincide")
            })?;
            legs.push(leg);
        }
        // corner i sits between legs i and i+1
        let mut turns = Vec::with_capacity(legs.len() - 1);
        for pair in legs.windows(2) {
            let ((ax, ay), _) = pair[0];
            let ((bx, by), _) = pair[1];
            let delta = (ax * by - ay * bx).atan2(ax * bx + ay * by);
            if delta.abs() > PI - 1e-6 {
                return Err(Error::InfeasibleProfile("path reverses on itself".into()));
            }
            turns.push(delta);
        }
        let tangent_len: Vec<f64> = turns
            .iter()
            .map(|d| turn_radius * (d.abs() / 2.0).tan())
            .collect();
        for (i, &(_, len)) in legs.iter().enumerate() {
            let used = if i > 0 { tangent_len[i - 1] } else { 0.0 }
                + tangent_len.get(i).copied().unwrap_or(0.0);
            if used > len + 1e-9 {
                return Err(Error::InfeasibleProfile(format!(
                    "leg {i} ({len:.1} m) is too short for the turn radius"
                )));
            }
        }

        let mut elements = Vec::new();
        let mut cursor = waypoints[0];
        for (i, &(dir, _)) in legs.iter().enumerate() {
            let end_trim = tangent_len.get(i).copied().unwrap_or(0.0);
            let corner = waypoints[i + 1];
            let line_end = Position2::new(corner.x - dir.0 * end_trim, corner.y - dir.1 * end_trim);
            if let Some((_, length)) = unit(cursor, line_end) {
                elements.push(Element::Line {
                    start: cursor,
                    dir,
                    length,
                });
            }
            cursor = line_end;
            if let Some(&delta) = turns.get(i) {
                if delta.abs() > 1e-12 {
                    let side = delta.signum();
                    let center = Position2::new(
                        line_end.x - dir.1 * side * turn_radius,
                        line_end.y + dir.0 * side * turn_radius,
                    );
                    let start_angle = (line_end.y - center.y).atan2(line_end.x - center.x);
                    let arc = Element::Arc {
                        center,
                        radius: turn_radius,
                        start_angle,
                        sweep: delta,
                    };
                    cursor = arc.locate(arc.length()).0;
                    elements.push(arc);
                }
            }
        }

        let mut starts = Vec::with_capacity(elements.len());
        let mut length = 0.0;
        for e in &elements {
            starts.push(length);
            length += e.length();
        }
        Ok(Self {
            elements,
            starts,
            length,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    fn element_at(&self, s: f64) -> usize {
        self.starts.partition_point(|&st| st <= s).saturating_sub(1)
    }

    /// Position and unit tangent at arc length `s` (clamped to the path).
    pub fn locate(&self, s: f64) -> (Position2, (f64, f64)) {
        let s = s.clamp(0.0, self.length);
        let i = self.element_at(s);
        let e = &self.elements[i];
        e.locate((s - self.starts[i]).min(e.length()))
    }

    /// Arc length of the path point nearest to `p`.
    pub fn project(&self, p: &Position2) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (e, start) in self.elements.iter().zip(&self.starts) {
            let u = e.project(p);
            let d = e.locate(u).0.distance(p);
            if d < best.0 {
                best = (d, start + u);
            }
        }
        best.1
    }

    /// `(start, end)` arc lengths of the corner arcs.
    pub fn turn_intervals(&self) -> Vec<(f64, f64)> {
        self.intervals(|e| matches!(e, Element::Arc { .. }))
    }

    /// `(start, end)` arc lengths of the straight stretches.
    pub fn straight_intervals(&self) -> Vec<(f64, f64)> {
        self.intervals(|e| matches!(e, Element::Line { .. }))
    }

    fn intervals(&self, pick: impl Fn(&Element) -> bool) -> Vec<(f64, f64)> {
        self.elements
            .iter()
            .zip(&self.starts)
            .filter(|(e, _)| pick(e))
            .map(|(e, s)| (*s, s + e.length()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Speed profile
// ---------------------------------------------------------------------------

/// Constant-acceleration piece of the longitudinal motion.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Phase {
    t0: f64,
    s0: f64,
    v0: f64,
    accel: f64,
    duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct SpeedProfile {
    phases: Vec<Phase>,
}

enum Constraint {
    Turn { start: f64, end: f64 },
    Stop { at: f64, duration: f64 },
}

impl Constraint {
    fn position(&self) -> f64 {
        match *self {
            Constraint::Turn { start, .. } => start,
            Constraint::Stop { at, .. } => at,
        }
    }
}

struct ProfileBuilder<'a> {
    cfg: &'a TrajectoryConfig,
    phases: Vec<Phase>,
    t: f64,
    s: f64,
    v: f64,
}

impl ProfileBuilder<'_> {
    fn push(&mut self, accel: f64, duration: f64) {
        if duration <= 0.0 {
            return;
        }
        self.phases.push(Phase {
            t0: self.t,
            s0: self.s,
            v0: self.v,
            accel,
            duration,
        });
        self.s += self.v * duration + 0.5 * accel * duration * duration;
        self.v += accel * duration;
        self.t += duration;
    }

    /// Moves from the current state to `(target_s, target_v)` with a
    /// trapezoidal (or triangular) speed profile capped at nominal speed.
    fn travel(&mut self, target_s: f64, target_v: f64) -> Result<()> {
        let (a, b) = (self.cfg.accel, self.cfg.decel);
        let d = target_s - self.s;
        let (va, vb) = (self.v, target_v);
        let needed = if vb < va {
            (va * va - vb * vb) / (2.0 * b)
        } else {
            (vb * vb - va * va) / (2.0 * a)
        };
        if d < needed - 1e-6 {
            return Err(Error::InfeasibleProfile(format!(
                "cannot change speed from {va:.2} to {vb:.2} m/s within {d:.2} m at s = {:.1} m",
                self.s
            )));
        }
        let peak_sq = (2.0 * a * b * d.max(0.0) + b * va * va + a * vb * vb) / (a + b);
        let peak = peak_sq.sqrt().min(self.cfg.nominal_speed).max(va.max(vb));
        let d_acc = (peak * peak - va * va) / (2.0 * a);
        let d_dec = (peak * peak - vb * vb) / (2.0 * b);
        let cruise = (d - d_acc - d_dec).max(0.0);
        self.push(a, (peak - va) / a);
        if peak > 0.0 {
            let v = self.v;
            self.push(0.0, cruise / v);
        }
        self.push(-b, (peak - vb) / b);
        // absorb round-off so the next phase starts exactly on target
        self.s = target_s;
        self.v = target_v;
        Ok(())
    }

    fn hold(&mut self, distance: f64) {
        let v = self.v;
        if v > 0.0 {
            self.push(0.0, distance / v);
        }
    }
}

impl SpeedProfile {
    fn build(cfg: &TrajectoryConfig, path: &Path, stops: &[StopEvent]) -> Result<Self> {
        let turns = path.turn_intervals();
        let mut constraints: Vec<Constraint> = turns
            .iter()
            .map(|&(start, end)| Constraint::Turn { start, end })
            .collect();
        for stop in stops {
            if stop.at > path.length() {
                return Err(Error::InfeasibleProfile(format!(
                    "stop at {:.1} m lies beyond the path end ({:.1} m)",
                    stop.at,
                    path.length()
                )));
            }
            if turns.iter().any(|&(a, b)| stop.at > a && stop.at < b) {
                return Err(Error::InfeasibleProfile(format!(
                    "stop at {:.1} m lies inside a turn",
                    stop.at
                )));
            }
            constraints.push(Constraint::Stop {
                at: stop.at,
                duration: stop.duration,
            });
        }
        constraints.sort_by(|a, b| a.position().total_cmp(&b.position()));

        let turn_speed = cfg.turn_speed.min(cfg.nominal_speed);
        let mut b = ProfileBuilder {
            cfg,
            phases: Vec::new(),
            t: 0.0,
            s: 0.0,
            v: cfg.nominal_speed,
        };
        for c in &constraints {
            match *c {
                Constraint::Turn { start, end } => {
                    b.travel(start, turn_speed)?;
                    b.hold(end - start);
                    b.s = end;
                }
                Constraint::Stop { at, duration } => {
                    b.travel(at, 0.0)?;
                    b.push(0.0, duration);
                }
            }
        }
        let remaining = path.length() - b.s;
        let end_speed = cfg
            .nominal_speed
            .min((b.v * b.v + 2.0 * cfg.accel * remaining.max(0.0)).sqrt());
        b.travel(path.length(), end_speed)?;
        Ok(Self { phases: b.phases })
    }

    fn duration(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.t0 + p.duration)
    }

    /// Arc length and speed at time `t`.
    fn at(&self, t: f64) -> (f64, f64) {
        let i = self.phases.partition_point(|p| p.t0 <= t).saturating_sub(1);
        let p = &self.phases[i];
        let tau = (t - p.t0).clamp(0.0, p.duration);
        (
            p.s0 + p.v0 * tau + 0.5 * p.accel * tau * tau,
            (p.v0 + p.accel * tau).max(0.0),
        )
    }
}

fn place_random_stops(cfg: &TrajectoryConfig, path: &Path, rng: &mut impl Rng) -> Result<Vec<StopEvent>> {
    if cfg.random_stops == 0 {
        return Ok(Vec::new());
    }
    let v = cfg.nominal_speed;
    let margin = v * v / (2.0 * cfg.decel) + v * v / (2.0 * cfg.accel) + 1.0;
    let usable: Vec<(f64, f64)> = path
        .straight_intervals()
        .into_iter()
        .filter_map(|(a, b)| (b - a > 2.0 * margin).then_some((a + margin, b - margin)))
        .collect();
    let total: f64 = usable.iter().map(|(a, b)| b - a).sum();
    if total <= 0.0 {
        return Err(Error::InfeasibleProfile(
            "no straight stretch is long enough for a stop".into(),
        ));
    }
    let mut placed: Vec<f64> = cfg.stops.iter().map(|s| s.at).collect();
    let mut out = Vec::with_capacity(cfg.random_stops);
    for _ in 0..cfg.random_stops {
        let mut found = None;
        for _ in 0..200 {
            let mut u = rng.random::<f64>() * total;
            let mut at = None;
            for &(a, b) in &usable {
                if u <= b - a {
                    at = Some(a + u);
                    break;
                }
                u -= b - a;
            }
            let at = at.unwrap_or(usable[usable.len() - 1].1);
            if placed.iter().all(|p| (p - at).abs() > margin) {
                found = Some(at);
                break;
            }
        }
        let at = found.ok_or_else(|| {
            Error::InfeasibleProfile(format!("could not fit {} random stops", cfg.random_stops))
        })?;
        placed.push(at);
        out.push(StopEvent {
            at,
            duration: cfg.random_stop_duration,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    /// `[x, y, vx, vy]`
    pub state: Vector4<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTruth {
    pub samples: Vec<TruthSample>,
}

impl TrajectoryTruth {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sum of distances between consecutive samples.
    pub fn distance_travelled(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (w[1].state[0] - w[0].state[0]).hypot(w[1].state[1] - w[0].state[1]))
            .sum()
    }
}

pub fn synth_trajectory(cfg: &ScenarioConfig) -> Result<TrajectoryTruth> {
    cfg.validate()?;
    let tr = &cfg.trajectory;
    let path = Path::new(&tr.waypoints, tr.turn_radius)?;
    let mut rng = stream_rng(cfg.seed, STREAM_TRAJECTORY);
    let mut stops = tr.stops.clone();
    stops.extend(place_random_stops(tr, &path, &mut rng)?);
    let profile = SpeedProfile::build(tr, &path, &stops)?;

    let total = profile.duration();
    let steps = (total / cfg.dt + 1e-9).floor() as usize;
    let samples = (0..=steps)
        .map(|k| {
            let t = (k as f64 * cfg.dt).min(total);
            let (s, v) = profile.at(t);
            let (p, (tx, ty)) = path.locate(s);
            TruthSample {
                t,
                state: Vector4::new(p.x, p.y, v * tx, v * ty),
            }
        })
        .collect();
    Ok(TrajectoryTruth { samples })
}

/// BSs every `spacing` meters of travelled distance, offset to the left of
/// the direction of travel. The first site sits at the start of the path.
pub fn place_bs(truth: &TrajectoryTruth, spacing: f64, height: f64, lateral_offset: f64) -> Result<Vec<BsSite>> {
    positive("scenario.bs_spacing_m", spacing)?;
    let mut pts: Vec<Position2> = Vec::with_capacity(truth.len());
    for s in &truth.samples {
        let p = Position2::new(s.state[0], s.state[1]);
        if pts.last().is_none_or(|q| q.distance(&p) > 1e-9) {
            pts.push(p);
        }
    }
    if pts.is_empty() {
        return Ok(Vec::new());
    }
    if pts.len() == 1 {
        return Ok(vec![BsSite::new(0, pts[0].with_height(height))]);
    }
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + w[0].distance(&w[1]));
    }
    let total = *cum.last().unwrap();
    let mut sites = Vec::new();
    let mut k = 0u32;
    loop {
        let s = f64::from(k) * spacing;
        if s > total + 1e-9 {
            break;
        }
        let i = cum.partition_point(|&c| c <= s).clamp(1, pts.len() - 1) - 1;
        let (a, b) = (pts[i], pts[i + 1]);
        let seg = cum[i + 1] - cum[i];
        let u = ((s - cum[i]) / seg).clamp(0.0, 1.0);
        let (tx, ty) = ((b.x - a.x) / seg, (b.y - a.y) / seg);
        let foot = Position2::new(a.x + (b.x - a.x) * u, a.y + (b.y - a.y) * u);
        let pos = Position3::new(foot.x - ty * lateral_offset, foot.y + tx * lateral_offset, height);
        sites.push(BsSite::new(k, pos));
        k += 1;
    }
    Ok(sites)
}

// ---------------------------------------------------------------------------
// LOS visibility
// ---------------------------------------------------------------------------

/// Visible-count process over {0, 1, 2, 3}. Each step the count is redrawn
/// from the target marginals with probability `dt / mean_dwell`, giving
/// geometric dwell times and a stationary distribution equal to the marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct LosProcess {
    marginals: [f64; 4],
    redraw_probability: f64,
    count: usize,
}

fn draw_count(marginals: &[f64; 4], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (count, p) in marginals.iter().enumerate() {
        acc += p;
        if u < acc {
            return count;
        }
    }
    marginals.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl LosProcess {
    pub fn new(cfg: &LosProcessConfig, dt: f64, rng: &mut impl Rng) -> Self {
        Self {
            marginals: cfg.marginals,
            redraw_probability: (dt / cfg.mean_dwell).min(1.0),
            count: draw_count(&cfg.marginals, rng),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Advances one epoch and returns the number of LOS BSs.
    pub fn step(&mut self, rng: &mut impl Rng) -> usize {
        if rng.random::<f64>() < self.redraw_probability {
            self.count = draw_count(&self.marginals, rng);
        }
        self.count
    }
}

/// The `k` sites nearest to `p` in ascending horizontal distance.
pub fn nearest_sites<'a>(sites: &'a [BsSite], p: &Position2, k: usize) -> Vec<&'a BsSite> {
    let mut by_distance: Vec<&BsSite> = sites.iter().collect();
    by_distance.sort_by(|a, b| {
        a.pos
            .horizontal()
            .distance(p)
            .total_cmp(&b.pos.horizontal().distance(p))
            .then(a.id.cmp(&b.id))
    });
    by_distance.truncate(k);
    by_distance
}

/// `(site, los)` pairs for one epoch; the nearest `visible` sites are LOS.
pub type EpochFlags = Vec<(BsSite, bool)>;

/// Per-epoch LOS flags for the nearest candidate BSs.
pub fn los_schedule(
    truth: &TrajectoryTruth,
    sites: &[BsSite],
    cfg: &LosProcessConfig,
    dt: f64,
    rng: &mut impl Rng,
) -> Vec<EpochFlags> {
    let mut process = LosProcess::new(cfg, dt, rng);
    truth
        .samples
        .iter()
        .map(|s| {
            let visible = process.step(rng);
            let p = Position2::new(s.state[0], s.state[1]);
            nearest_sites(sites, &p, cfg.candidates)
                .into_iter()
                .enumerate()
                .map(|(rank, site)| (*site, rank < visible))
                .collect()
        })
        .collect()
}

/// Corrupted observation of one BS.
pub fn corrupt(
    truth: &RawMeasurement,
    los: bool,
    noise: &NoiseInjection,
    rng: &mut impl Rng,
) -> RawMeasurement {
    let gauss = |sigma: f64, rng: &mut dyn rand::RngCore| {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
        } else {
            0.0
        }
    };
    let mut range_toa = truth.range_toa + gauss(noise.sigma_range, rng);
    let mut azimuth = truth.azimuth + gauss(noise.sigma_angle, rng);
    let range_rss = (truth.range_rss + gauss(noise.sigma_rss_range, rng)).max(0.0);
    if !los {
        if noise.nlos_bias_mean > 0.0 {
            range_toa += Exp::new(1.0 / noise.nlos_bias_mean)
                .expect("positive rate")
                .sample(rng);
        }
        if noise.nlos_angle_bias > 0.0 {
            azimuth += Uniform::new_inclusive(-noise.nlos_angle_bias, noise.nlos_angle_bias)
                .expect("valid bounds")
                .sample(rng);
        }
    }
    RawMeasurement {
        range_toa: range_toa.max(0.0),
        azimuth: if azimuth > PI || azimuth <= -PI {
            wrap_angle(azimuth)
        } else {
            azimuth
        },
        range_rss,
        los,
    }
}

pub fn synth_measurements(
    truth: &TrajectoryTruth,
    flags: &[EpochFlags],
    noise: &NoiseInjection,
    ue_height: f64,
    rng: &mut impl Rng,
) -> Vec<EpochFrame> {
    truth
        .samples
        .iter()
        .zip(flags)
        .map(|(sample, epoch)| {
            let ue = Position3::new(sample.state[0], sample.state[1], ue_height);
            let mut obs: Vec<Observation> = epoch
                .iter()
                .filter_map(|(site, los)| {
                    // a UE directly under the mast has no defined azimuth
                    let exact = measure(site, &ue).ok()?;
                    let clean = RawMeasurement {
                        range_toa: exact.range,
                        azimuth: exact.azimuth,
                        range_rss: exact.range,
                        los: true,
                    };
                    Some(Observation {
                        site: *site,
                        meas: corrupt(&clean, *los, noise, rng),
                    })
                })
                .collect();
            obs.sort_by_key(|o| o.site.id);
            EpochFrame {
                t: sample.t,
                truth: sample.state,
                obs,
                ue_height,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeasurementMode {
    /// Noise-free measurements from every candidate BS, all LOS.
    Perfect,
    /// Injected noise and NLOS corruption driven by the LOS process.
    Noisy,
}

impl MeasurementMode {
    pub fn name(self) -> &'static str {
        match self {
            MeasurementMode::Perfect => "perfect",
            MeasurementMode::Noisy => "noisy",
        }
    }
}

impl fmt::Display for MeasurementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MeasurementMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "perfect" => Ok(MeasurementMode::Perfect),
            "noisy" => Ok(MeasurementMode::Noisy),
            other => Err(format!("unknown mode `{other}` (valid: perfect, noisy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub truth: TrajectoryTruth,
    pub sites: Vec<BsSite>,
    pub frames: Vec<EpochFrame>,
}

pub fn simulate(cfg: &ScenarioConfig, mode: MeasurementMode) -> Result<Scenario> {
    let truth = synth_trajectory(cfg)?;
    let sites = place_bs(&truth, cfg.bs_spacing, cfg.bs_height, cfg.bs_lateral_offset)?;
    let mut los_rng = stream_rng(cfg.seed, STREAM_LOS);
    let mut noise_rng = stream_rng(cfg.seed, STREAM_NOISE);
    let (flags, noise) = match mode {
        MeasurementMode::Noisy => (
            los_schedule(&truth, &sites, &cfg.los, cfg.dt, &mut los_rng),
            cfg.noise,
        ),
        MeasurementMode::Perfect => {
            let all_los = LosProcessConfig {
                marginals: [0.0, 0.0, 0.0, 1.0],
                ..cfg.los
            };
            let mut flags = los_schedule(&truth, &sites, &all_los, cfg.dt, &mut los_rng);
            for epoch in &mut flags {
                for (_, los) in epoch.iter_mut() {
                    *los = true;
                }
            }
            (flags, NoiseInjection::ZERO)
        }
    };
    let frames = synth_measurements(&truth, &flags, &noise, cfg.ue_height, &mut noise_rng);
    Ok(Scenario {
        truth,
        sites,
        frames,
    })
}
