//! Linearization-error studies and scenario error statistics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::filters::GaussianBelief;
use crate::fusion::{EpochDiagnostics, EpochFrame, FusionConfig, SchemeId, Tracker};
use crate::geom::wrap_angle;
use crate::sim::{simulate, MeasurementMode, Scenario, ScenarioConfig};

pub const MIN_STUDY_SAMPLES: usize = 10_000;

/// Sample mean and unbiased sample variance.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyQuantity {
    Range,
    Angle,
}

impl StudyQuantity {
    pub fn name(self) -> &'static str {
        match self {
            StudyQuantity::Range => "range",
            StudyQuantity::Angle => "angle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdfStudyResult {
    pub quantity: StudyQuantity,
    pub nonlinear: Vec<f64>,
    pub linearized: Vec<f64>,
    pub nonlinear_mean: f64,
    pub nonlinear_variance: f64,
    pub linearized_mean: f64,
    pub linearized_variance: f64,
}

impl PdfStudyResult {
    fn new(quantity: StudyQuantity, nonlinear: Vec<f64>, linearized: Vec<f64>) -> Self {
        let (nonlinear_mean, nonlinear_variance) = mean_variance(&nonlinear);
        let (linearized_mean, linearized_variance) = mean_variance(&linearized);
        Self {
            quantity,
            nonlinear,
            linearized,
            nonlinear_mean,
            nonlinear_variance,
            linearized_mean,
            linearized_variance,
        }
    }
}

/// Pushes a Gaussian cloud of UE positions (relative to the BS) through the
/// exact 2D range/azimuth and through their first-order expansion about the
/// cloud mean.
///
/// Nonlinear angles are unwrapped to the branch nearest the mean azimuth so
/// that the two distributions share a frame.
pub fn pdf_transform_study(
    mean_offset: (f64, f64),
    sigma: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(PdfStudyResult, PdfStudyResult)> {
    if n < MIN_STUDY_SAMPLES {
        return Err(Error::invalid(
            "study.n",
            format!("at least {MIN_STUDY_SAMPLES} samples are required, got {n}"),
        ));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid("study.sigma_m", format!("must be positive, got {sigma}")));
    }
    let (mx, my) = mean_offset;
    let r0 = mx.hypot(my);
    if !(mx.is_finite() && my.is_finite()) || r0 < crate::geom::DEGENERATE_HORIZONTAL_RANGE {
        return Err(Error::DegenerateGeometry { horizontal_range: r0 });
    }
    let th0 = my.atan2(mx);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut range = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut angle = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let ex = normal.sample(rng);
        let ey = normal.sample(rng);
        let (x, y) = (mx + ex, my + ey);
        range.0.push(x.hypot(y));
        range.1.push(r0 + (mx * ex + my * ey) / r0);
        angle.0.push(th0 + wrap_angle(y.atan2(x) - th0));
        angle.1.push(th0 + (mx * ey - my * ex) / (r0 * r0));
    }
    Ok((
        PdfStudyResult::new(StudyQuantity::Range, range.0, range.1),
        PdfStudyResult::new(StudyQuantity::Angle, angle.0, angle.1),
    ))
}

/// Inclusive `min:max:step` axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

pub const MAX_GRID_CELLS: usize = 10_000_000;

impl AxisSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.min.is_finite() && self.max.is_finite() && self.step.is_finite()) {
            return Err(Error::invalid("grid", "bounds and step must be finite"));
        }
        if self.step <= 0.0 {
            return Err(Error::invalid("grid", format!("step must be positive, got {}", self.step)));
        }
        if self.max < self.min {
            return Err(Error::invalid("grid", format!("max {} is below min {}", self.max, self.min)));
        }
        let count = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        if count > MAX_GRID_CELLS {
            return Err(Error::invalid("grid", format!("{count} points on one axis is too many")));
        }
        Ok((0..count).map(|k| self.min + k as f64 * self.step).collect())
    }
}

impl std::str::FromStr for AxisSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [min, max, step] = parts.as_slice() else {
            return Err(format!("axis `{s}` must look like min:max:step"));
        };
        let num = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("`{p}` in axis `{s}`: {e}"));
        Ok(Self {
            min: num(min)?,
            max: num(max)?,
            step: num(step)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x: AxisSpec,
    pub y: AxisSpec,
}

impl std::str::FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (x, y) = s
            .split_once(',')
            .ok_or_else(|| format!("grid `{s}` must look like xmin:xmax:step,ymin:ymax:step"))?;
        Ok(Self {
            x: x.parse()?,
            y: y.parse()?,
        })
    }
}

impl Default for GridSpec {
    /// First quadrant out to 10 m, which contains the 45° diagonal and
    /// reaches both axes.
    fn default() -> Self {
        let axis = AxisSpec {
            min: 0.25,
            max: 10.0,
            step: 0.25,
        };
        Self { x: axis, y: axis }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshStudyResult {
    pub lin_point: (f64, f64),
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major by y: `range_err[iy * xs.len() + ix]`.
    pub range_err: Vec<f64>,
    pub angle_err: Vec<f64>,
}

impl MeshStudyResult {
    pub fn range_at(&self, ix: usize, iy: usize) -> f64 {
        self.range_err[iy * self.xs.len() + ix]
    }

    pub fn angle_at(&self, ix: usize, iy: usize) -> f64 {
        self.angle_err[iy * self.xs.len() + ix]
    }

    pub fn max_angle_err(&self) -> f64 {
        self.angle_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Absolute range and angle error of the first-order model about `lin` at
/// UE offset `p`. The nonlinear azimuth is taken on the branch nearest the
/// linearization azimuth, so the angle error can exceed 180° where the linear
/// model runs away.
pub fn linearization_errors(p: (f64, f64), lin: (f64, f64)) -> (f64, f64) {
    let (x0, y0) = lin;
    let r0 = x0.hypot(y0);
    let th0 = y0.atan2(x0);
    let (dx, dy) = (p.0 - x0, p.1 - y0);
    let range_lin = r0 + (x0 * dx + y0 * dy) / r0;
    let angle_lin = th0 + (x0 * dy - y0 * dx) / (r0 * r0);
    let range = p.0.hypot(p.1);
    let angle = th0 + wrap_angle(p.1.atan2(p.0) - th0);
    ((range - range_lin).abs(), (angle - angle_lin).abs())
}

pub fn mesh_linearization_study(grid: &GridSpec, lin_point: (f64, f64)) -> Result<MeshStudyResult> {
    let xs = grid.x.values()?;
    let ys = grid.y.values()?;
    if xs.len().saturating_mul(ys.len()) > MAX_GRID_CELLS {
        return Err(Error::invalid("grid", "grid has too many cells"));
    }
    let lin_range = lin_point.0.hypot(lin_point.1);
    if !lin_range.is_finite() || lin_range < crate::geom::DEGENERATE_HORIZONTAL_RANGE {
        return Err(Error::DegenerateGeometry {
            horizontal_range: lin_range,
        });
    }
    let near = |v: &f64| v.abs() < crate::geom::DEGENERATE_HORIZONTAL_RANGE;
    if xs.iter().any(near) && ys.iter().any(near) {
        return Err(Error::invalid("grid", "grid must not contain the BS location"));
    }
    let mut range_err = Vec::with_capacity(xs.len() * ys.len());
    let mut angle_err = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let (r, a) = linearization_errors((x, y), lin_point);
            range_err.push(r);
            angle_err.push(a);
        }
    }
    Ok(MeshStudyResult {
        lin_point,
        xs,
        ys,
        range_err,
        angle_err,
    })
}

/// Linearization point at `range` meters along azimuth `deg`.
pub fn lin_point_polar(range: f64, deg: f64) -> (f64, f64) {
    let (s, c) = deg.to_radians().sin_cos();
    (range * c, range * s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorPoint {
    pub t: f64,
    pub error: f64,
    pub n_bs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorSeries {
    pub points: Vec<ErrorPoint>,
}

impl ErrorSeries {
    pub fn errors(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.error).collect()
    }

    /// Points with `t >= t0`.
    pub fn after(&self, t0: f64) -> ErrorSeries {
        ErrorSeries {
            points: self.points.iter().filter(|p| p.t >= t0).copied().collect(),
        }
    }
}

pub const THRESHOLDS: [f64; 3] = [2.0, 1.0, 0.3];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rms: f64,
    pub max: f64,
    /// Fraction of epochs strictly below each of [`THRESHOLDS`].
    pub pct_lt: [(f64, f64); 3],
    /// Sorted `(error, (i + 1) / n)` pairs.
    pub cdf: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn fraction_below(&self, threshold: f64) -> Option<f64> {
        self.pct_lt
            .iter()
            .find(|(t, _)| (*t - threshold).abs() < 1e-12)
            .map(|(_, f)| *f)
    }
}

pub fn metrics(series: &ErrorSeries) -> Result<MetricsReport> {
    let mut errors = series.errors();
    if errors.is_empty() {
        return Err(Error::EmptySeries);
    }
    if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::NonFinite);
    }
    let n = errors.len() as f64;
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    errors.sort_by(f64::total_cmp);
    let max = *errors.last().unwrap();
    let pct_lt = THRESHOLDS.map(|t| (t, errors.iter().filter(|e| **e < t).count() as f64 / n));
    let cdf = errors
        .iter()
        .enumerate()
        .map(|(i, e)| (*e, (i + 1) as f64 / n))
        .collect();
    Ok(MetricsReport {
        rms: rms.min(max),
        max,
        pct_lt,
        cdf,
    })
}

/// One scheme over one frame stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeRun {
    pub scheme: SchemeId,
    pub series: ErrorSeries,
    pub metrics: MetricsReport,
    pub estimates: Vec<(f64, GaussianBelief)>,
    pub diagnostics: Vec<EpochDiagnostics>,
}

impl SchemeRun {
    pub fn predict_only_epochs(&self) -> usize {
        self.diagnostics.iter().filter(|d| !d.updated).count()
    }
}

/// Runs the tracker over `frames`. Epochs before initialization are not
/// scored.
pub fn evaluate(frames: &[EpochFrame], fusion: &FusionConfig, scheme: SchemeId, gate_on: bool) -> Result<SchemeRun> {
    fusion.validate()?;
    let mut tracker = Tracker::new(fusion, scheme, gate_on);
    let mut series = ErrorSeries::default();
    let mut estimates = Vec::with_capacity(frames.len());
    let mut diagnostics = Vec::with_capacity(frames.len());
    for frame in frames {
        if let Some((belief, diag)) = tracker.process(frame)? {
            series.points.push(ErrorPoint {
                t: frame.t,
                error: diag.error_2d,
                n_bs: diag.admitted.len(),
            });
            estimates.push((frame.t, belief));
            diagnostics.push(diag);
        }
    }
    let metrics = metrics(&series)?;
    Ok(SchemeRun {
        scheme,
        series,
        metrics,
        estimates,
        diagnostics,
    })
}

pub fn run_scenario(
    cfg: &ScenarioConfig,
    fusion: &FusionConfig,
    scheme: SchemeId,
    mode: MeasurementMode,
    gate_on: bool,
) -> Result<(Scenario, SchemeRun)> {
    let scenario = simulate(cfg, mode)?;
    let run = evaluate(&scenario.frames, fusion, scheme, gate_on)?;
    Ok((scenario, run))
}
