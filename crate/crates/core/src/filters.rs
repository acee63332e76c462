//! Linear KF, EKF and UKF over the 4-state constant-velocity model
//! `[x, y, vx, vy]`.
//!
//! All operations are value-in/value-out: a [`GaussianBelief`] goes in and a
//! new one comes out. Every update resymmetrizes the posterior covariance.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Matrix4x2, Vector4};

use crate::error::{Error, Result};

pub type StateVector = Vector4<f64>;
pub type StateMatrix = Matrix4<f64>;

pub const STATE_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBelief {
    pub mean: StateVector,
    pub cov: StateMatrix,
}

impl GaussianBelief {
    pub fn new(mean: StateVector, cov: StateMatrix) -> Self {
        Self { mean, cov }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.mean[0], self.mean[1])
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite())
    }

    fn symmetrized(mut self) -> Self {
        self.cov = (self.cov + self.cov.transpose()) * 0.5;
        self
    }
}

/// State transition `x' = Φx`, `P' = ΦPΦᵀ + GQGᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSpec {
    pub phi: StateMatrix,
    pub g: Matrix4x2<f64>,
    pub q: Matrix2<f64>,
    pub dt: f64,
}

impl TransitionSpec {
    /// Constant velocity driven by white acceleration noise of standard
    /// deviation `sigma_accel` (m/s²) on each axis.
    pub fn constant_velocity(dt: f64, sigma_accel: f64) -> Self {
        #[rustfmt::skip]
        let phi = Matrix4::new(
            1.0, 0.0, dt,  0.0,
            0.0, 1.0, 0.0, dt,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        let half = 0.5 * dt * dt;
        #[rustfmt::skip]
        let g = Matrix4x2::new(
            half, 0.0,
            0.0,  half,
            dt,   0.0,
            0.0,  dt,
        );
        let q = Matrix2::identity() * (sigma_accel * sigma_accel);
        Self { phi, g, q, dt }
    }
}

pub fn predict(belief: &GaussianBelief, t: &TransitionSpec) -> GaussianBelief {
    let mean = t.phi * belief.mean;
    let cov = t.phi * belief.cov * t.phi.transpose() + t.g * t.q * t.g.transpose();
    GaussianBelief { mean, cov }.symmetrized()
}

/// Linear observation `z = Hx + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMeasSpec {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// A (possibly nonlinear) observation model with its Jacobian and a
/// residual that knows which rows are angles.
pub trait MeasurementModel {
    fn dim(&self) -> usize;

    /// Predicted measurement `h(x)`.
    fn predict(&self, state: &StateVector) -> Result<DVector<f64>>;

    /// Jacobian of `h` evaluated at `state`, `dim() × 4`.
    fn jacobian(&self, state: &StateVector) -> Result<DMatrix<f64>>;

    fn noise_cov(&self) -> &DMatrix<f64>;

    /// `observed - predicted` with any angle rows wrapped to (-π, π].
    fn residual(&self, observed: &DVector<f64>, predicted: &DVector<f64>) -> DVector<f64> {
        observed - predicted
    }
}

impl MeasurementModel for LinearMeasSpec {
    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn predict(&self, state: &StateVector) -> Result<DVector<f64>> {
        Ok(&self.h * state)
    }

    fn jacobian(&self, _state: &StateVector) -> Result<DMatrix<f64>> {
        Ok(self.h.clone())
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutput {
    pub posterior: GaussianBelief,
    /// The residual the gain was applied to.
    pub innovation: DVector<f64>,
}

fn check_dims(z: &DVector<f64>, rows: usize, r: &DMatrix<f64>) -> Result<()> {
    if z.len() != rows || r.nrows() != rows || r.ncols() != rows {
        return Err(Error::invalid(
            "measurement",
            format!(
                "dimension mismatch: z has {} rows, model {}, R is {}x{}",
                z.len(),
                rows,
                r.nrows(),
                r.ncols()
            ),
        ));
    }
    Ok(())
}

/// Solves `S Xᵀ = Bᵀ` for the gain, i.e. `X = B S⁻¹` for symmetric `S`.
fn solve_gain(cross: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let kt = s
        .clone()
        .lu()
        .solve(&cross.transpose())
        .ok_or(Error::SingularInnovation)?;
    if kt.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInnovation);
    }
    Ok(kt.transpose())
}

fn gain_correction(
    belief: &GaussianBelief,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    innovation: DVector<f64>,
) -> Result<UpdateOutput> {
    let p = DMatrix::from_column_slice(4, 4, belief.cov.as_slice());
    let pht = &p * h.transpose();
    let s = h * &pht + r;
    let k = solve_gain(&pht, &s)?;
    let dx = &k * &innovation;
    let dp = &k * h * &p;
    let posterior = GaussianBelief {
        mean: belief.mean + Vector4::from_column_slice(dx.as_slice()),
        cov: belief.cov - Matrix4::from_column_slice(dp.as_slice()),
    }
    .symmetrized();
    if !posterior.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(UpdateOutput {
        posterior,
        innovation,
    })
}

pub fn kf_update(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    m: &LinearMeasSpec,
) -> Result<UpdateOutput> {
    check_dims(z, m.h.nrows(), &m.r)?;
    let innovation = z - &m.h * belief.mean;
    gain_correction(belief, &m.h, &m.r, innovation)
}

/// EKF correction. The innovation is always `z - h(x⁻)` from the model's
/// nonlinear prediction; the Jacobian only enters the gain.
pub fn ekf_update<M: MeasurementModel + ?Sized>(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    m: &M,
) -> Result<UpdateOutput> {
    check_dims(z, m.dim(), m.noise_cov())?;
    let predicted = m.predict(&belief.mean)?;
    let h = m.jacobian(&belief.mean)?;
    let innovation = m.residual(z, &predicted);
    gain_correction(belief, &h, m.noise_cov(), innovation)
}

/// Scaled unscented transform parameters for state dimension `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnscentedParams {
    pub lambda: f64,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

impl UnscentedParams {
    pub fn scaled(n: usize, alpha: f64, beta: f64, kappa: f64) -> Result<Self> {
        let nf = n as f64;
        let lambda = alpha * alpha * (nf + kappa) - nf;
        if !(nf + lambda > 0.0) {
            return Err(Error::invalid(
                "ukf",
                format!("n + lambda must be positive, got {}", nf + lambda),
            ));
        }
        let w0 = lambda / (nf + lambda);
        let wi = 1.0 / (2.0 * (nf + lambda));
        let mut mean_weights = vec![wi; 2 * n + 1];
        let mut cov_weights = mean_weights.clone();
        mean_weights[0] = w0;
        cov_weights[0] = w0 + (1.0 - alpha * alpha + beta);
        Ok(Self {
            lambda,
            mean_weights,
            cov_weights,
        })
    }

    /// Number of sigma points, `2n + 1`.
    pub fn point_count(&self) -> usize {
        self.mean_weights.len()
    }

    pub fn state_dim(&self) -> usize {
        (self.point_count() - 1) / 2
    }
}

impl Default for UnscentedParams {
    /// α = 1, β = 2, κ = 3 − n for the 4-state model (λ = −1).
    fn default() -> Self {
        Self::scaled(STATE_DIM, 1.0, 2.0, 3.0 - STATE_DIM as f64)
            .expect("default unscented parameters are valid")
    }
}

/// Lower Cholesky factor. On failure the diagonal is loaded with
/// `1e-12 · trace(P) / n` once before giving up.
pub fn cholesky_with_jitter(cov: &StateMatrix) -> Result<StateMatrix> {
    if let Some(chol) = cov.cholesky() {
        return Ok(chol.l());
    }
    let jitter = 1e-12 * cov.trace().abs() / STATE_DIM as f64;
    let loaded = cov + StateMatrix::identity() * jitter;
    loaded
        .cholesky()
        .map(|c| c.l())
        .ok_or(Error::NonPsdCovariance)
}

pub fn sigma_points(belief: &GaussianBelief, p: &UnscentedParams) -> Result<Vec<StateVector>> {
    if p.state_dim() != STATE_DIM {
        return Err(Error::invalid(
            "ukf",
            format!("weights built for n = {}, state has n = {STATE_DIM}", p.state_dim()),
        ));
    }
    let l = cholesky_with_jitter(&belief.cov)?;
    let scale = (STATE_DIM as f64 + p.lambda).sqrt();
    let mut points = Vec::with_capacity(p.point_count());
    points.push(belief.mean);
    for sign in [1.0, -1.0] {
        for j in 0..STATE_DIM {
            points.push(belief.mean + l.column(j) * (sign * scale));
        }
    }
    Ok(points)
}

/// UKF correction in the standard form `x⁺ = x⁻ + K(z − ẑ)`,
/// `P⁺ = P⁻ − K P_z Kᵀ`. Sigma points are drawn from the prior belief, so a
/// prediction done with [`predict`] (including `GQGᵀ`) is already reflected.
pub fn ukf_update<M: MeasurementModel + ?Sized>(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    m: &M,
    p: &UnscentedParams,
) -> Result<UpdateOutput> {
    let dim = m.dim();
    check_dims(z, dim, m.noise_cov())?;
    let points = sigma_points(belief, p)?;
    let projected = points
        .iter()
        .map(|x| m.predict(x))
        .collect::<Result<Vec<_>>>()?;

    // Mean taken through the residual so angle rows average on the circle.
    let anchor = &projected[0];
    let mut z_hat = anchor.clone();
    for (w, zi) in p.mean_weights.iter().zip(&projected) {
        z_hat += m.residual(zi, anchor) * *w;
    }

    let mut pz = m.noise_cov().clone();
    let mut pxz = DMatrix::<f64>::zeros(STATE_DIM, dim);
    for ((w, xi), zi) in p.cov_weights.iter().zip(&points).zip(&projected) {
        let dz = m.residual(zi, &z_hat);
        let dx = DVector::from_column_slice((xi - belief.mean).as_slice());
        pz += &dz * dz.transpose() * *w;
        pxz += &dx * dz.transpose() * *w;
    }

    let k = solve_gain(&pxz, &pz)?;
    let innovation = m.residual(z, &z_hat);
    let dx = &k * &innovation;
    let dp = &k * &pz * k.transpose();
    let posterior = GaussianBelief {
        mean: belief.mean + Vector4::from_column_slice(dx.as_slice()),
        cov: belief.cov - Matrix4::from_column_slice(dp.as_slice()),
    }
    .symmetrized();
    if !posterior.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(UpdateOutput {
        posterior,
        innovation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::wrap_angle;

    fn belief(mean: [f64; 4], cov: StateMatrix) -> GaussianBelief {
        GaussianBelief::new(Vector4::from(mean), cov)
    }

    #[test]
    fn predict_pure_kinematics() {
        let t = TransitionSpec::constant_velocity(1.0, 0.0);
        let out = predict(&belief([0.0, 0.0, 1.0, 2.0], StateMatrix::identity()), &t);
        assert_eq!(out.mean, Vector4::new(1.0, 2.0, 1.0, 2.0));
        let expected = t.phi * t.phi.transpose();
        assert!((out.cov - expected).abs().max() < 1e-15);
    }

    #[test]
    fn process_noise_only_adds_uncertainty() {
        let t = TransitionSpec::constant_velocity(0.1, 1.5);
        let b = belief([1.0, 2.0, 3.0, 4.0], StateMatrix::from_diagonal(&Vector4::new(2.0, 1.0, 0.5, 0.1)));
        let out = predict(&b, &t);
        let noiseless = (t.phi * b.cov * t.phi.transpose()).trace();
        assert!(out.cov.trace() >= noiseless);
    }

    #[test]
    fn scalar_kf_oracle() {
        // One-dimensional KF with P=1, H=1, R=1, x=0, z=2: gain 1/2.
        let b = belief([0.0, 0.0, 0.0, 0.0], StateMatrix::identity());
        let m = LinearMeasSpec {
            h: DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]),
            r: DMatrix::from_element(1, 1, 1.0),
        };
        let out = kf_update(&b, &DVector::from_element(1, 2.0), &m).unwrap();
        assert!((out.posterior.mean[0] - 1.0).abs() < 1e-15);
        assert!((out.posterior.cov[(0, 0)] - 0.5).abs() < 1e-15);
        // unobserved, uncorrelated states untouched
        assert_eq!(out.posterior.cov[(1, 1)], 1.0);
    }

    #[test]
    fn zero_innovation_leaves_mean() {
        let b = belief([3.0, -1.0, 0.5, 0.2], StateMatrix::identity() * 4.0);
        let m = LinearMeasSpec {
            h: DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            r: DMatrix::identity(2, 2) * 0.25,
        };
        let z = &m.h * b.mean;
        let out = kf_update(&b, &z, &m).unwrap();
        assert_eq!(out.posterior.mean, b.mean);
        assert!(out.posterior.cov.trace() < b.cov.trace());
    }

    #[test]
    fn uninformative_measurement() {
        let b = belief([3.0, -1.0, 0.5, 0.2], StateMatrix::identity());
        let m = LinearMeasSpec {
            h: DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            r: DMatrix::identity(2, 2) * 1e12,
        };
        let out = kf_update(&b, &DVector::from_vec(vec![100.0, 100.0]), &m).unwrap();
        assert!((out.posterior.mean - b.mean).abs().max() < 1e-6);
        assert!((out.posterior.cov - b.cov).abs().max() < 1e-6);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let b = belief([0.0; 4], StateMatrix::zeros());
        let m = LinearMeasSpec {
            h: DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]),
            r: DMatrix::zeros(1, 1),
        };
        let err = kf_update(&b, &DVector::from_element(1, 1.0), &m).unwrap_err();
        assert_eq!(err, Error::SingularInnovation);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let b = belief([0.0; 4], StateMatrix::identity());
        let m = LinearMeasSpec {
            h: DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]),
            r: DMatrix::identity(1, 1),
        };
        assert!(kf_update(&b, &DVector::zeros(2), &m).is_err());
    }

    struct Bearing;

    impl MeasurementModel for Bearing {
        fn dim(&self) -> usize {
            1
        }
        fn predict(&self, x: &StateVector) -> Result<DVector<f64>> {
            Ok(DVector::from_element(1, x[1].atan2(x[0])))
        }
        fn jacobian(&self, x: &StateVector) -> Result<DMatrix<f64>> {
            let r2 = x[0] * x[0] + x[1] * x[1];
            Ok(DMatrix::from_row_slice(1, 4, &[-x[1] / r2, x[0] / r2, 0.0, 0.0]))
        }
        fn noise_cov(&self) -> &DMatrix<f64> {
            static R: std::sync::OnceLock<DMatrix<f64>> = std::sync::OnceLock::new();
            R.get_or_init(|| DMatrix::from_element(1, 1, 1e-4))
        }
        fn residual(&self, o: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
            (o - p).map(wrap_angle)
        }
    }

    #[test]
    fn ekf_wraps_angle_residual() {
        // predicted -179°, observed 179° -> residual -2°, not 358°
        let b = belief([-1.0, -(1f64.to_radians().tan()), 0.0, 0.0], StateMatrix::identity() * 0.01);
        let predicted = Bearing.predict(&b.mean).unwrap()[0];
        assert!((predicted.to_degrees() + 179.0).abs() < 1e-9);
        let z = DVector::from_element(1, 179f64.to_radians());
        let out = ekf_update(&b, &z, &Bearing).unwrap();
        assert!((out.innovation[0].to_degrees() + 2.0).abs() < 1e-9);
    }

    #[test]
    fn ekf_innovation_uses_nonlinear_prediction() {
        let b = belief([10.0, 5.0, 0.0, 0.0], StateMatrix::identity());
        let z = DVector::from_element(1, 0.5);
        let out = ekf_update(&b, &z, &Bearing).unwrap();
        let h_of_x = Bearing.predict(&b.mean).unwrap()[0];
        let hx = (Bearing.jacobian(&b.mean).unwrap() * DVector::from_column_slice(b.mean.as_slice()))[0];
        assert!((out.innovation[0] - (0.5 - h_of_x)).abs() < 1e-15);
        assert!((out.innovation[0] - (0.5 - hx)).abs() > 0.1);
    }

    #[test]
    fn default_weights() {
        let p = UnscentedParams::default();
        assert_eq!(p.point_count(), 9);
        assert_eq!(p.lambda, -1.0);
        assert!((p.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p.mean_weights[0] + 1.0 / 3.0).abs() < 1e-15);
        assert!((p.cov_weights[0] - 5.0 / 3.0).abs() < 1e-15);
        assert!((p.mean_weights[1] - 1.0 / 6.0).abs() < 1e-15);
        assert!(UnscentedParams::scaled(4, 1.0, 2.0, -4.0).is_err());
    }

    #[test]
    fn identity_sigma_points() {
        let p = UnscentedParams::scaled(4, 1.0, 2.0, 0.0).unwrap();
        assert_eq!(p.lambda, 0.0);
        let b = belief([1.0, 2.0, 3.0, 4.0], StateMatrix::identity());
        let pts = sigma_points(&b, &p).unwrap();
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], b.mean);
        for j in 0..4 {
            let e = StateVector::ith(j, 2.0);
            assert!((pts[1 + j] - (b.mean + e)).abs().max() < 1e-15);
            assert!((pts[5 + j] - (b.mean - e)).abs().max() < 1e-15);
        }
    }

    #[test]
    fn sigma_points_reconstruct_moments() {
        let a = Matrix4::new(
            2.0, 0.1, 0.0, 0.3, 0.0, 1.0, 0.2, 0.0, 0.4, 0.0, 0.5, 0.1, 0.0, 0.2, 0.0, 0.7,
        );
        let b = belief([5.0, -3.0, 1.0, 0.0], a * a.transpose());
        let p = UnscentedParams::default();
        let pts = sigma_points(&b, &p).unwrap();
        let mean: StateVector = pts.iter().zip(&p.mean_weights).map(|(x, w)| x * *w).sum();
        let cov: StateMatrix = pts
            .iter()
            .zip(&p.cov_weights)
            .map(|(x, w)| (x - b.mean) * (x - b.mean).transpose() * *w)
            .sum();
        assert!((mean - b.mean).abs().max() < 1e-12);
        assert!((cov - b.cov).abs().max() < 1e-9);
    }

    #[test]
    fn non_psd_covariance_fails_loudly() {
        let b = belief([0.0; 4], StateMatrix::from_diagonal(&Vector4::new(1.0, -1.0, 1.0, 1.0)));
        assert_eq!(
            sigma_points(&b, &UnscentedParams::default()).unwrap_err(),
            Error::NonPsdCovariance
        );
        // singular PSD survives through the jitter
        let singular = StateMatrix::from_diagonal(&Vector4::new(1.0, 1.0, 0.0, 0.0));
        assert!(cholesky_with_jitter(&singular).is_ok());
    }

    #[test]
    fn ukf_zero_innovation_leaves_mean() {
        let b = belief([10.0, 5.0, 1.0, 0.0], StateMatrix::identity() * 0.5);
        let p = UnscentedParams::default();
        let pts = sigma_points(&b, &p).unwrap();
        let mut z_hat = 0.0;
        for (x, w) in pts.iter().zip(&p.mean_weights) {
            z_hat += w * Bearing.predict(x).unwrap()[0];
        }
        let out = ukf_update(&b, &DVector::from_element(1, z_hat), &Bearing, &p).unwrap();
        assert!((out.posterior.mean - b.mean).abs().max() < 1e-12);
    }
}
