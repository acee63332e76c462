use mbsfuse_core::filters::*;
use mbsfuse_core::fusion::{NoiseDefaults, RangeAzimuthStack};
use mbsfuse_core::geom::{BsSite, Position3, wrap_angle};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_belief(rng: &mut impl Rng) -> GaussianBelief {
    let a = Matrix4::from_fn(|_, _| rng.random_range(-2.0..2.0));
    let cov = a * a.transpose() + Matrix4::identity() * 0.1;
    let mean = Vector4::from_fn(|_, _| rng.random_range(-100.0..100.0));
    GaussianBelief::new(mean, cov)
}

fn random_linear(rng: &mut impl Rng, rows: usize) -> LinearMeasSpec {
    let h = DMatrix::from_fn(rows, 4, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(rows, rows, |_, _| rng.random_range(-1.0..1.0));
    let r = &b * b.transpose() + DMatrix::identity(rows, rows) * 0.05;
    LinearMeasSpec { h, r }
}

fn max_abs_diff(a: &GaussianBelief, b: &GaussianBelief) -> (f64, f64) {
    ((a.mean - b.mean).amax(), (a.cov - b.cov).amax())
}

#[test]
fn unscented_and_extended_match_linear_on_affine_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = UnscentedParams::default();
    for i in 0..100 {
        let belief = random_belief(&mut rng);
        let spec = random_linear(&mut rng, 1 + i % 4);
        let z = DVector::from_fn(spec.h.nrows(), |_, _| rng.random_range(-100.0..100.0));
        let kf = kf_update(&belief, &z, &spec).unwrap().posterior;
        let ukf = ukf_update(&belief, &z, &spec, &params).unwrap().posterior;
        let ekf = ekf_update(&belief, &z, &spec).unwrap().posterior;
        let (dm, dc) = max_abs_diff(&kf, &ukf);
        assert!(dm < 1e-9 && dc < 1e-9, "ukf draw {i}: {dm:e} {dc:e}");
        let (dm, dc) = max_abs_diff(&kf, &ekf);
        assert!(dm < 1e-12 && dc < 1e-12, "ekf draw {i}: {dm:e} {dc:e}");
    }
}

#[test]
fn scalar_hand_computed_update() {
    // Only x is observed and all other states are uncorrelated with it.
    let belief = GaussianBelief::new(Vector4::zeros(), Matrix4::identity());
    let spec = LinearMeasSpec {
        h: DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]),
        r: DMatrix::from_element(1, 1, 1.0),
    };
    let out = kf_update(&belief, &DVector::from_element(1, 2.0), &spec).unwrap();
    assert!((out.posterior.mean[0] - 1.0).abs() < 1e-15);
    assert!((out.posterior.cov[(0, 0)] - 0.5).abs() < 1e-15);
    assert_eq!(out.posterior.cov[(1, 1)], 1.0);
}

#[test]
fn uninformative_measurement_leaves_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let belief = random_belief(&mut rng);
    let mut spec = random_linear(&mut rng, 2);
    spec.r *= 1e12;
    let z = DVector::from_vec(vec![1e3, -1e3]);
    let post = kf_update(&belief, &z, &spec).unwrap().posterior;
    let (dm, dc) = max_abs_diff(&belief, &post);
    assert!(dm < 1e-6 && dc < 1e-6);
}

#[test]
fn zero_innovation_keeps_mean_and_shrinks_cov() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let belief = random_belief(&mut rng);
    let spec = random_linear(&mut rng, 3);
    let z = &spec.h * belief.mean;
    let post = kf_update(&belief, &z, &spec).unwrap().posterior;
    assert!((post.mean - belief.mean).amax() < 1e-9);
    assert!(post.cov.trace() < belief.cov.trace());
}

#[test]
fn singular_innovation_is_reported() {
    let belief = GaussianBelief::new(Vector4::zeros(), Matrix4::zeros());
    let spec = LinearMeasSpec {
        h: DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]),
        r: DMatrix::zeros(1, 1),
    };
    let err = kf_update(&belief, &DVector::from_element(1, 1.0), &spec).unwrap_err();
    assert!(matches!(err, mbsfuse_core::Error::SingularInnovation));
}

#[test]
fn sigma_points_identity_and_reconstruction() {
    let p = UnscentedParams::scaled(4, 1.0, 2.0, 0.0).unwrap();
    let mean = Vector4::new(1.0, 2.0, 3.0, 4.0);
    let pts = sigma_points(&GaussianBelief::new(mean, Matrix4::identity()), &p).unwrap();
    assert_eq!(pts.len(), 9);
    for j in 0..4 {
        let e = Vector4::ith(j, 2.0);
        assert!((pts[1 + j] - (mean + e)).amax() < 1e-15);
        assert!((pts[5 + j] - (mean - e)).amax() < 1e-15);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = UnscentedParams::default();
    assert!((params.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for _ in 0..20 {
        let b = random_belief(&mut rng);
        let pts = sigma_points(&b, &params).unwrap();
        let m: Vector4<f64> = pts.iter().zip(&params.mean_weights).map(|(x, w)| x * *w).sum();
        // Mean weights sum to one, so the mean-weighted scatter about the
        // mean is the unscented covariance estimate.
        let c: Matrix4<f64> = pts
            .iter()
            .zip(&params.mean_weights)
            .map(|(x, w)| (x - b.mean) * (x - b.mean).transpose() * *w)
            .sum();
        assert!((m - b.mean).amax() < 1e-9);
        assert!((c - b.cov).amax() < 1e-9);
    }
}

#[test]
fn predict_grows_by_process_noise() {
    let t = TransitionSpec::constant_velocity(0.5, 2.0);
    let belief = GaussianBelief::new(Vector4::new(1.0, 2.0, 3.0, -4.0), Matrix4::zeros());
    let out = predict(&belief, &t);
    assert_eq!(out.mean, Vector4::new(2.5, 0.0, 3.0, -4.0));
    let q = t.g * (Matrix2::identity() * 4.0) * t.g.transpose();
    assert!((out.cov - q).amax() < 1e-15);
    // Position variance dt^4/4 * sigma^2.
    assert!((out.cov[(0, 0)] - 0.0625 / 4.0 * 4.0).abs() < 1e-15);
}

fn hybrid_model(sites: Vec<BsSite>, sigma_range: f64, sigma_angle: f64) -> RangeAzimuthStack {
    let noise = NoiseDefaults {
        sigma_range_filter: sigma_range,
        sigma_angle_filter: sigma_angle,
        sigma_fix_filter: 1.0,
    };
    RangeAzimuthStack::new(sites, true, &noise)
}

#[test]
fn ekf_innovation_uses_nonlinear_prediction() {
    let bs = BsSite::new(1, Position3::new(-20.0, 15.0, 10.0));
    let model = hybrid_model(vec![bs], 0.5, 0.05);
    let belief = GaussianBelief::new(Vector4::new(10.0, 40.0, 1.0, 0.0), Matrix4::identity());
    let z = DVector::from_vec(vec![40.0, 0.7]);
    // J·x differs from h(x) once the BS is away from the origin.
    let out = ekf_update(&belief, &z, &model).unwrap();
    let h = model.predict(&belief.mean).unwrap();
    let expected = DVector::from_vec(vec![z[0] - h[0], wrap_angle(z[1] - h[1])]);
    assert!((&out.innovation - &expected).amax() < 1e-15);
    let linear = &z - model.jacobian(&belief.mean).unwrap() * DVector::from_column_slice(belief.mean.as_slice());
    assert!((&out.innovation - linear).amax() > 1.0);
}

#[test]
fn angle_residual_wraps_across_pi() {
    let model = hybrid_model(vec![BsSite::new(1, Position3::new(0.0, 0.0, 0.0))], 1.0, 1.0);
    let obs = DVector::from_vec(vec![0.0, 179f64.to_radians()]);
    let pred = DVector::from_vec(vec![0.0, (-179f64).to_radians()]);
    let d = model.residual(&obs, &pred);
    assert!((d[1] - (-2f64).to_radians()).abs() < 1e-12);
}

// Brute-force MAP over a position grid; velocity is independent of position
// under the prior and unobserved, so it drops out.
fn grid_map(prior_mean: (f64, f64), sigma_p: f64, z: (f64, f64), sr: f64, sa: f64) -> (f64, f64) {
    let step = 0.005;
    let mut best = (f64::INFINITY, (0.0, 0.0));
    for i in -600..=600 {
        for j in -600..=600 {
            let x = prior_mean.0 + i as f64 * step;
            let y = prior_mean.1 + j as f64 * step;
            let dr = x.hypot(y) - z.0;
            let da = wrap_angle(y.atan2(x) - z.1);
            let dp = ((x - prior_mean.0).powi(2) + (y - prior_mean.1).powi(2)) / sigma_p.powi(2);
            let cost = (dr / sr).powi(2) + (da / sa).powi(2) + dp;
            if cost < best.0 {
                best = (cost, (x, y));
            }
        }
    }
    best.1
}

#[test]
fn single_bs_update_agrees_with_grid_map() {
    let bs = BsSite::new(1, Position3::new(0.0, 0.0, 10.0));
    let (sr, sa, sp) = (0.1, 0.01, 1.0);
    let model = hybrid_model(vec![bs], sr, sa);
    let truth = (30.0, 40.0);
    let prior_mean = (31.0, 39.5);
    let z = (50.0, 40f64.atan2(30.0));
    let belief = GaussianBelief::new(
        Vector4::new(prior_mean.0, prior_mean.1, 0.0, 0.0),
        Matrix4::from_diagonal(&Vector4::new(sp * sp, sp * sp, 4.0, 4.0)),
    );
    let post = ekf_update(&belief, &DVector::from_vec(vec![z.0, z.1]), &model).unwrap().posterior;
    let (ex, ey) = post.position();
    let before = (prior_mean.0 - truth.0).hypot(prior_mean.1 - truth.1);
    assert!((ex - truth.0).hypot(ey - truth.1) < before);
    let (mx, my) = grid_map(prior_mean, sp, z, sr, sa);
    assert!((ex - mx).hypot(ey - my) < 0.05, "ekf ({ex}, {ey}) map ({mx}, {my})");
}

fn position_mahalanobis(b: &GaussianBelief, truth: (f64, f64)) -> f64 {
    let d = nalgebra::Vector2::new(b.mean[0] - truth.0, b.mean[1] - truth.1);
    let p = b.cov.fixed_view::<2, 2>(0, 0).into_owned();
    (d.transpose() * p.try_inverse().unwrap() * d)[(0, 0)]
}

#[test]
fn unscented_beats_extended_near_the_bs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let bs = BsSite::new(1, Position3::new(0.0, 0.0, 10.0));
    let (sr, sa, sp) = (0.05, 0.02, 0.5);
    let model = hybrid_model(vec![bs], sr, sa);
    let params = UnscentedParams::default();
    let draws = 500;
    let mut wins = 0;
    for _ in 0..draws {
        let r: f64 = rng.random_range(0.2..1.0);
        let th: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let truth = (r * th.cos(), r * th.sin());
        let n: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let mean = Vector4::new(truth.0 + sp * n[0], truth.1 + sp * n[1], 0.0, 0.0);
        let belief = GaussianBelief::new(mean, Matrix4::from_diagonal(&Vector4::new(sp * sp, sp * sp, 1.0, 1.0)));
        let z = DVector::from_vec(vec![
            r + sr * n[2],
            wrap_angle(th + sa * n[3]),
        ]);
        let (Ok(ekf), Ok(ukf)) = (ekf_update(&belief, &z, &model), ukf_update(&belief, &z, &model, &params)) else {
            continue;
        };
        if position_mahalanobis(&ukf.posterior, truth) < position_mahalanobis(&ekf.posterior, truth) {
            wins += 1;
        }
    }
    let share = wins as f64 / draws as f64;
    assert!(share >= 0.6, "ukf closer in {share:.3} of draws");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_stays_healthy_and_contracts(seed in any::<u64>(), steps in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut belief = random_belief(&mut rng);
        let t = TransitionSpec::constant_velocity(0.1, 1.0);
        for k in 0..steps {
            belief = predict(&belief, &t);
            prop_assert!(cholesky_with_jitter(&belief.cov).is_ok());
            let spec = random_linear(&mut rng, 1 + k % 3);
            let z = DVector::from_fn(spec.h.nrows(), |_, _| rng.random_range(-10.0..10.0));
            let post = kf_update(&belief, &z, &spec).unwrap().posterior;
            prop_assert!(post.cov.trace() <= belief.cov.trace() + 1e-9);
            prop_assert!((post.cov - post.cov.transpose()).amax() <= 1e-9);
            prop_assert!(cholesky_with_jitter(&post.cov).is_ok());
            belief = post;
        }
    }

    #[test]
    fn ukf_zero_innovation_keeps_mean(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let belief = random_belief(&mut rng);
        let spec = random_linear(&mut rng, 2);
        let z = &spec.h * belief.mean;
        let post = ukf_update(&belief, &z, &spec, &UnscentedParams::default()).unwrap().posterior;
        prop_assert!((post.mean - belief.mean).amax() < 1e-9);
    }
}
