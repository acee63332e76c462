use std::f64::consts::PI;

use mbsfuse_core::geom::*;
use nalgebra::Vector4;
use proptest::prelude::*;

fn site(x: f64, y: f64, z: f64) -> BsSite {
    BsSite::new(7, Position3::new(x, y, z))
}

// Independent forward model written out from the component formulas.
fn oracle_range_azimuth(bs: &Position3, ue: &Position3) -> (f64, f64) {
    let (dx, dy, dz) = (ue.x - bs.x, ue.y - bs.y, ue.z - bs.z);
    let r = (dx.powi(2) + dy.powi(2) + dz.powi(2)).sqrt();
    let mut th = dy.atan2(dx);
    if th == -PI {
        th = PI;
    }
    (r, th)
}

#[test]
fn azimuth_quadrants() {
    let bs = site(0.0, 0.0, 0.0);
    let cases = [
        ((1.0, 0.0), 0.0),
        ((0.0, 1.0), PI / 2.0),
        ((-1.0, 0.0), PI),
        ((0.0, -1.0), -PI / 2.0),
        ((1.0, 1.0), PI / 4.0),
        ((-1.0, -1.0), -3.0 * PI / 4.0),
        ((-1.0, -0.0), PI),
    ];
    for ((x, y), want) in cases {
        let m = measure(&bs, &Position3::new(x, y, 0.0)).unwrap();
        assert!((m.azimuth - want).abs() < 1e-15, "({x}, {y}) -> {}", m.azimuth);
    }
}

#[test]
fn worked_fix_examples() {
    let bs = site(100.0, 50.0, 10.0);
    let meas = RangeAngle {
        range: 50.0,
        azimuth: 0.0,
        elevation: None,
    };
    // 3-4-5 style: horizontal 48 with |dz| = 14.
    let p = fix_2d(&bs, &meas, -4.0).unwrap();
    assert!((p.x - 148.0).abs() < 1e-12 && (p.y - 50.0).abs() < 1e-12);

    let short = RangeAngle { range: 5.0, ..meas };
    assert!(matches!(fix_2d(&bs, &short, 2.0), Err(mbsfuse_core::Error::InconsistentGeometry { .. })));
    assert!(matches!(fix_3d(&bs, &meas), Err(mbsfuse_core::Error::MissingElevation)));
}

#[test]
fn measure_matches_oracle() {
    let bs = site(-3.0, 8.0, 25.0);
    let ue = Position3::new(40.0, -17.5, 1.5);
    let (r, th) = oracle_range_azimuth(&bs.pos, &ue);
    let m = measure(&bs, &ue).unwrap();
    assert!((m.range - r).abs() < 1e-12);
    assert!((m.azimuth - th).abs() < 1e-15);
    let el = m.elevation.unwrap();
    assert!((el - (-23.5f64).atan2(43.0f64.hypot(25.5))).abs() < 1e-15);
}

#[test]
fn degenerate_horizontal_offset() {
    let bs = site(1.0, 1.0, 10.0);
    let ue = Position3::new(1.0, 1.0 + 1e-7, 2.0);
    assert!(matches!(measure(&bs, &ue), Err(mbsfuse_core::Error::DegenerateGeometry { .. })));
    let state = Vector4::new(1.0, 1.0, 3.0, 3.0);
    assert!(jacobian_rows(&state, &bs).is_err());
    assert!(horizontal_observation(&state, &bs).is_err());
}

#[test]
fn nlos_gate_boundary() {
    let at = |r_toa| detect_nlos(&NlosInputs {
        r_toa,
        r_rss: 100.0,
        epsilon: 80.0,
    });
    assert_eq!(at(180.0), LosVerdict::Los);
    assert_eq!(at(180.0 + 1e-9), LosVerdict::Nlos);
    assert_eq!(at(10.0), LosVerdict::Los);
}

fn finite_difference(state: &Vector4<f64>, bs: &BsSite) -> [[f64; 4]; 2] {
    let mut out = [[0.0; 4]; 2];
    for j in 0..4 {
        let h = 1e-6 * (1.0 + state[j].abs());
        let mut up = *state;
        let mut down = *state;
        up[j] += h;
        down[j] -= h;
        let (r1, a1) = horizontal_observation(&up, bs).unwrap();
        let (r0, a0) = horizontal_observation(&down, bs).unwrap();
        out[0][j] = (r1 - r0) / (2.0 * h);
        out[1][j] = wrap_angle(a1 - a0) / (2.0 * h);
    }
    out
}

proptest! {
    #[test]
    fn wrap_angle_range_and_equivalence(a in -1e4f64..1e4) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let k = ((a - w) / (2.0 * PI)).round();
        prop_assert!((a - w - k * 2.0 * PI).abs() < 1e-9);
    }

    #[test]
    fn round_trip_2d(
        bx in -1e4f64..1e4, by in -1e4f64..1e4, bz in 0.0f64..50.0,
        r in 1e-3f64..1e4, th in -PI..PI, uz in 0.0f64..5.0,
    ) {
        let bs = site(bx, by, bz);
        let ue = Position3::new(bx + r * th.cos(), by + r * th.sin(), uz);
        let m = measure(&bs, &ue).unwrap();
        let p = fix_2d(&bs, &m, uz).unwrap();
        prop_assert!((p.x - ue.x).abs() < 1e-9 && (p.y - ue.y).abs() < 1e-9);
    }

    #[test]
    fn round_trip_3d(
        bx in -1e3f64..1e3, by in -1e3f64..1e3, bz in 0.0f64..50.0,
        ux in -1e3f64..1e3, uy in -1e3f64..1e3, uz in -5.0f64..60.0,
    ) {
        prop_assume!((ux - bx).hypot(uy - by) > 1e-3);
        let bs = site(bx, by, bz);
        let ue = Position3::new(ux, uy, uz);
        let p = fix_3d(&bs, &measure(&bs, &ue).unwrap()).unwrap();
        prop_assert!((p.x - ux).abs() < 1e-9 && (p.y - uy).abs() < 1e-9 && (p.z - uz).abs() < 1e-9);
    }

    #[test]
    fn jacobian_matches_central_differences(
        bx in -500.0f64..500.0, by in -500.0f64..500.0,
        r in 1.0f64..500.0, th in -PI..PI, vx in -20.0f64..20.0, vy in -20.0f64..20.0,
    ) {
        let bs = site(bx, by, 10.0);
        let state = Vector4::new(bx + r * th.cos(), by + r * th.sin(), vx, vy);
        let j = jacobian_rows(&state, &bs).unwrap();
        let fd = finite_difference(&state, &bs);
        for (row, fd_row) in fd.iter().enumerate() {
            let scale = fd_row.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (col, v) in fd_row.iter().enumerate() {
                prop_assert!((j[(row, col)] - v).abs() <= 1e-5 * scale, "row {} col {}", row, col);
            }
        }
    }

    #[test]
    fn range_2d_never_exceeds_slant(r in 0.0f64..1e4, dz in -50.0f64..50.0) {
        match range_2d(r, dz) {
            Ok(h) => {
                prop_assert!(h <= r + 1e-12);
                prop_assert!((h * h + dz * dz - r * r).abs() <= 1e-9 * (1.0 + r * r));
            }
            Err(_) => prop_assert!(r < dz.abs()),
        }
    }
}
