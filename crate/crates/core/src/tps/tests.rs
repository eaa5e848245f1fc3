use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point2> {
    (0..n)
        .map(|_| Point2::new(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)))
        .collect()
}

fn affine_apply(a: &Matrix3<f64>, p: Point2) -> Point2 {
    Point2::new(
        a[(0, 0)] * p.x + a[(0, 1)] * p.y + a[(0, 2)],
        a[(1, 0)] * p.x + a[(1, 1)] * p.y + a[(1, 2)],
    )
}

/// Smooth non-affine test warp.
fn planted_warp(p: Point2, amp: f64) -> Point2 {
    Point2::new(
        1.1 * p.x - 0.05 * p.y + 4.0 + amp * (p.y / 25.0).sin(),
        0.04 * p.x + 0.95 * p.y - 2.0 + amp * (p.x / 30.0).cos(),
    )
}

#[test]
fn kernel_values() {
    assert_eq!(tps_kernel(0.0), 0.0);
    assert_eq!(tps_kernel(1.0), 0.0);
    let e = std::f64::consts::E;
    assert!((tps_kernel(e) - 2.0 * e * e).abs() < 1e-12);
}

#[test]
fn identity_data_gives_identity_mapping() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random_points(&mut rng, 15, 100.0);
    for lambda in [0.0, 0.1, 10.0] {
        let f = fit_tps(&v, &v, lambda, None).unwrap();
        assert!((f.affine - Matrix3::identity()).norm() < 1e-9);
        assert!(f.warp_coeffs.amax() < 1e-9);
    }
}

#[test]
fn affine_data_has_no_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = random_points(&mut rng, 25, 100.0);
    let a = Matrix3::new(1.3, 0.2, 5.0, -0.4, 0.8, -12.0, 0.0, 0.0, 1.0);
    let u: Vec<_> = v.iter().map(|&p| affine_apply(&a, p)).collect();
    let f = fit_tps(&u, &v, 0.1, None).unwrap();
    assert!(f.warp_coeffs.amax() < 1e-8);
    assert!((f.affine - a).amax() < 1e-8);
    assert!(bending_energy(&f) < 1e-10);
}

#[test]
fn near_zero_lambda_interpolates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = random_points(&mut rng, 20, 100.0);
    let u: Vec<_> = random_points(&mut rng, 20, 100.0);
    let f = fit_tps(&u, &v, 1e-9, None).unwrap();
    let mapped = apply_tps(&f, &v);
    let worst = mapped
        .iter()
        .zip(&u)
        .map(|(a, b)| a.distance(*b))
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn fit_rejects_bad_input() {
    let p = |x: f64, y: f64| Point2::new(x, y);
    let two = [p(0.0, 0.0), p(1.0, 1.0)];
    assert_eq!(fit_tps(&two, &two, 0.0, None), Err(TpsError::InsufficientPoints(2)));
    let line: Vec<_> = (0..6).map(|k| p(k as f64, 2.0 * k as f64)).collect();
    assert_eq!(
        fit_tps(&line, &line, 0.1, None),
        Err(TpsError::DegenerateControlPoints)
    );
    let tri = [p(0.0, 0.0), p(1.0, 0.0), p(0.0, 1.0)];
    assert_eq!(fit_tps(&tri[..2], &tri, 0.0, None), Err(TpsError::LengthMismatch(2, 3)));
    assert_eq!(
        fit_tps(&tri, &tri, 0.0, Some(&[1.0, 0.0, 1.0])),
        Err(TpsError::InvalidWeight)
    );
}

#[test]
fn identity_mapping_returns_input_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = random_points(&mut rng, 30, 500.0);
    assert_eq!(apply_tps(&TpsMapping::identity(), &pts), pts);
}

#[test]
fn pure_affine_mapping_matches_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Matrix3::new(0.9, -0.3, 7.0, 0.25, 1.2, 3.0, 0.0, 0.0, 1.0);
    let f = TpsMapping::from_affine(a);
    for p in random_points(&mut rng, 50, 300.0) {
        assert!(f.apply(p).distance(affine_apply(&a, p)) < 1e-10);
    }
}

#[test]
fn bending_energy_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = random_points(&mut rng, 20, 100.0);
    assert_eq!(
        bending_energy(&TpsMapping::from_affine(Matrix3::new(2.0, 0.0, 1.0, 0.0, 3.0, 0.0, 0.0, 0.0, 1.0))),
        0.0
    );
    let u: Vec<_> = v.iter().map(|&p| planted_warp(p, 5.0)).collect();
    let f = fit_tps(&u, &v, 0.01, None).unwrap();
    assert!(bending_energy(&f) > 0.0);
}

#[test]
fn bending_energy_decreases_with_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = random_points(&mut rng, 30, 100.0);
    let u: Vec<_> = v
        .iter()
        .map(|&p| planted_warp(p, 6.0) + Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let energies: Vec<f64> = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2]
        .iter()
        .map(|&l| bending_energy(&fit_tps(&u, &v, l, None).unwrap()))
        .collect();
    for w in energies.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{energies:?}");
    }
}

#[test]
fn weighted_fit_prefers_heavy_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = random_points(&mut rng, 12, 100.0);
    let u: Vec<_> = v.iter().map(|&p| planted_warp(p, 8.0)).collect();
    let mut w = vec![1.0; 12];
    w[3] = 1e6;
    let f = fit_tps(&u, &v, 1.0, Some(&w)).unwrap();
    let g = fit_tps(&u, &v, 1.0, None).unwrap();
    assert!(f.apply(v[3]).distance(u[3]) < g.apply(v[3]).distance(u[3]));
}

#[test]
fn prewarped_fit_applies_homography_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = random_points(&mut rng, 20, 100.0);
    let h = Matrix3::new(1.0, 0.1, 3.0, 0.0, 1.1, -2.0, 1e-4, 0.0, 1.0);
    let u: Vec<_> = v.iter().map(|&p| planted_warp(p, 3.0)).collect();
    let f = fit_tps_prewarped(&u, &v, &h, 1e-9, None).unwrap();
    for (p, q) in v.iter().zip(&u) {
        assert!(f.apply(*p).distance(*q) < 1e-6);
    }
}

// ---- correspondence updates ----

#[test]
fn far_pairs_at_low_temperature_form_the_best_permutation() {
    let u = [Point2::new(0.0, 0.0), Point2::new(100.0, 0.0)];
    let fv = [Point2::new(99.0, 1.0), Point2::new(1.0, -1.0)];
    let m = update_correspondences(&u, &fv, &fv, 1.0, 1e4, 20);
    // exhaustive search over the two assignments
    let cost = |perm: [usize; 2]| -> f64 {
        (0..2).map(|i| u[i].distance_squared(fv[perm[i]])).sum()
    };
    let best = [[0, 1], [1, 0]]
        .into_iter()
        .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
        .unwrap();
    for i in 0..2 {
        assert!(m.m[(i, best[i])] > 0.99, "{}", m.m);
        assert!(m.m[(i, 1 - best[i])] < 1e-6);
    }
}

#[test]
fn high_temperature_gives_uniform_inner_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let u = random_points(&mut rng, 6, 10.0);
    let v = random_points(&mut rng, 5, 10.0);
    let m = update_correspondences(&u, &v, &v, 1e9, 1e9, 20);
    let inner: Vec<f64> = (0..6).flat_map(|i| (0..5).map(move |j| (i, j))).map(|(i, j)| m.m[(i, j)]).collect();
    let (lo, hi) = inner.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    assert!((hi - lo) / hi < 1e-6);
}

#[test]
fn coincident_point_dominates() {
    let u = [Point2::new(5.0, 5.0), Point2::new(40.0, 0.0), Point2::new(0.0, 40.0)];
    let fv = [Point2::new(5.0, 5.0), Point2::new(80.0, 80.0), Point2::new(-60.0, 70.0)];
    let m = update_correspondences(&u, &fv, &fv, 0.5, 1e3, 20);
    assert!(m.m[(0, 0)] > 0.99);
}

// ---- TPS-RPM ----

fn shuffled(rng: &mut ChaCha8Rng, pts: &[Point2]) -> Vec<Point2> {
    let mut out = pts.to_vec();
    for i in (1..out.len()).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    out
}

#[test]
fn self_registration_recovers_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = random_points(&mut rng, 40, 100.0);
    let v = shuffled(&mut rng, &u);
    let r = tps_rpm(&u, &v, &TpsRpmParams::default(), None).unwrap();
    let mean = v
        .iter()
        .map(|&p| r.mapping.apply(p).distance(p))
        .sum::<f64>()
        / v.len() as f64;
    assert!(mean < 1e-3, "mean displacement {mean}");
    assert!(r.energy.is_finite());
}

#[test]
fn planted_warp_with_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let v = random_points(&mut rng, 60, 100.0);
    let mut u: Vec<_> = v.iter().map(|&p| planted_warp(p, 2.0)).collect();
    let n_out = 6;
    for _ in 0..n_out {
        u.push(Point2::new(rng.gen_range(-60.0..160.0), rng.gen_range(150.0..220.0)));
    }
    let u = u;
    let r = tps_rpm(&u, &v, &TpsRpmParams::default(), None).unwrap();
    let diameter = u[..60]
        .iter()
        .flat_map(|a| u[..60].iter().map(move |b| a.distance(*b)))
        .fold(0.0, f64::max);
    let err = v
        .iter()
        .map(|&p| r.mapping.apply(p).distance(planted_warp(p, 2.0)))
        .sum::<f64>()
        / v.len() as f64;
    assert!(err < 0.02 * diameter, "error {err}, diameter {diameter}");
    for i in 60..u.len() {
        assert!(r.correspondence.outlier_mass_u(i) > 0.5, "outlier {i}: {}", r.correspondence.outlier_mass_u(i));
    }
}

#[test]
fn affine_data_yields_negligible_bending() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let v = random_points(&mut rng, 40, 100.0);
    let a = Matrix3::new(1.05, 0.1, 3.0, -0.08, 0.97, 2.0, 0.0, 0.0, 1.0);
    let u = shuffled(&mut rng, &v.iter().map(|&p| affine_apply(&a, p)).collect::<Vec<_>>());
    let r = tps_rpm(&u, &v, &TpsRpmParams::default(), None).unwrap();
    assert!(bending_energy(&r.mapping) < 1e-6, "{}", bending_energy(&r.mapping));
}

#[test]
fn free_energy_never_increases_within_a_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let v = random_points(&mut rng, 30, 100.0);
    let u: Vec<_> = v
        .iter()
        .map(|&p| planted_warp(p, 4.0) + Point2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
        .collect();
    let params = TpsRpmParams {
        iterations_per_temperature: 5,
        ..Default::default()
    };
    let r = tps_rpm(&u, &v, &params, None).unwrap();
    for step in &r.schedule {
        for w in step.free_energy.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "T = {}: {:?}", step.temperature, step.free_energy);
        }
    }
}

#[test]
fn unmatched_sources_survive_low_temperatures() {
    // sources with no partner end up with subnormal column mass near the final temperature
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let v = random_points(&mut rng, 25, 100.0);
    let mut u: Vec<_> = v.iter().take(22).map(|&p| planted_warp(p, 3.0)).collect();
    u.extend(random_points(&mut rng, 3, 100.0));
    let params = TpsRpmParams {
        iterations_per_temperature: 4,
        ..Default::default()
    };
    let r = tps_rpm(&u, &v, &params, None).unwrap();
    assert!(r.energy.is_finite());
    assert!(r.mapping.warp_coeffs.iter().all(|x| x.is_finite()));
}

#[test]
fn normalized_lambda_matches_pixel_unit_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let v = random_points(&mut rng, 20, 100.0);
    let u: Vec<_> = v.iter().map(|&p| planted_warp(p, 5.0)).collect();
    let lambda = 3.0;
    let f = fit_tps(&u, &v, normalized_lambda(&v, lambda).unwrap(), None).unwrap();
    // (K + lambda I) w + P a = u, P^T w = 0 directly in pixel coordinates
    let n = v.len();
    let mut a = DMatrix::zeros(n + 3, n + 3);
    let mut rhs = DMatrix::zeros(n + 3, 2);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = tps_kernel(v[i].distance(v[j]));
        }
        a[(i, i)] += lambda;
        for (c, x) in [1.0, v[i].x, v[i].y].into_iter().enumerate() {
            a[(i, n + c)] = x;
            a[(n + c, i)] = x;
        }
        rhs[(i, 0)] = u[i].x;
        rhs[(i, 1)] = u[i].y;
    }
    let sol = a.lu().solve(&rhs).unwrap();
    for p in random_points(&mut rng, 10, 100.0) {
        let mut q = [sol[(n, 0)] + sol[(n + 1, 0)] * p.x + sol[(n + 2, 0)] * p.y, 0.0];
        q[1] = sol[(n, 1)] + sol[(n + 1, 1)] * p.x + sol[(n + 2, 1)] * p.y;
        for i in 0..n {
            let k = tps_kernel(p.distance(v[i]));
            q[0] += sol[(i, 0)] * k;
            q[1] += sol[(i, 1)] * k;
        }
        assert!(f.apply(p).distance(Point2::new(q[0], q[1])) < 1e-6);
    }
}

#[test]
fn rpm_rejects_invalid_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let v = random_points(&mut rng, 10, 10.0);
    let bad = TpsRpmParams {
        anneal_rate: 1.0,
        ..Default::default()
    };
    assert!(matches!(tps_rpm(&v, &v, &bad, None), Err(TpsError::InvalidParams(_))));
}

mod props {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn side_conditions_hold(seed in 0u64..10_000, lambda in 0.0f64..10.0, weighted in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..30);
            let v = random_points(&mut rng, n, 200.0);
            let u = random_points(&mut rng, n, 200.0);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
            let f = fit_tps(&u, &v, lambda, weighted.then_some(&w[..])).unwrap();
            let scale = f.warp_coeffs.amax().max(1.0);
            for col in 0..2 {
                let s: f64 = (0..n).map(|i| f.warp_coeffs[(i, col)]).sum();
                let sx: f64 = (0..n).map(|i| f.warp_coeffs[(i, col)] * v[i].x).sum();
                let sy: f64 = (0..n).map(|i| f.warp_coeffs[(i, col)] * v[i].y).sum();
                prop_assert!(s.abs() < 1e-8 * scale);
                prop_assert!(sx.abs() < 1e-8 * scale * 200.0);
                prop_assert!(sy.abs() < 1e-8 * scale * 200.0);
            }
            prop_assert!(bending_energy(&f) >= 0.0);
        }

        #[test]
        fn soft_assign_is_doubly_stochastic(
            seed in 0u64..10_000,
            log_t in -2.0f64..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (nu, nv) = (rng.gen_range(1..15), rng.gen_range(1..15));
            let u = random_points(&mut rng, nu, 50.0);
            let v = random_points(&mut rng, nv, 50.0);
            let m = update_correspondences(&u, &v, &v, 10f64.powf(log_t), 2500.0, 20);
            prop_assert!(m.normalization_error() < 1e-6);
            prop_assert!(m.m.iter().all(|&x| x >= 0.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn rpm_is_rotation_equivariant(seed in 0u64..1000, angle in -3.1f64..3.1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_points(&mut rng, 25, 100.0);
            let u: Vec<_> = v.iter().map(|&p| planted_warp(p, 3.0)).collect();
            let (c, s) = (angle.cos(), angle.sin());
            let rot = |p: Point2| Point2::new(c * p.x - s * p.y, s * p.x + c * p.y);
            let params = TpsRpmParams { anneal_rate: 0.85, ..Default::default() };
            let r = tps_rpm(&u, &v, &params, None).unwrap();
            let ru: Vec<_> = u.iter().map(|&p| rot(p)).collect();
            let rv: Vec<_> = v.iter().map(|&p| rot(p)).collect();
            let rr = tps_rpm(&ru, &rv, &params, None).unwrap();
            for gx in 0..6 {
                for gy in 0..6 {
                    let p = Point2::new(gx as f64 * 20.0, gy as f64 * 20.0);
                    let d = rr.mapping.apply(rot(p)).distance(rot(r.mapping.apply(p)));
                    prop_assert!(d < 1e-5, "grid point {:?}: {}", p, d);
                }
            }
        }
    }
}
