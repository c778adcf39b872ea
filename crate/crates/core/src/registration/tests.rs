use super::*;
use crate::eskf::{InitialPriors, StateMatrix};
use crate::geometry::log_so3;
use crate::neural_map::FieldSample;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `‖A·(x − c)‖ − 1` with a diagonal `A` of distinct entries, so the zero
/// level set pins down all six pose degrees of freedom.
struct Ellipsoid {
    center: Vec3,
    axes: Vec3,
}

impl Ellipsoid {
    fn new() -> Self {
        Self {
            center: Vec3::new(0.3, -0.2, 0.1),
            axes: Vec3::new(1.0 / 3.0, 1.0 / 2.0, 1.0 / 1.5),
        }
    }

    fn surface_point(&self, dir: &Vec3) -> Vec3 {
        let u = dir.normalize();
        self.center + u / u.component_mul(&self.axes).norm()
    }
}

impl SdfField for Ellipsoid {
    fn sample(&self, q: &Vec3) -> FieldSample {
        let y = (q - self.center).component_mul(&self.axes);
        let n = y.norm();
        FieldSample {
            sdf: n - 1.0,
            gradient: y.component_mul(&self.axes) / n,
            valid: true,
            neighbor_count: 6,
        }
    }
}

struct Plane {
    normal: Vec3,
}

impl SdfField for Plane {
    fn sample(&self, q: &Vec3) -> FieldSample {
        FieldSample {
            sdf: self.normal.dot(q),
            gradient: self.normal,
            valid: true,
            neighbor_count: 6,
        }
    }
}

/// Valid only inside a ball, to exercise the inlier count.
struct Patchy<F>(F, f64);

impl<F: SdfField> SdfField for Patchy<F> {
    fn sample(&self, q: &Vec3) -> FieldSample {
        if q.norm() < self.1 {
            self.0.sample(q)
        } else {
            FieldSample::invalid(0)
        }
    }
}

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ) * scale
}

fn random_pose(rng: &mut ChaCha8Rng, t: f64, r: f64) -> Pose {
    Pose::new(exp_so3(&random_vec(rng, r)), random_vec(rng, t))
}

/// Body-frame points that land on the ellipsoid surface under `truth`.
fn ellipsoid_scan(field: &Ellipsoid, truth: &Pose, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv = truth.inverse();
    (0..n)
        .map(|_| inv.transform(&field.surface_point(&random_vec(&mut rng, 1.0))))
        .collect()
}

fn state_at(pose: &Pose) -> NominalState {
    NominalState {
        position: pose.translation,
        velocity: Vec3::new(0.2, -0.1, 0.0),
        rotation: pose.rotation,
        bias_gyro: Vec3::new(1e-3, 0.0, -2e-3),
        bias_accel: Vec3::new(0.01, 0.02, -0.01),
        gravity: Vec3::new(0.0, 0.0, -9.81),
    }
}

fn prior_belief() -> ErrorBelief {
    ErrorBelief::new(InitialPriors {
        sigma_position: 0.1,
        sigma_rotation: 0.05,
        ..InitialPriors::default()
    }
    .covariance())
}

#[test]
fn geman_mcclure_weights() {
    assert_eq!(robust_weight(0.0, 0.3), 1.0);
    assert!((robust_weight(0.3, 0.3) - 0.25).abs() < 1e-15);
    let mut last = 1.0;
    for k in 1..200 {
        let w = robust_weight(k as f64 * 0.01, 0.3);
        assert!(w > 0.0 && w < last);
        last = w;
    }
    // the weight is ρ′(r)/r
    for r in [-0.7, -0.1, 0.05, 0.4, 2.0] {
        let h = 1e-6;
        let d = (robust_cost(r + h, 0.3) - robust_cost(r - h, 0.3)) / (2.0 * h);
        assert!((d / r - robust_weight(r, 0.3)).abs() < 1e-8);
    }
}

#[test]
fn downsampling_keeps_first_point_per_voxel() {
    let pts = vec![Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.2, 0.2, 0.2), Vec3::new(1.1, 0.0, 0.0)];
    assert_eq!(select_registration_points(&pts, 0.5, 10), vec![pts[0], pts[2]]);
    assert_eq!(select_registration_points(&pts, 0.01, 10), pts);
    assert!(select_registration_points(&[], 0.5, 10).is_empty());
    assert_eq!(select_registration_points(&pts, 0.01, 2).len(), 2);
}

#[test]
fn downsampled_count_equals_distinct_voxels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<Vec3> = (0..100_000).map(|_| random_vec(&mut rng, 5.0)).collect();
    let distinct: HashSet<_> = pts.iter().map(|p| voxel_key(p, 0.5)).collect();
    assert_eq!(select_registration_points(&pts, 0.5, usize::MAX).len(), distinct.len());
}

#[test]
fn pose_rows_match_finite_differences() {
    let field = Ellipsoid::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    for _ in 0..1000 {
        let pose = random_pose(&mut rng, 0.5, 2.0);
        let p = random_vec(&mut rng, 2.0);
        let s = field.sample(&pose.transform(&p));
        let row = pose_jacobian_row(&pose.rotation, &p, &s.gradient);
        for k in 0..6 {
            let mut e = Vector6::zeros();
            e[k] = h;
            let plus = field.sample(&retract(&pose, &e).transform(&p)).sdf;
            let minus = field.sample(&retract(&pose, &-e).transform(&p)).sdf;
            let fd = (plus - minus) / (2.0 * h);
            assert!((row[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "k={k} {} vs {fd}", row[k]);
        }
    }
}

#[test]
fn tight_rows_match_finite_differences() {
    let field = Ellipsoid::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    for _ in 0..1000 {
        let state = state_at(&random_pose(&mut rng, 0.5, 2.0));
        let p = random_vec(&mut rng, 2.0);
        let s = field.sample(&state.pose().transform(&p));
        let row = tight_jacobian_row(&state, &p, &s.gradient);
        for k in 0..DIM {
            let mut e = StateVector::zeros();
            e[k] = h;
            let plus = field.sample(&inject(&state, &e).pose().transform(&p)).sdf;
            let minus = field.sample(&inject(&state, &-e).pose().transform(&p)).sdf;
            let fd = (plus - minus) / (2.0 * h);
            assert!((row[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "k={k} {} vs {fd}", row[k]);
        }
    }
}

#[test]
fn semi_fixed_point_at_zero_residual() {
    let field = Ellipsoid::new();
    let truth = Pose::new(exp_so3(&Vec3::new(0.1, -0.2, 0.3)), Vec3::new(0.2, 0.1, -0.1));
    let pts = ellipsoid_scan(&field, &truth, 200, 1);
    let res = register_semi(&pts, &truth, &field, &RegistrationConfig::default(), &MeasurementNoise::default()).unwrap();
    assert!(res.converged);
    assert!(res.iterations <= 2);
    assert!((res.pose.translation - truth.translation).norm() < 1e-6);
    assert!((res.pose.rotation - truth.rotation).norm() < 1e-6);
    assert_eq!(res.inlier_count, 200);
}

#[test]
fn semi_recovers_a_perturbed_pose() {
    let field = Ellipsoid::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..10 {
        let truth = random_pose(&mut rng, 0.3, 0.5);
        let init = retract(&truth, &Vector6::from_iterator((0..6).map(|k| if k < 3 { 0.08 } else { 0.04 })));
        let pts = ellipsoid_scan(&field, &truth, 300, seed);
        let config = RegistrationConfig {
            lm_tolerance: 1e-9,
            ..RegistrationConfig::default()
        };
        let res = register_semi(&pts, &init, &field, &config, &MeasurementNoise::default()).unwrap();
        assert!(res.converged);
        assert!((res.pose.translation - truth.translation).norm() < 1e-6);
        assert!(log_so3(&(truth.rotation.transpose() * res.pose.rotation)).unwrap().norm() < 1e-6);
    }
}

#[test]
fn semi_plane_offset_along_normal() {
    let field = Plane { normal: Vec3::z() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts: Vec<Vec3> = (0..200)
        .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.2))
        .collect();
    let config = RegistrationConfig {
        kernel_scale: 0.5,
        ..RegistrationConfig::default()
    };
    let res = register_semi(&pts, &Pose::identity(), &field, &config, &MeasurementNoise::default()).unwrap();
    assert!((res.pose.translation.z + 0.2).abs() < 1e-3, "{:?}", res.pose.translation);
    // in-plane translation and yaw are unobservable; the tilt is not
    let up = res.pose.rotation * Vec3::z();
    assert!(up.z.acos() < 1e-3);
}

#[test]
fn semi_cost_never_increases() {
    let field = Ellipsoid::new();
    let truth = Pose::identity();
    let pts = ellipsoid_scan(&field, &truth, 200, 8);
    let init = Pose::new(exp_so3(&Vec3::new(0.05, 0.1, -0.08)), Vec3::new(0.2, -0.1, 0.15));
    let mut last = registration_cost(&field, &pts, &init, 0.1).0;
    for iters in 1..15 {
        let config = RegistrationConfig {
            lm_max_iterations: iters,
            ..RegistrationConfig::default()
        };
        let res = register_semi(&pts, &init, &field, &config, &MeasurementNoise::default()).unwrap();
        assert!(res.final_cost <= last + 1e-15);
        last = res.final_cost;
    }
}

#[test]
fn semi_requires_enough_inliers() {
    let field = Patchy(Ellipsoid::new(), 1.0);
    let pts = ellipsoid_scan(&Ellipsoid::new(), &Pose::identity(), 100, 9);
    let valid = pts.iter().filter(|p| p.norm() < 1.0).count();
    assert!(valid < 30);
    let err = register_semi(&pts, &Pose::identity(), &field, &RegistrationConfig::default(), &MeasurementNoise::default())
        .unwrap_err();
    assert!(matches!(err, Error::RegistrationFailed { required: 30, .. }), "{err}");
}

fn reg_at(pose: Pose) -> RegistrationResult {
    RegistrationResult {
        pose,
        converged: true,
        iterations: 1,
        final_cost: 0.0,
        inlier_count: 100,
        pose_covariance: Matrix6::identity(),
    }
}

#[test]
fn semi_update_with_matching_pose_is_a_no_op() {
    let state = state_at(&Pose::new(exp_so3(&Vec3::new(0.3, 0.0, 1.0)), Vec3::new(1.0, 2.0, 3.0)));
    let belief = prior_belief();
    let (post, cov) = update_semi(&state, &belief, &reg_at(state.pose()), &MeasurementNoise::default()).unwrap();
    assert!(difference(&post, &state).norm() < 1e-12);
    assert!(cov.cov.trace() < belief.cov.trace());
    assert!(cov.is_symmetric_psd(1e-9));
}

#[test]
fn semi_update_moves_most_of_the_way_with_tight_noise() {
    let state = state_at(&Pose::identity());
    let belief = prior_belief();
    let noise = MeasurementNoise {
        sigma_pose_t: 0.01,
        ..MeasurementNoise::default()
    };
    let meas = Pose::from_translation(Vec3::new(0.1, 0.0, 0.0));
    let (post, _) = update_semi(&state, &belief, &reg_at(meas), &noise).unwrap();
    // scalar gain P/(P+V) on the x axis
    let gain = 0.01 / (0.01 + 1e-4);
    assert!((post.position.x - 0.1 * gain).abs() < 1e-9);
    assert!(post.position.x > 0.09);
}

#[test]
fn semi_update_rotation_residual_is_consistent() {
    // An attitude measurement far from the prediction: the update moves along
    // the geodesic toward it.
    let state = state_at(&Pose::new(exp_so3(&Vec3::new(0.0, 0.0, 1.0)), Vec3::zeros()));
    let belief = prior_belief();
    let noise = MeasurementNoise {
        sigma_pose_r: 1e-4,
        ..MeasurementNoise::default()
    };
    let meas = Pose::new(state.rotation * exp_so3(&Vec3::new(0.02, -0.01, 0.03)), Vec3::zeros());
    let (post, _) = update_semi(&state, &belief, &reg_at(meas), &noise).unwrap();
    let miss = log_so3(&(meas.rotation.transpose() * post.rotation)).unwrap().norm();
    assert!(miss < 1e-3 * 0.04, "{miss}");
}

#[test]
fn non_converged_registration_is_skipped() {
    let state = state_at(&Pose::identity());
    let belief = prior_belief();
    let mut reg = reg_at(Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)));
    reg.converged = false;
    let (post, cov) = update_semi(&state, &belief, &reg, &MeasurementNoise::default()).unwrap();
    assert_eq!(post, state);
    assert_eq!(cov.cov, belief.cov);
}

#[test]
fn tight_update_at_truth_is_stationary() {
    let field = Ellipsoid::new();
    let truth = Pose::new(exp_so3(&Vec3::new(-0.2, 0.1, 0.4)), Vec3::new(0.1, 0.0, 0.2));
    let pts = ellipsoid_scan(&field, &truth, 300, 10);
    let state = state_at(&truth);
    let belief = prior_belief();
    let out = update_tight(&pts, &state, &belief, &field, &MeasurementNoise::default(), &RegistrationConfig::default())
        .unwrap();
    assert!(out.result.converged);
    assert_eq!(out.result.iterations, 1);
    assert!(!out.degraded);
    assert_eq!(out.inverted_dim, 18);
    assert!(difference(&out.state, &state).norm() < 1e-8);
    assert!(out.belief.cov.trace() <= belief.cov.trace());
    assert!(out.belief.is_symmetric_psd(1e-9));
}

#[test]
fn tight_update_corrects_a_perturbed_prediction() {
    let field = Ellipsoid::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10 {
        let truth = random_pose(&mut rng, 0.3, 0.5);
        let pts = ellipsoid_scan(&field, &truth, 400, seed);
        let off = Vector6::new(0.05, -0.04, 0.03, 0.02, -0.01, 0.015);
        let state = state_at(&retract(&truth, &off));
        let belief = prior_belief();
        let noise = MeasurementNoise {
            sigma_sdf: 0.01,
            ..MeasurementNoise::default()
        };
        let config = RegistrationConfig {
            tight_max_iterations: 10,
            ..RegistrationConfig::default()
        };
        let out = update_tight(&pts, &state, &belief, &field, &noise, &config).unwrap();
        let before = (state.position - truth.translation).norm();
        let after = (out.state.position - truth.translation).norm();
        assert!(after < 0.05 * before, "{before} -> {after}");
        assert!(out.belief.cov.trace() <= belief.cov.trace());
        assert_eq!(out.inverted_dim, 18);
    }
}

#[test]
fn tight_update_degrades_without_inliers() {
    let field = Patchy(Ellipsoid::new(), 1.0);
    let pts = ellipsoid_scan(&Ellipsoid::new(), &Pose::identity(), 100, 12);
    let state = state_at(&Pose::identity());
    let belief = prior_belief();
    let out = update_tight(&pts, &state, &belief, &field, &MeasurementNoise::default(), &RegistrationConfig::default())
        .unwrap();
    assert!(out.degraded);
    assert_eq!(out.state, state);
    assert_eq!(out.belief.cov, belief.cov);
}

#[test]
fn semi_and_tight_agree_on_noise_free_data() {
    let field = Ellipsoid::new();
    let truth = Pose::new(exp_so3(&Vec3::new(0.1, 0.2, -0.3)), Vec3::new(-0.1, 0.2, 0.05));
    let pts = ellipsoid_scan(&field, &truth, 400, 13);
    let state = state_at(&retract(&truth, &Vector6::new(0.04, 0.03, -0.02, 0.01, 0.02, -0.01)));
    let belief = prior_belief();
    let noise = MeasurementNoise::default();
    let config = RegistrationConfig::default();

    let reg = register_semi(&pts, &state.pose(), &field, &config, &noise).unwrap();
    let (semi, semi_belief) = update_semi(&state, &belief, &reg, &noise).unwrap();
    let tight = update_tight(&pts, &state, &belief, &field, &noise, &config).unwrap();

    let sigma: StateMatrix = semi_belief.cov + tight.belief.cov;
    let d = difference(&semi, &tight.state);
    for k in [0, 1, 2, 6, 7, 8] {
        assert!(d[k].abs() < 3.0 * sigma[(k, k)].sqrt(), "axis {k}: {}", d[k]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_is_in_unit_interval(r in -100.0f64..100.0, s in 1e-3f64..10.0) {
        let w = robust_weight(r, s);
        prop_assert!(w > 0.0 && w <= 1.0);
    }
}
