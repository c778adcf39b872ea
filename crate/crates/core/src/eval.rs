//! Trajectory and reconstruction metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, Mat3, Pose, Vec3};
use crate::meshing::TriangleMesh;
use crate::spatial::KdTree;

/// Largest timestamp gap (s) for two poses to be associated.
pub const ASSOCIATION_WINDOW: f64 = 0.01;

pub const DEFAULT_F_THRESHOLD_CM: f64 = 20.0;

/// Surface samples per square metre when a mesh is turned into points.
pub const DEFAULT_SAMPLE_DENSITY: f64 = 10.0;

/// Pairs each estimated pose with the nearest truth timestamp within
/// [`ASSOCIATION_WINDOW`]; returns (estimated, truth) positions.
pub fn associate(estimated: &[(f64, Pose)], truth: &[(f64, Pose)]) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if truth.windows(2).any(|w| !(w[0].0 <= w[1].0)) {
        return Err(Error::InvalidArgument("truth timestamps must be sorted and finite".into()));
    }
    let mut est = Vec::new();
    let mut gt = Vec::new();
    for (t, pose) in estimated {
        let i = truth.partition_point(|(s, _)| s < t);
        let best = [i.checked_sub(1), (i < truth.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (truth[a].0 - t).abs().total_cmp(&(truth[b].0 - t).abs()));
        if let Some(j) = best {
            if (truth[j].0 - t).abs() <= ASSOCIATION_WINDOW {
                est.push(pose.translation);
                gt.push(truth[j].1.translation);
            }
        }
    }
    Ok((est, gt))
}

/// Position RMSE after the best rigid alignment of `estimated` onto `truth`.
pub fn ate_rmse(estimated: &[(f64, Pose)], truth: &[(f64, Pose)]) -> Result<f64> {
    let (est, gt) = associate(estimated, truth)?;
    if est.len() < 3 {
        return Err(Error::Degenerate(format!(
            "{} associated poses within {} ms, need at least 3",
            est.len(),
            ASSOCIATION_WINDOW * 1e3
        )));
    }
    match umeyama_align(&est, &gt, false) {
        Ok(a) => Ok(a.rmse),
        Err(Error::Degenerate(_)) => Ok(degenerate_rigid_rmse(&est, &gt)),
        Err(e) => Err(e),
    }
}

/// Optimal rigid-alignment residual from the cross-covariance spectrum,
/// valid when the reference is coincident or collinear and the rotation is
/// not unique.
fn degenerate_rigid_rmse(est: &[Vec3], gt: &[Vec3]) -> f64 {
    let n = est.len() as f64;
    let me = est.iter().sum::<Vec3>() / n;
    let mg = gt.iter().sum::<Vec3>() / n;
    let mut cross = Mat3::zeros();
    let (mut ve, mut vg) = (0.0, 0.0);
    for (e, g) in est.iter().zip(gt) {
        let (de, dg) = (e - me, g - mg);
        cross += dg * de.transpose();
        ve += de.norm_squared();
        vg += dg.norm_squared();
    }
    let svd = cross.svd(true, true);
    let sign = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) if u.determinant() * vt.determinant() < 0.0 => -1.0,
        _ => 1.0,
    };
    let s = svd.singular_values;
    let mut sorted = [s[0], s[1], s[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    let best = sorted[0] + sorted[1] + sign * sorted[2];
    ((ve + vg - 2.0 * best).max(0.0) / n).sqrt()
}

/// Reconstruction quality; distances in centimetres, F-score in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer_l1: f64,
    pub f_score: f64,
    pub threshold: f64,
}

/// Compares reconstructed points with reference surface points (both in
/// metres) at an F-score threshold in centimetres.
pub fn map_metrics(reconstructed: &[Vec3], reference: &[Vec3], threshold_cm: f64) -> Result<MapMetrics> {
    if reconstructed.is_empty() || reference.is_empty() {
        return Err(Error::Degenerate(format!(
            "map metrics need non-empty clouds, got {} reconstructed and {} reference points",
            reconstructed.len(),
            reference.len()
        )));
    }
    if !(threshold_cm.is_finite() && threshold_cm > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {threshold_cm}")));
    }
    let threshold = threshold_cm / 100.0;
    let (acc, precision) = directed(reconstructed, reference, threshold);
    let (comp, recall) = directed(reference, reconstructed, threshold);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MapMetrics {
        accuracy: acc * 100.0,
        completeness: comp * 100.0,
        chamfer_l1: 0.5 * (acc + comp) * 100.0,
        f_score: f * 100.0,
        threshold: threshold_cm,
    })
}

/// Mean nearest distance from `from` to `to`, and the fraction below `threshold`.
fn directed(from: &[Vec3], to: &[Vec3], threshold: f64) -> (f64, f64) {
    let tree = KdTree::build(to);
    let mut sum = 0.0;
    let mut hits = 0usize;
    for p in from {
        let d = tree.nearest(p).expect("tree is non-empty").0.sqrt();
        sum += d;
        hits += (d < threshold) as usize;
    }
    let n = from.len() as f64;
    (sum / n, hits as f64 / n)
}

/// Uniform random points on a mesh surface at `density` points per m².
/// Each triangle receives `⌊area·density⌋` points plus one more with
/// probability equal to the fractional part.
pub fn sample_surface(mesh: &TriangleMesh, density: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(t);
        let expected = 0.5 * (b - a).cross(&(c - a)).norm() * density;
        let mut count = expected.floor() as usize;
        if rng.random::<f64>() < expected.fract() {
            count += 1;
        }
        for _ in 0..count {
            let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
            if u + v > 1.0 {
                (u, v) = (1.0 - u, 1.0 - v);
            }
            out.push(a + (b - a) * u + (c - a) * v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use crate::spatial::brute_force_knn;
    use proptest::prelude::*;

    fn traj(points: &[Vec3], dt: f64) -> Vec<(f64, Pose)> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64 * dt, Pose::new(Mat3::identity(), *p)))
            .collect()
    }

    fn square() -> Vec<Vec3> {
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.5, 0.5, 1.0),
        ]
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let t = traj(&square(), 0.1);
        assert!(ate_rmse(&t, &t).unwrap() < 1e-12);
    }

    #[test]
    fn rigidly_moved_truth_has_zero_error() {
        let r = exp_so3(&Vec3::new(0.3, -1.1, 0.7));
        let shift = Vec3::new(4.0, -2.0, 9.0);
        let moved: Vec<Vec3> = square().iter().map(|p| r * p + shift).collect();
        let e = ate_rmse(&traj(&square(), 0.1), &traj(&moved, 0.1)).unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn offsets_that_alignment_cannot_absorb() {
        // ±ε out of plane with zero mean: the cross-covariance is diag(2, 2, 0),
        // so the best rotation is the identity and every residual is ε.
        let eps = 0.03;
        let base = [
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let est: Vec<Vec3> = base
            .iter()
            .zip([1.0, 1.0, -1.0, -1.0])
            .map(|(p, s)| p + Vec3::new(0.0, 0.0, s * eps))
            .collect();
        let e = ate_rmse(&traj(&est, 0.1), &traj(&base, 0.1)).unwrap();
        assert!((e - eps).abs() < 1e-12, "{e}");
    }

    #[test]
    fn constant_offset_is_absorbed_and_rmse_matches_hand_value() {
        // Five poses with one outlier displaced by d: translation absorbs d/5,
        // residuals are 4d/5 once and d/5 four times.
        let d = 0.1;
        let gt: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let mut est = gt.clone();
        est[2].y += d;
        let e = ate_rmse(&traj(&est, 0.1), &traj(&gt, 0.1)).unwrap();
        let expected = (((0.8 * d).powi(2) + 4.0 * (0.2 * d).powi(2)) / 5.0).sqrt();
        assert!((e - expected).abs() < 1e-12, "{e} vs {expected}");
    }

    #[test]
    fn static_truth_reports_estimate_spread() {
        let gt = vec![Vec3::new(1.0, 2.0, 3.0); 4];
        let est = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.02, 0.0, 0.0),
            Vec3::new(0.0, 0.02, 0.0),
            Vec3::new(0.02, 0.02, 0.0),
        ];
        let e = ate_rmse(&traj(&est, 0.1), &traj(&gt, 0.1)).unwrap();
        assert!((e - 0.01 * 2f64.sqrt()).abs() < 1e-12, "{e}");
    }

    #[test]
    fn association_respects_the_window() {
        let gt = traj(&square(), 0.1);
        let shifted: Vec<(f64, Pose)> = gt.iter().map(|(t, p)| (t + 0.009, *p)).collect();
        assert!(ate_rmse(&shifted, &gt).unwrap() < 1e-9);
        let far: Vec<(f64, Pose)> = gt.iter().map(|(t, p)| (t + 0.011, *p)).collect();
        assert!(matches!(ate_rmse(&far, &gt), Err(Error::Degenerate(_))));
        assert!(ate_rmse(&gt[..2], &gt).is_err());
    }

    #[test]
    fn identical_clouds_are_perfect() {
        let p = square();
        let m = map_metrics(&p, &p, DEFAULT_F_THRESHOLD_CM).unwrap();
        assert_eq!((m.accuracy, m.completeness, m.chamfer_l1, m.f_score), (0.0, 0.0, 0.0, 100.0));
    }

    #[test]
    fn uniform_shift_of_one_centimetre() {
        let p = square();
        let q: Vec<Vec3> = p.iter().map(|x| x + Vec3::new(0.0, 0.0, 0.01)).collect();
        let m = map_metrics(&q, &p, 20.0).unwrap();
        assert!((m.accuracy - 1.0).abs() < 1e-9 && (m.completeness - 1.0).abs() < 1e-9);
        assert!((m.chamfer_l1 - 1.0).abs() < 1e-9);
        assert_eq!(m.f_score, 100.0);
        let tight = map_metrics(&q, &p, 0.5).unwrap();
        assert_eq!(tight.f_score, 0.0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(map_metrics(&[], &square(), 20.0).is_err());
        assert!(map_metrics(&square(), &[], 20.0).is_err());
        assert!(map_metrics(&square(), &square(), 0.0).is_err());
    }

    #[test]
    fn surface_sampling_density_and_support() {
        // Unit square as two triangles.
        let mesh = TriangleMesh {
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(10.0, 0.0, 0.0),
                Vec3::new(10.0, 10.0, 0.0),
                Vec3::new(0.0, 10.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            normals: None,
        };
        let pts = sample_surface(&mesh, DEFAULT_SAMPLE_DENSITY, 7);
        assert_eq!(pts.len(), 1000);
        assert!(pts.iter().all(|p| p.z == 0.0 && (0.0..=10.0).contains(&p.x) && (0.0..=10.0).contains(&p.y)));
        assert_eq!(pts, sample_surface(&mesh, DEFAULT_SAMPLE_DENSITY, 7));
        let left = pts.iter().filter(|p| p.x < 5.0).count();
        assert!((400..600).contains(&left));
    }

    fn cloud(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
        proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..max)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
    }

    fn brute_mean(from: &[Vec3], to: &[Vec3]) -> f64 {
        from.iter()
            .map(|p| to.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn metrics_match_brute_force(a in cloud(300), b in cloud(300)) {
            let m = map_metrics(&a, &b, 20.0).unwrap();
            prop_assert!((m.accuracy - 100.0 * brute_mean(&a, &b)).abs() < 1e-9);
            prop_assert!((m.completeness - 100.0 * brute_mean(&b, &a)).abs() < 1e-9);
            prop_assert!((m.chamfer_l1 - 0.5 * (m.accuracy + m.completeness)).abs() < 1e-12);
            prop_assert!((0.0..=100.0).contains(&m.f_score));
        }

        #[test]
        fn metrics_ignore_point_order(a in cloud(200), b in cloud(200), k in 0usize..200) {
            let mut ra = a.clone();
            ra.rotate_left(k % a.len());
            let mut rb = b.clone();
            rb.reverse();
            let m1 = map_metrics(&a, &b, 20.0).unwrap();
            let m2 = map_metrics(&ra, &rb, 20.0).unwrap();
            prop_assert!((m1.accuracy - m2.accuracy).abs() < 1e-9);
            prop_assert!((m1.completeness - m2.completeness).abs() < 1e-9);
            prop_assert_eq!(m1.f_score, m2.f_score);
        }

        #[test]
        fn nearest_neighbour_equals_brute_force(a in cloud(2000), q in cloud(20)) {
            let tree = KdTree::build(&a);
            for p in &q {
                let fast = tree.nearest(p).unwrap();
                let slow = brute_force_knn(&a, p, 1, f64::INFINITY);
                prop_assert_eq!(fast, slow[0]);
            }
        }

        #[test]
        fn ate_is_invariant_to_common_rigid_motion(
            pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 6..30),
            noise in proptest::collection::vec(-0.05f64..0.05, 90),
            w in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
            s in (-9.0f64..9.0, -9.0f64..9.0, -9.0f64..9.0),
        ) {
            let gt: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let est: Vec<Vec3> = gt
                .iter()
                .enumerate()
                .map(|(i, p)| p + Vec3::new(noise[3 * i], noise[3 * i + 1], noise[3 * i + 2]))
                .collect();
            let r = exp_so3(&Vec3::new(w.0, w.1, w.2));
            let t = Vec3::new(s.0, s.1, s.2);
            let mv = |v: &[Vec3]| v.iter().map(|p| r * p + t).collect::<Vec<_>>();
            let a = ate_rmse(&traj(&est, 0.05), &traj(&gt, 0.05)).unwrap();
            let b = ate_rmse(&traj(&mv(&est), 0.05), &traj(&mv(&gt), 0.05)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
