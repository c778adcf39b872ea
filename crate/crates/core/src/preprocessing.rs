//! Sensor-stream frontend: merging of asynchronous LiDARs into the main
//! sensor's sweep, motion compensation, and IMU windowing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::eskf::ImuSample;
use crate::geometry::{interpolate_pose, Mat3, Pose, Vec3};
use crate::spatial::KdTree;

pub type SensorId = u16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    /// Sensor-frame coordinates (m).
    pub xyz: Vec3,
    /// Absolute firing time (s).
    pub t: f64,
    pub source: SensorId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarFrame {
    pub points: Vec<LidarPoint>,
    pub t_start: f64,
    pub t_end: f64,
    pub frame_id: SensorId,
}

impl LidarFrame {
    pub fn xyz(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| p.xyz).collect()
    }
}

/// Sensor→body extrinsics of every LiDAR on the platform.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRig {
    pub main: SensorId,
    pub extrinsics: BTreeMap<SensorId, Pose>,
}

impl SensorRig {
    pub fn single(main: SensorId, extrinsic: Pose) -> Self {
        Self {
            main,
            extrinsics: BTreeMap::from([(main, extrinsic)]),
        }
    }

    pub fn extrinsic(&self, id: SensorId) -> Result<&Pose> {
        self.extrinsics.get(&id).ok_or(Error::MissingExtrinsic(id))
    }

    pub fn validate(&self) -> Result<()> {
        self.extrinsic(self.main)?;
        if let Some((id, _)) = self.extrinsics.iter().find(|(_, p)| !p.is_valid()) {
            return Err(Error::InvalidArgument(format!("extrinsic of sensor {id} is not a rigid transform")));
        }
        Ok(())
    }
}

/// Expresses the in-window points of every auxiliary sweep in the main
/// sensor frame and merges them with the main sweep, sorted by time.
pub fn merge_frames(main: &LidarFrame, auxiliaries: &[LidarFrame], rig: &SensorRig) -> Result<LidarFrame> {
    let main_inv = rig.extrinsic(main.frame_id)?.inverse();
    let mut points = main.points.clone();
    for aux in auxiliaries {
        let to_main = main_inv.compose(rig.extrinsic(aux.frame_id)?);
        points.extend(
            aux.points
                .iter()
                .filter(|p| p.t >= main.t_start && p.t <= main.t_end)
                .map(|p| LidarPoint {
                    xyz: to_main.transform(&p.xyz),
                    ..*p
                }),
        );
    }
    // Stable, so equal timestamps keep main-before-auxiliary order.
    points.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(LidarFrame { points, ..*main })
}

/// Pose at time `t` by geodesic interpolation between bracketing samples.
pub fn pose_at(poses: &[(f64, Pose)], t: f64) -> Result<Pose> {
    let (first, last) = match (poses.first(), poses.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Coverage("no poses to interpolate".into())),
    };
    if t < first.0 || t > last.0 {
        return Err(Error::Coverage(format!(
            "time {t:.6} outside pose coverage [{:.6}, {:.6}]",
            first.0, last.0
        )));
    }
    let i = poses.partition_point(|(ti, _)| *ti <= t);
    if i == poses.len() {
        return Ok(last.1);
    }
    let (t0, a) = &poses[i - 1];
    let (t1, b) = &poses[i];
    let alpha = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
    Ok(interpolate_pose(a, b, alpha))
}

/// Re-expresses every point in the sensor frame at `t_end`.
pub fn deskew(frame: &LidarFrame, poses: &[(f64, Pose)]) -> Result<LidarFrame> {
    let end_inv = pose_at(poses, frame.t_end)?.inverse();
    let points = frame
        .points
        .iter()
        .map(|p| {
            let rel = end_inv.compose(&pose_at(poses, p.t)?);
            Ok(LidarPoint {
                xyz: rel.transform(&p.xyz),
                ..*p
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LidarFrame {
        points,
        ..frame.clone()
    })
}

fn lerp_imu(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let alpha = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
    ImuSample {
        t,
        omega: a.omega + (b.omega - a.omega) * alpha,
        accel: a.accel + (b.accel - a.accel) * alpha,
    }
}

fn imu_at(stream: &[ImuSample], t: f64) -> ImuSample {
    let i = stream.partition_point(|s| s.t <= t);
    if i == 0 {
        return ImuSample { t, ..stream[0] };
    }
    let a = &stream[i - 1];
    if a.t == t || i == stream.len() {
        return ImuSample { t, ..*a };
    }
    lerp_imu(a, &stream[i], t)
}

/// Samples strictly inside `(t0, t1)` framed by interpolated readings at
/// exactly `t0` and `t1`.
pub fn slice_imu(stream: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!("empty IMU window [{t0}, {t1}]")));
    }
    match (stream.first(), stream.last()) {
        (Some(f), Some(l)) if f.t <= t0 && l.t >= t1 => {}
        (Some(f), Some(l)) => {
            return Err(Error::Coverage(format!(
                "IMU window [{t0:.6}, {t1:.6}] not covered by stream [{:.6}, {:.6}]",
                f.t, l.t
            )))
        }
        _ => return Err(Error::Coverage("IMU stream is empty".into())),
    }
    let lo = stream.partition_point(|s| s.t <= t0);
    let hi = stream.partition_point(|s| s.t < t1);
    let mut out = Vec::with_capacity(hi.saturating_sub(lo) + 2);
    out.push(imu_at(stream, t0));
    out.extend_from_slice(&stream[lo..hi.max(lo)]);
    out.push(imu_at(stream, t1));
    Ok(out)
}

/// Unit normal of the locally planar neighborhood of each `queries[k]`
/// among `cloud`, from the covariance of neighbors within `radius` (at
/// most `max_neighbors`). `None` where the neighborhood is too small,
/// collinear, or not flat.
pub fn estimate_normals(cloud: &[Vec3], queries: &[Vec3], radius: f64, max_neighbors: usize) -> Vec<Option<Vec3>> {
    let tree = KdTree::build(cloud);
    let mut nbrs = Vec::with_capacity(max_neighbors);
    queries
        .iter()
        .map(|q| {
            nbrs.clear();
            tree.knn(q, max_neighbors, radius * radius, &mut nbrs);
            if nbrs.len() < 5 {
                return None;
            }
            let n = nbrs.len() as f64;
            let mean = nbrs.iter().map(|&(_, i)| cloud[i]).sum::<Vec3>() / n;
            let cov = nbrs
                .iter()
                .map(|&(_, i)| (cloud[i] - mean) * (cloud[i] - mean).transpose())
                .sum::<Mat3>()
                / n;
            let eig = cov.symmetric_eigen();
            let mut order = [0, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let [small, mid, large] = order.map(|k| eig.eigenvalues[k].max(0.0));
            let spread = mid > 0.05 * large;
            let flat = small < 0.1 * mid;
            (spread && flat).then(|| eig.eigenvectors.column(order[0]).normalize())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(id: SensorId, pts: &[(Vec3, f64)], t_start: f64, t_end: f64) -> LidarFrame {
        LidarFrame {
            points: pts.iter().map(|&(xyz, t)| LidarPoint { xyz, t, source: id }).collect(),
            t_start,
            t_end,
            frame_id: id,
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, id: SensorId, n: usize, t0: f64, t1: f64) -> LidarFrame {
        let mut pts: Vec<(Vec3, f64)> = (0..n)
            .map(|_| {
                (
                    Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)),
                    rng.random_range(t0..t1),
                )
            })
            .collect();
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        frame(id, &pts, t0, t1)
    }

    fn two_rig(aux: Pose) -> SensorRig {
        SensorRig {
            main: 0,
            extrinsics: BTreeMap::from([(0, Pose::from_translation(Vec3::new(0.1, 0.0, 0.2))), (1, aux)]),
        }
    }

    #[test]
    fn merge_without_auxiliaries_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let main = random_frame(&mut rng, 0, 50, 1.0, 1.1);
        let rig = two_rig(Pose::identity());
        assert_eq!(merge_frames(&main, &[], &rig).unwrap(), main);
    }

    #[test]
    fn merge_with_identical_extrinsics_concatenates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let main = random_frame(&mut rng, 0, 50, 1.0, 1.1);
        let aux = random_frame(&mut rng, 1, 40, 1.0, 1.1);
        let rig = two_rig(*two_rig(Pose::identity()).extrinsic(0).unwrap());
        let merged = merge_frames(&main, std::slice::from_ref(&aux), &rig).unwrap();
        assert_eq!(merged.points.len(), 90);
        assert!(merged.points.windows(2).all(|w| w[0].t <= w[1].t));
        for p in &aux.points {
            assert!(merged.points.contains(p));
        }
    }

    #[test]
    fn merge_rotates_auxiliary_points() {
        let main = frame(0, &[(Vec3::zeros(), 1.05)], 1.0, 1.1);
        let aux = frame(1, &[(Vec3::new(1.0, 0.0, 0.0), 1.02), (Vec3::new(0.0, 2.0, 0.0), 1.2)], 1.0, 1.1);
        let rot = exp_so3(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let rig = two_rig(Pose::new(rot, Vec3::new(0.1, 0.0, 0.2)));
        let merged = merge_frames(&main, &[aux], &rig).unwrap();
        // the second auxiliary point is outside the main window
        assert_eq!(merged.points.len(), 2);
        let p = merged.points[0];
        assert_eq!(p.source, 1);
        assert_eq!(p.t, 1.02);
        assert!((p.xyz - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn merge_requires_extrinsics() {
        let main = frame(0, &[], 0.0, 0.1);
        let aux = frame(7, &[], 0.0, 0.1);
        let rig = two_rig(Pose::identity());
        assert!(matches!(merge_frames(&main, &[aux], &rig), Err(Error::MissingExtrinsic(7))));
    }

    #[test]
    fn deskew_with_constant_trajectory_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_frame(&mut rng, 0, 100, 0.0, 0.1);
        let pose = Pose::new(exp_so3(&Vec3::new(0.2, 0.3, -1.0)), Vec3::new(3.0, 1.0, 0.0));
        let poses: Vec<_> = (0..=10).map(|k| (k as f64 * 0.01, pose)).collect();
        let out = deskew(&f, &poses).unwrap();
        for (a, b) in f.points.iter().zip(&out.points) {
            assert!((a.xyz - b.xyz).norm() < 1e-12);
        }
    }

    #[test]
    fn deskew_constant_velocity_translation() {
        let v = Vec3::new(2.0, -1.0, 0.5);
        let poses: Vec<_> = (0..=4).map(|k| {
            let t = k as f64 * 0.025;
            (t, Pose::from_translation(v * t))
        }).collect();
        let x = Vec3::new(4.0, 1.0, -0.3);
        let f = frame(0, &[(x, 0.0), (x, 0.1)], 0.0, 0.1);
        let out = deskew(&f, &poses).unwrap();
        assert!((out.points[0].xyz - (x - v * 0.1)).norm() < 1e-12);
        assert!((out.points[1].xyz - x).norm() < 1e-12);
    }

    #[test]
    fn deskew_reports_gaps() {
        let f = frame(0, &[(Vec3::zeros(), 0.05)], 0.0, 0.2);
        let poses = vec![(0.0, Pose::identity()), (0.1, Pose::identity())];
        assert!(matches!(deskew(&f, &poses), Err(Error::Coverage(_))));
    }

    #[test]
    fn deskew_then_reskew_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_frame(&mut rng, 0, 200, 0.0, 0.1);
        let poses: Vec<_> = (0..=20)
            .map(|k| {
                let t = k as f64 * 0.005;
                (t, Pose::new(exp_so3(&Vec3::new(0.3 * t, -2.0 * t, 6.0 * t)), Vec3::new(t, 2.0 * t, 0.0)))
            })
            .collect();
        let deskewed = deskew(&f, &poses).unwrap();
        // undo: x = T(t_p)⁻¹·T(t_end)·x′
        let end = pose_at(&poses, f.t_end).unwrap();
        for (orig, d) in f.points.iter().zip(&deskewed.points) {
            let back = pose_at(&poses, d.t).unwrap().inverse().compose(&end).transform(&d.xyz);
            assert!((back - orig.xyz).norm() < 1e-9);
        }
    }

    fn imu(t: f64, w: f64, a: f64) -> ImuSample {
        ImuSample {
            t,
            omega: Vec3::new(w, 0.0, 0.0),
            accel: Vec3::new(0.0, 0.0, a),
        }
    }

    #[test]
    fn slice_interpolates_boundaries() {
        let stream: Vec<_> = (0..10).map(|k| imu(k as f64 * 0.1, k as f64, 10.0 - k as f64)).collect();
        let s = slice_imu(&stream, 0.25, 0.55).unwrap();
        let times: Vec<f64> = s.iter().map(|x| x.t).collect();
        assert_eq!(times.len(), 5);
        assert_eq!(times[0], 0.25);
        assert_eq!(times[4], 0.55);
        assert_eq!(&times[1..4], &[stream[3].t, stream[4].t, stream[5].t]);
        // midpoint of readings 2 and 3
        assert!((s[0].omega.x - 2.5).abs() < 1e-12);
        assert!((s[0].accel.z - 7.5).abs() < 1e-12);
    }

    #[test]
    fn slice_of_whole_stream() {
        let stream: Vec<_> = (0..5).map(|k| imu(k as f64, k as f64, 0.0)).collect();
        let s = slice_imu(&stream, 0.0, 4.0).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s, stream);
    }

    #[test]
    fn slice_outside_stream_fails() {
        let stream: Vec<_> = (0..5).map(|k| imu(k as f64, 0.0, 0.0)).collect();
        assert!(matches!(slice_imu(&stream, 5.0, 6.0), Err(Error::Coverage(_))));
        assert!(matches!(slice_imu(&stream, -1.0, 1.0), Err(Error::Coverage(_))));
        assert!(matches!(slice_imu(&[], 0.0, 1.0), Err(Error::Coverage(_))));
    }

    proptest! {
        #[test]
        fn merged_count_and_order(seed in any::<u64>(), n_main in 0usize..60, n_aux in 0usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let main = random_frame(&mut rng, 0, n_main, 2.0, 2.1);
            let aux = random_frame(&mut rng, 1, n_aux, 1.95, 2.15);
            let in_window = aux.points.iter().filter(|p| p.t >= 2.0 && p.t <= 2.1).count();
            let rig = two_rig(Pose::new(exp_so3(&Vec3::new(0.0, 1.5, 0.0)), Vec3::new(0.0, 0.0, 0.3)));
            let merged = merge_frames(&main, &[aux], &rig).unwrap();
            prop_assert_eq!(merged.points.len(), n_main + in_window);
            prop_assert!(merged.points.windows(2).all(|w| w[0].t <= w[1].t));
        }
    }
}
