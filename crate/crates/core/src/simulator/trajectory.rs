//! Smooth ground-truth trajectories through control poses.
//!
//! Positions follow a cubic Hermite spline with Catmull-Rom tangents. On
//! each segment the rotation is `R_k·Exp(φ(s))` with `φ` a cubic Hermite
//! curve whose end tangents match the knot angular velocities, so the
//! attitude is C¹ across knots. A knot equal to one of its neighbours gets
//! zero tangents, which produces exact dwells.

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, log_so3, right_jacobian, right_jacobian_inv, Mat3, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPose {
    pub t: f64,
    pub position: Vec3,
    pub rotation: Mat3,
}

/// Pose and derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicState {
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub rotation: Mat3,
    /// Body frame (rad/s).
    pub angular_velocity: Vec3,
}

impl KinematicState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }
}

#[derive(Debug, Clone)]
pub struct TrajectorySpline {
    knots: Vec<ControlPose>,
    velocities: Vec<Vec3>,
    angular_velocities: Vec<Vec3>,
    /// `Log(R_kᵀ·R_{k+1})`.
    increments: Vec<Vec3>,
}

struct Basis {
    h: [f64; 4],
    d1: [f64; 4],
    d2: [f64; 4],
}

fn hermite(s: f64) -> Basis {
    let s2 = s * s;
    let s3 = s2 * s;
    Basis {
        h: [2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2],
        d1: [6.0 * s2 - 6.0 * s, 3.0 * s2 - 4.0 * s + 1.0, -6.0 * s2 + 6.0 * s, 3.0 * s2 - 2.0 * s],
        d2: [12.0 * s - 6.0, 6.0 * s - 4.0, -12.0 * s + 6.0, 6.0 * s - 2.0],
    }
}

impl TrajectorySpline {
    pub fn new(knots: Vec<ControlPose>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidArgument("a trajectory needs at least two control poses".into()));
        }
        if knots.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidArgument("control pose times must increase".into()));
        }
        let increments = knots
            .windows(2)
            .map(|w| log_so3(&(w[0].rotation.transpose() * w[1].rotation)))
            .collect::<Result<Vec<_>>>()?;
        if increments.iter().any(|d| d.norm() > 0.9 * std::f64::consts::PI) {
            return Err(Error::InvalidArgument(
                "consecutive control rotations differ by nearly π; add knots".into(),
            ));
        }
        let n = knots.len();
        let mut velocities = vec![Vec3::zeros(); n];
        let mut angular_velocities = vec![Vec3::zeros(); n];
        for k in 1..n - 1 {
            let span = knots[k + 1].t - knots[k - 1].t;
            let (prev, next) = (&knots[k - 1], &knots[k + 1]);
            if prev.position != knots[k].position && next.position != knots[k].position {
                velocities[k] = (next.position - prev.position) / span;
            }
            // Both increments are rotation vectors of rotations that fix
            // their own axis, so they are expressed equally in frame k.
            if increments[k - 1] != Vec3::zeros() && increments[k] != Vec3::zeros() {
                angular_velocities[k] = (increments[k - 1] + increments[k]) / span;
            }
        }
        Ok(Self {
            knots,
            velocities,
            angular_velocities,
            increments,
        })
    }

    pub fn start(&self) -> f64 {
        self.knots[0].t
    }

    pub fn end(&self) -> f64 {
        self.knots[self.knots.len() - 1].t
    }

    pub fn knots(&self) -> &[ControlPose] {
        &self.knots
    }

    /// State at `t`; outside the knot span the end pose is held at rest.
    pub fn evaluate(&self, t: f64) -> KinematicState {
        let last = self.knots.len() - 1;
        let rest = |k: &ControlPose| KinematicState {
            t,
            position: k.position,
            velocity: Vec3::zeros(),
            acceleration: Vec3::zeros(),
            rotation: k.rotation,
            angular_velocity: Vec3::zeros(),
        };
        if t <= self.start() {
            return rest(&self.knots[0]);
        }
        if t >= self.end() {
            return rest(&self.knots[last]);
        }
        let k = self.knots.partition_point(|c| c.t <= t) - 1;
        let (a, b) = (&self.knots[k], &self.knots[k + 1]);
        let h = b.t - a.t;
        let s = (t - a.t) / h;
        let basis = hermite(s);

        let pos_terms = [a.position, self.velocities[k] * h, b.position, self.velocities[k + 1] * h];
        let combine = |w: &[f64; 4], terms: &[Vec3; 4]| -> Vec3 { terms.iter().zip(w).map(|(v, c)| v * *c).sum() };
        let position = combine(&basis.h, &pos_terms);
        let velocity = combine(&basis.d1, &pos_terms) / h;
        let acceleration = combine(&basis.d2, &pos_terms) / (h * h);

        let delta = self.increments[k];
        let rot_terms = [
            Vec3::zeros(),
            self.angular_velocities[k] * h,
            delta,
            right_jacobian_inv(&delta) * self.angular_velocities[k + 1] * h,
        ];
        let phi = combine(&basis.h, &rot_terms);
        let dphi = combine(&basis.d1, &rot_terms) / h;
        KinematicState {
            t,
            position,
            velocity,
            acceleration,
            rotation: a.rotation * exp_so3(&phi),
            angular_velocity: right_jacobian(&phi) * dphi,
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.evaluate(t).pose()
    }
}
