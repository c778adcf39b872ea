//! Analytic signed distance worlds built from planes, spheres and
//! axis-aligned boxes combined by union.

use crate::geometry::Vec3;
use crate::neural_map::{FieldSample, SdfField};

/// Sphere tracing gives up after this many steps and reports a miss.
pub const MAX_TRACE_STEPS: usize = 128;
/// Tracing stops once the field is below this value (m).
pub const HIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Half-space `{q : n·q < offset}` is solid; `n` is unit.
    Plane { normal: Vec3, offset: f64 },
    Sphere { center: Vec3, radius: f64 },
    /// Everything outside the ball is solid: an enclosure.
    Cavity { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extents: Vec3 },
}

impl Primitive {
    pub fn plane(normal: Vec3, offset: f64) -> Self {
        let n = normal.norm();
        Primitive::Plane {
            normal: normal / n,
            offset: offset / n,
        }
    }

    pub fn sdf(&self, q: &Vec3) -> (f64, Vec3) {
        match *self {
            Primitive::Plane { normal, offset } => (normal.dot(q) - offset, normal),
            Primitive::Sphere { center, radius } => {
                let d = q - center;
                let r = d.norm();
                let g = if r > 0.0 { d / r } else { Vec3::z() };
                (r - radius, g)
            }
            Primitive::Cavity { center, radius } => {
                let (d, g) = Primitive::Sphere { center, radius }.sdf(q);
                (-d, -g)
            }
            Primitive::Box { center, half_extents } => {
                let d = q - center;
                let excess = d.abs() - half_extents;
                let outside = excess.sup(&Vec3::zeros());
                let norm = outside.norm();
                if norm > 0.0 {
                    let g = outside.component_mul(&d.map(f64::signum)) / norm;
                    (norm, g)
                } else {
                    let k = excess.imax();
                    let mut g = Vec3::zeros();
                    g[k] = d[k].signum();
                    (excess[k], g)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self { primitives }
    }

    /// Union SDF and the gradient of the closest primitive.
    pub fn sdf(&self, q: &Vec3) -> (f64, Vec3) {
        self.primitives
            .iter()
            .map(|p| p.sdf(q))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap_or((f64::INFINITY, Vec3::zeros()))
    }

    /// Distance along the unit direction `dir` to the first surface, by
    /// sphere tracing. `None` when nothing is hit within `max_range` or
    /// within [`MAX_TRACE_STEPS`].
    pub fn cast_ray(&self, origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..MAX_TRACE_STEPS {
            let d = self.sdf(&(origin + dir * t)).0;
            if d.abs() < HIT_TOLERANCE {
                return Some(t);
            }
            t += d;
            if t > max_range || t < 0.0 {
                return None;
            }
        }
        None
    }
}

impl SdfField for Scene {
    fn sample(&self, q: &Vec3) -> FieldSample {
        let (sdf, gradient) = self.sdf(q);
        FieldSample {
            sdf,
            gradient,
            valid: sdf.is_finite(),
            neighbor_count: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sphere(c: Vec3, r: f64) -> Primitive {
        Primitive::Sphere { center: c, radius: r }
    }

    #[test]
    fn sphere_closed_form() {
        let (d, g) = sphere(Vec3::zeros(), 2.0).sdf(&Vec3::new(3.0, 0.0, 0.0));
        assert_eq!(d, 1.0);
        assert_eq!(g, Vec3::x());
    }

    #[test]
    fn plane_closed_form() {
        let (d, g) = Primitive::plane(Vec3::z(), 0.0).sdf(&Vec3::new(5.0, 7.0, -0.4));
        assert_eq!(d, -0.4);
        assert_eq!(g, Vec3::z());
    }

    #[test]
    fn union_is_minimum() {
        let a = sphere(Vec3::zeros(), 1.0);
        let b = sphere(Vec3::new(3.0, 0.0, 0.0), 0.5);
        let scene = Scene::new(vec![a, b]);
        for q in [Vec3::new(1.5, 0.0, 0.0), Vec3::new(2.2, 1.0, 0.0), Vec3::new(-3.0, 2.0, 1.0)] {
            assert_eq!(scene.sdf(&q).0, a.sdf(&q).0.min(b.sdf(&q).0));
        }
    }

    #[test]
    fn box_distances() {
        let b = Primitive::Box {
            center: Vec3::new(1.0, 0.0, 0.0),
            half_extents: Vec3::new(1.0, 2.0, 3.0),
        };
        assert_eq!(b.sdf(&Vec3::new(3.0, 0.0, 0.0)), (1.0, Vec3::x()));
        assert_eq!(b.sdf(&Vec3::new(1.0, 0.0, 0.0)).0, -1.0);
        let (d, g) = b.sdf(&Vec3::new(3.0, 3.0, 0.0));
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert!((g - Vec3::new(1.0, 1.0, 0.0).normalize()).norm() < 1e-15);
    }

    #[test]
    fn rays_from_inside_a_cavity() {
        let scene = Scene::new(vec![Primitive::Cavity {
            center: Vec3::zeros(),
            radius: 5.0,
        }]);
        for k in 0..100 {
            let a = k as f64 * 0.37;
            let dir = Vec3::new(a.cos() * (0.3 * a).cos(), a.sin() * (0.3 * a).cos(), (0.3 * a).sin());
            let r = scene.cast_ray(&Vec3::zeros(), &dir.normalize(), 10.0).unwrap();
            assert!((r - 5.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rays_hit_a_plane_below() {
        let scene = Scene::new(vec![Primitive::plane(Vec3::z(), 0.0)]);
        let origin = Vec3::new(0.3, -0.2, 1.5);
        for k in 0..200 {
            let a = k as f64 * 0.1;
            let dir = Vec3::new(a.cos(), a.sin(), -0.3 - 0.002 * k as f64).normalize();
            let r = scene.cast_ray(&origin, &dir, 100.0).unwrap();
            assert!((origin + dir * r).z.abs() < 1e-4);
        }
        assert_eq!(scene.cast_ray(&origin, &Vec3::z(), 100.0), None);
    }

    proptest! {
        #[test]
        fn hits_lie_on_the_surface(seed in 0u64..1000) {
            let scene = Scene::new(vec![
                Primitive::plane(Vec3::z(), -1.0),
                sphere(Vec3::new(3.0, 0.5, 0.0), 1.0),
                Primitive::Box { center: Vec3::new(-2.0, 2.0, 0.0), half_extents: Vec3::new(0.5, 1.0, 2.0) },
            ]);
            let a = seed as f64 * 0.0123;
            let dir = Vec3::new(a.cos(), a.sin(), (seed % 7) as f64 * 0.05 - 0.15).normalize();
            if let Some(r) = scene.cast_ray(&Vec3::zeros(), &dir, 50.0) {
                prop_assert!(scene.sdf(&(dir * r)).0.abs() < 1e-4);
            }
        }

        #[test]
        fn union_sdf_is_lipschitz(x in -5.0f64..5.0, y in -5.0f64..5.0, z in -2.0f64..2.0, dx in -0.5f64..0.5, dy in -0.5f64..0.5) {
            let scene = Scene::new(vec![
                Primitive::plane(Vec3::z(), -1.0),
                sphere(Vec3::new(3.0, 0.5, 0.0), 1.0),
                Primitive::Box { center: Vec3::new(-2.0, 2.0, 0.0), half_extents: Vec3::new(0.5, 1.0, 2.0) },
            ]);
            let a = Vec3::new(x, y, z);
            let b = a + Vec3::new(dx, dy, 0.1);
            prop_assert!((scene.sdf(&a).0 - scene.sdf(&b).0).abs() <= (a - b).norm() + 1e-12);
        }
    }
}
