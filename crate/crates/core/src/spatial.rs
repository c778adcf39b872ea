//! Static kd-tree over 3D points with exact k-nearest and radius queries.
//!
//! Ties in distance are broken by point id so query results do not depend
//! on traversal order.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Default)]
pub struct KdTree {
    points: Vec<Vec3>,
    ids: Vec<usize>,
    /// Split axis of the node whose median sits at this position.
    axes: Vec<u8>,
}

/// `(squared distance, id)` ordered lexicographically.
pub type Neighbor = (f64, usize);

fn less(a: &Neighbor, b: &Neighbor) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Insert into a list kept sorted and capped at `k` entries.
pub fn push_bounded(list: &mut Vec<Neighbor>, k: usize, cand: Neighbor) {
    if list.len() == k {
        match list.last() {
            Some(worst) if less(&cand, worst) => {
                list.pop();
            }
            _ => return,
        }
    }
    let pos = list.partition_point(|x| less(x, &cand));
    list.insert(pos, cand);
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        Self::build_with_ids(points.iter().copied().zip(0..).collect())
    }

    pub fn build_with_ids(mut items: Vec<(Vec3, usize)>) -> Self {
        let n = items.len();
        let mut axes = vec![0u8; n];
        build_range(&mut items, &mut axes, 0, n);
        let (points, ids) = items.into_iter().unzip();
        Self { points, ids, axes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, q: &Vec3) -> Option<Neighbor> {
        let mut out = Vec::with_capacity(1);
        self.knn(q, 1, f64::INFINITY, &mut out);
        out.first().copied()
    }

    /// Up to `k` nearest points with squared distance `<= max_d2`, merged
    /// into `out` (which may already hold candidates from elsewhere).
    pub fn knn(&self, q: &Vec3, k: usize, max_d2: f64, out: &mut Vec<Neighbor>) {
        if k == 0 {
            return;
        }
        self.knn_range(q, k, max_d2, 0, self.points.len(), out);
    }

    fn worst(out: &[Neighbor], k: usize, max_d2: f64) -> f64 {
        if out.len() == k {
            out[k - 1].0.min(max_d2)
        } else {
            max_d2
        }
    }

    fn knn_range(&self, q: &Vec3, k: usize, max_d2: f64, lo: usize, hi: usize, out: &mut Vec<Neighbor>) {
        if hi - lo <= LEAF_SIZE {
            for i in lo..hi {
                let d2 = (self.points[i] - q).norm_squared();
                if d2 <= max_d2 {
                    push_bounded(out, k, (d2, self.ids[i]));
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[mid][axis];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_range(q, k, max_d2, first.0, first.1, out);
        let d2 = (self.points[mid] - q).norm_squared();
        if d2 <= max_d2 {
            push_bounded(out, k, (d2, self.ids[mid]));
        }
        if diff * diff <= Self::worst(out, k, max_d2) {
            self.knn_range(q, k, max_d2, second.0, second.1, out);
        }
    }

    /// Whether any point lies strictly closer than `sqrt(r2)`.
    pub fn any_within(&self, q: &Vec3, r2: f64) -> bool {
        self.any_range(q, r2, 0, self.points.len())
    }

    fn any_range(&self, q: &Vec3, r2: f64, lo: usize, hi: usize) -> bool {
        if hi - lo <= LEAF_SIZE {
            return self.points[lo..hi].iter().any(|p| (p - q).norm_squared() < r2);
        }
        let mid = (lo + hi) / 2;
        if (self.points[mid] - q).norm_squared() < r2 {
            return true;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[mid][axis];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.any_range(q, r2, first.0, first.1) || (diff * diff < r2 && self.any_range(q, r2, second.0, second.1))
    }
}

fn build_range(items: &mut [(Vec3, usize)], axes: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= LEAF_SIZE {
        return;
    }
    let slice = &mut items[lo..hi];
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for (p, _) in slice.iter() {
        min = min.inf(p);
        max = max.sup(p);
    }
    let axis = (max - min).imax();
    let mid = (hi - lo) / 2;
    slice.select_nth_unstable_by(mid, |a, b| {
        a.0[axis].total_cmp(&b.0[axis]).then(a.1.cmp(&b.1))
    });
    axes[lo + mid] = axis as u8;
    build_range(items, axes, lo, lo + mid);
    build_range(items, axes, lo + mid + 1, hi);
}

/// Exhaustive nearest-neighbor search, used as the oracle for the tree.
pub fn brute_force_knn(points: &[Vec3], q: &Vec3, k: usize, max_d2: f64) -> Vec<Neighbor> {
    let mut out = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 <= max_d2 {
            push_bounded(&mut out, k, (d2, i));
        }
    }
    out
}
