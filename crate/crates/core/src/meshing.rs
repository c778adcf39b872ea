//! Zero-level-set extraction by marching cubes.
//!
//! Corner and edge numbering:
//!
//! ```text
//! corners 0:(0,0,0) 1:(1,0,0) 2:(1,1,0) 3:(0,1,0)
//!         4:(0,0,1) 5:(1,0,1) 6:(1,1,1) 7:(0,1,1)
//! edges   0:(0,1) 1:(1,2) 2:(2,3)  3:(3,0)  4:(4,5) 5:(5,6)
//!         6:(6,7) 7:(7,4) 8:(0,4)  9:(1,5) 10:(2,6) 11:(3,7)
//! ```
//!
//! A corner is inside when its value is negative. The triangle table is
//! built at first use from the face-crossing topology of each case, with
//! inside corners kept apart on ambiguous faces so neighbouring cubes always
//! agree on their shared face and the output is a closed oriented surface.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::io::write_ply;
use crate::neural_map::{NeuralMap, SdfField};

/// Cells per chunk edge.
pub const CHUNK: usize = 32;

/// Crossings are kept this fraction of an edge away from grid nodes, so a
/// node lying exactly on the surface cannot collapse triangles.
const EDGE_MARGIN: f64 = 1e-6;

/// Default limit on the number of grid cells.
pub const DEFAULT_MAX_CELLS: u64 = 1 << 27;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Faces as cyclic corner lists.
const FACES: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [1, 2, 6, 5],
    [2, 3, 7, 6],
    [3, 0, 4, 7],
];

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let finite = min.iter().chain(max.iter()).all(|v| v.is_finite());
        if !finite || (0..3).any(|i| max[i] <= min[i]) {
            return Err(Error::InvalidArgument(format!(
                "bounds need finite min < max on every axis, got {:?} / {:?}",
                min.as_slice(),
                max.as_slice()
            )));
        }
        Ok(Self { min, max })
    }

    /// Smallest box containing `points`, grown by `margin` on every side.
    pub fn around(points: &[Vec3], margin: f64) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::Degenerate("no points to bound".into()))?;
        let (mut lo, mut hi) = (*first, *first);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let m = Vec3::repeat(margin);
        Self::new(lo - m, hi + m)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }
}

impl std::str::FromStr for Aabb {
    type Err = Error;

    /// `xmin,ymin,zmin,xmax,ymax,zmax`.
    fn from_str(s: &str) -> Result<Self> {
        let v = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bounds '{s}': {e}")))?;
        if v.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "bounds '{s}': expected 6 comma-separated numbers, got {}",
                v.len()
            )));
        }
        Self::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Signed enclosed volume; positive for outward-facing triangles.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// V − E + F over the vertices referenced by triangles.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                used[t[k] as usize] = true;
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Whether every directed edge appears once and is matched by its
    /// reverse in another triangle.
    pub fn is_closed_oriented(&self) -> bool {
        let mut directed = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_insert(0u32) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Area-weighted vertex normals.
    pub fn compute_normals(&mut self) {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = self.triangle(t);
            let f = (b - a).cross(&(c - a));
            for &i in tri {
                n[i as usize] += f;
            }
        }
        for v in &mut n {
            let len = v.norm();
            if len > 0.0 {
                *v /= len;
            }
        }
        self.normals = Some(n);
    }
}

/// Triangles (edge-index triples) for every corner-sign case.
pub fn triangle_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(build_table)
}

fn corner(c: usize) -> Vec3 {
    let [x, y, z] = CORNERS[c];
    Vec3::new(x as f64, y as f64, z as f64)
}

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("face corners are adjacent")
}

fn edge_mid(e: usize) -> Vec3 {
    0.5 * (corner(EDGES[e][0]) + corner(EDGES[e][1]))
}

fn case_triangles(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let centre = Vec3::repeat(0.5);
    let mut next: [Option<usize>; 12] = [None; 12];
    for face in &FACES {
        let fc: Vec3 = face.iter().map(|&c| corner(c)).sum::<Vec3>() / 4.0;
        let normal = fc - centre;
        // (edge a, edge b, an inside point on the inside of segment a-b)
        let mut segments: Vec<(usize, usize, Vec3)> = Vec::new();
        let crossing: Vec<usize> = (0..4)
            .filter(|&k| inside(face[k]) != inside(face[(k + 1) % 4]))
            .collect();
        match crossing.len() {
            0 => {}
            2 => {
                let ins: Vec<Vec3> = face.iter().filter(|&&c| inside(c)).map(|&c| corner(c)).collect();
                let anchor = ins.iter().sum::<Vec3>() / ins.len() as f64;
                let e = |k: usize| edge_between(face[k], face[(k + 1) % 4]);
                segments.push((e(crossing[0]), e(crossing[1]), anchor));
            }
            4 => {
                for k in 0..4 {
                    if inside(face[k]) {
                        let prev = edge_between(face[(k + 3) % 4], face[k]);
                        let succ = edge_between(face[k], face[(k + 1) % 4]);
                        segments.push((prev, succ, corner(face[k])));
                    }
                }
            }
            _ => unreachable!("a face cycle crosses an even number of times"),
        }
        for (a, b, anchor) in segments {
            let (pa, pb) = (edge_mid(a), edge_mid(b));
            let side = (pb - pa).cross(&(anchor - pa)).dot(&normal);
            let (from, to) = if side > 0.0 { (a, b) } else { (b, a) };
            next[from] = Some(to);
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if seen[start] || next[start].is_none() {
            continue;
        }
        let mut ring = vec![start];
        seen[start] = true;
        let mut e = next[start].expect("checked");
        while e != start {
            seen[e] = true;
            ring.push(e);
            e = next[e].expect("crossing edges form closed loops");
        }
        triangulate(&ring, &mut tris);
    }
    tris
}

fn share_face(a: usize, b: usize) -> bool {
    FACES
        .iter()
        .any(|f| EDGES[a].iter().chain(&EDGES[b]).all(|c| f.contains(c)))
}

/// Triangulates a crossing loop without chords lying in a cube face, which
/// a neighbouring cube could duplicate.
fn triangulate(ring: &[usize], out: &mut Vec<[u8; 3]>) {
    fn split(poly: &[usize], out: &mut Vec<[u8; 3]>) -> bool {
        let n = poly.len();
        if n == 3 {
            out.push([poly[0] as u8, poly[1] as u8, poly[2] as u8]);
            return true;
        }
        let chord_ok = |i: usize, j: usize| j == i + 1 || (i == 0 && j == n - 1) || !share_face(poly[i], poly[j]);
        let mark = out.len();
        for k in 2..n {
            if !chord_ok(1, k) || !chord_ok(0, k) {
                continue;
            }
            out.push([poly[0] as u8, poly[1] as u8, poly[k] as u8]);
            let ok = (k == 2 || split(&poly[1..=k], out)) && (k == n - 1 || split(&[&poly[k..], &poly[..1]].concat(), out));
            if ok {
                return true;
            }
            out.truncate(mark);
        }
        false
    }
    let ok = (0..ring.len()).any(|r| {
        let rotated = [&ring[r..], &ring[..r]].concat();
        split(&rotated, out)
    });
    assert!(ok, "crossing loop {ring:?} has no face-free triangulation");
}

fn build_table() -> [Vec<[u8; 3]>; 256] {
    let mut table: [Vec<[u8; 3]>; 256] = std::array::from_fn(case_triangles);
    // Orient so normals point from negative to positive values.
    let [a, b, c] = table[1][0].map(|e| edge_mid(e as usize));
    if (b - a).cross(&(c - a)).dot(&Vec3::repeat(1.0)) < 0.0 {
        for case in table.iter_mut() {
            for t in case.iter_mut() {
                t.swap(1, 2);
            }
        }
    }
    table
}

/// Marching-cubes surface of `field` over `bounds` at spacing `voxel`.
///
/// Samples where the field is undefined take `far_value`, which should be
/// positive so that unobserved space closes the surface.
pub fn extract_mesh<F: SdfField + ?Sized>(
    field: &F,
    bounds: &Aabb,
    voxel: f64,
    far_value: f64,
    max_cells: u64,
) -> Result<TriangleMesh> {
    extract_with(field, bounds, voxel, far_value, max_cells, false, |_, _| true)
}

/// Mesh of a neural map, treating unsupported space as `+truncation` and
/// skipping chunks with no neural point in reach.
///
/// With `observed_only`, cells with any unsupported corner emit nothing.
/// This removes the shells that otherwise form where supported negative
/// values behind a surface meet the `+truncation` fill.
pub fn extract_map_mesh(
    map: &NeuralMap,
    bounds: &Aabb,
    voxel: f64,
    max_cells: u64,
    observed_only: bool,
) -> Result<TriangleMesh> {
    let far = map.config().truncation;
    let reach = map.config().query_radius();
    extract_with(map, bounds, voxel, far, max_cells, observed_only, |centre, half_diag| {
        map.has_point_within(centre, half_diag + reach)
    })
}

fn extract_with<F, P>(
    field: &F,
    bounds: &Aabb,
    voxel: f64,
    far_value: f64,
    max_cells: u64,
    observed_only: bool,
    occupied: P,
) -> Result<TriangleMesh>
where
    F: SdfField + ?Sized,
    P: Fn(&Vec3, f64) -> bool,
{
    if !(voxel.is_finite() && voxel > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size must be positive, got {voxel}")));
    }
    if !far_value.is_finite() {
        return Err(Error::InvalidArgument("far value must be finite".into()));
    }
    let ext = bounds.extent();
    let cells_f = ext.map(|e| (e / voxel).ceil().max(1.0));
    let total = cells_f.x * cells_f.y * cells_f.z;
    if total > max_cells as f64 {
        return Err(Error::GridBudget {
            cells: total.min(u64::MAX as f64) as u64,
            budget: max_cells,
        });
    }
    let n = [cells_f.x as usize, cells_f.y as usize, cells_f.z as usize];
    let node = |i: usize, j: usize, k: usize| bounds.min + Vec3::new(i as f64, j as f64, k as f64) * voxel;
    let node_id = |i: usize, j: usize, k: usize| (i + (n[0] + 1) * (j + (n[1] + 1) * k)) as u64;

    let table = triangle_table();
    let mut mesh = TriangleMesh::default();
    let mut welded: HashMap<u64, u32> = HashMap::new();
    let chunks = n.map(|c| c.div_ceil(CHUNK));
    let mut values = Vec::new();
    let mut valid = Vec::new();
    for cz in 0..chunks[2] {
        for cy in 0..chunks[1] {
            for cx in 0..chunks[0] {
                let lo = [cx * CHUNK, cy * CHUNK, cz * CHUNK];
                let hi = [0, 1, 2].map(|a| (lo[a] + CHUNK).min(n[a]));
                let (p0, p1) = (node(lo[0], lo[1], lo[2]), node(hi[0], hi[1], hi[2]));
                if !occupied(&(0.5 * (p0 + p1)), 0.5 * (p1 - p0).norm()) {
                    continue;
                }
                let dims = [0, 1, 2].map(|a| hi[a] - lo[a] + 1);
                values.clear();
                valid.clear();
                for k in 0..dims[2] {
                    for j in 0..dims[1] {
                        for i in 0..dims[0] {
                            let q = node(lo[0] + i, lo[1] + j, lo[2] + k);
                            let v = field.value(&q).filter(|v| v.is_finite());
                            valid.push(v.is_some());
                            values.push(v.unwrap_or(far_value));
                        }
                    }
                }
                let at = |i: usize, j: usize, k: usize| values[i + dims[0] * (j + dims[1] * k)];
                for k in 0..dims[2] - 1 {
                    for j in 0..dims[1] - 1 {
                        for i in 0..dims[0] - 1 {
                            let cv = CORNERS.map(|[dx, dy, dz]| at(i + dx, j + dy, k + dz));
                            let case = (0..8).fold(0usize, |m, c| m | ((cv[c] < 0.0) as usize) << c);
                            let tris = &table[case];
                            if tris.is_empty() {
                                continue;
                            }
                            if observed_only
                                && CORNERS.iter().any(|&[dx, dy, dz]| !valid[i + dx + dims[0] * (j + dy + dims[1] * (k + dz))])
                            {
                                continue;
                            }
                            let (gi, gj, gk) = (lo[0] + i, lo[1] + j, lo[2] + k);
                            let mut vid = [u32::MAX; 12];
                            for t in tris {
                                let mut ids = [0u32; 3];
                                for (s, &e) in t.iter().enumerate() {
                                    let e = e as usize;
                                    if vid[e] == u32::MAX {
                                        let [a, b] = EDGES[e];
                                        let (ca, cb) = (CORNERS[a], CORNERS[b]);
                                        // Order endpoints low to high so the key is unique.
                                        let (ca, cb, va, vb) =
                                            if ca <= cb { (ca, cb, cv[a], cv[b]) } else { (cb, ca, cv[b], cv[a]) };
                                        let axis = (0..3).find(|&x| ca[x] != cb[x]).expect("edge spans an axis");
                                        let (ai, aj, ak) = (gi + ca[0], gj + ca[1], gk + ca[2]);
                                        let key = node_id(ai, aj, ak) * 3 + axis as u64;
                                        vid[e] = *welded.entry(key).or_insert_with(|| {
                                            let t = (va / (va - vb)).clamp(EDGE_MARGIN, 1.0 - EDGE_MARGIN);
                                            let pa = node(ai, aj, ak);
                                            let pb = node(gi + cb[0], gj + cb[1], gk + cb[2]);
                                            mesh.vertices.push(pa + (pb - pa) * t);
                                            (mesh.vertices.len() - 1) as u32
                                        });
                                    }
                                    ids[s] = vid[e];
                                }
                                if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                                    continue;
                                }
                                let [a, b, c] = ids.map(|i| mesh.vertices[i as usize]);
                                if (b - a).cross(&(c - a)).norm_squared() == 0.0 {
                                    continue;
                                }
                                mesh.triangles.push(ids);
                            }
                        }
                    }
                }
            }
        }
    }
    compact(&mut mesh);
    mesh.compute_normals();
    Ok(mesh)
}

/// Drops vertices no triangle references, keeping first-use order.
fn compact(mesh: &mut TriangleMesh) {
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut kept = Vec::with_capacity(mesh.vertices.len());
    for t in &mut mesh.triangles {
        for i in t.iter_mut() {
            let r = &mut remap[*i as usize];
            if *r == u32::MAX {
                *r = kept.len() as u32;
                kept.push(mesh.vertices[*i as usize]);
            }
            *i = *r;
        }
    }
    mesh.vertices = kept;
}

/// Binary little-endian PLY with float32 positions and int32 triangles.
pub fn write_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    write_ply(path, &mesh.vertices, Some(&mesh.triangles))
}
