//! On-disk formats: datasets (IMU CSV, binary scans, rig JSON), TUM
//! trajectories, binary PLY, and TOML configuration.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eskf::ImuSample;
use crate::geometry::{Mat3, Pose, Vec3};
use crate::preprocessing::{LidarFrame, LidarPoint, SensorId, SensorRig};

/// Everything the odometry consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub frames: BTreeMap<SensorId, Vec<LidarFrame>>,
    pub rig: SensorRig,
}

pub const IMU_FILE: &str = "imu.csv";
pub const RIG_FILE: &str = "rig.json";
pub const SCAN_DIR: &str = "scans";
pub const META_FILE: &str = "meta.json";
pub const TRUTH_FILE: &str = "groundtruth.tum";
pub const IMU_HEADER: &str = "t,wx,wy,wz,ax,ay,az";
const SCAN_RECORD: usize = 20;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `contents` produced by `body` to `path`, creating parent directories.
pub fn write_with(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w).map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

/// Reads a text file line by line, reporting parse failures at the byte
/// offset where the offending line starts.
fn parse_lines<T>(path: &Path, mut parse: impl FnMut(&str) -> std::result::Result<Option<T>, String>) -> Result<Vec<T>> {
    let mut reader = open(path)?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        if let Some(item) = parse(line.trim_end_matches(['\n', '\r'])).map_err(|m| Error::parse(path, offset, m))? {
            out.push(item);
        }
        offset += n as u64;
    }
    Ok(out)
}

fn parse_floats<const N: usize>(fields: &[&str]) -> std::result::Result<[f64; N], String> {
    if fields.len() != N {
        return Err(format!("expected {N} fields, found {}", fields.len()));
    }
    let mut out = [0.0f64; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f.trim().parse().map_err(|_| format!("not a number: {f:?}"))?;
        if !o.is_finite() {
            return Err(format!("non-finite value: {f:?}"));
        }
    }
    Ok(out)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "{IMU_HEADER}")?;
        for s in samples {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.t, s.omega.x, s.omega.y, s.omega.z, s.accel.x, s.accel.y, s.accel.z
            )?;
        }
        Ok(())
    })
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let mut header = true;
    let mut last = f64::NEG_INFINITY;
    parse_lines(path, |line| {
        if std::mem::take(&mut header) {
            return if line.trim() == IMU_HEADER {
                Ok(None)
            } else {
                Err(format!("expected header {IMU_HEADER:?}"))
            };
        }
        if line.trim().is_empty() {
            return Ok(None);
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [t, wx, wy, wz, ax, ay, az] = parse_floats::<7>(&fields)?;
        if t <= last {
            return Err(format!("timestamp {t} does not increase"));
        }
        last = t;
        Ok(Some(ImuSample {
            t,
            omega: Vec3::new(wx, wy, wz),
            accel: Vec3::new(ax, ay, az),
        }))
    })
}

pub fn rotation_to_quaternion(r: &Mat3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r))
}

/// `t x y z qx qy qz qw`, one pose per line.
pub fn write_tum(path: &Path, poses: &[(f64, Pose)]) -> Result<()> {
    write_with(path, |w| {
        for (t, pose) in poses {
            let q = rotation_to_quaternion(&pose.rotation);
            let p = pose.translation;
            writeln!(
                w,
                "{t:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                p.x, p.y, p.z, q.i, q.j, q.k, q.w
            )?;
        }
        Ok(())
    })
}

pub fn read_tum(path: &Path) -> Result<Vec<(f64, Pose)>> {
    parse_lines(path, |line| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(None);
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [t, x, y, z, qx, qy, qz, qw] = parse_floats::<8>(&fields)?;
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(format!("quaternion norm {} is not 1", q.norm()));
        }
        let rotation = *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix();
        Ok(Some((t, Pose::new(rotation, Vec3::new(x, y, z)))))
    })
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], path: &Path, offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::parse(path, offset, "unexpected end of file")
        } else {
            Error::io(path, e)
        }
    })
}

/// Little-endian records of `f32 x, y, z` and `f64` absolute time.
pub fn write_scan(path: &Path, frame: &LidarFrame) -> Result<()> {
    write_with(path, |w| {
        for p in &frame.points {
            for c in p.xyz.iter() {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
            w.write_all(&p.t.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn read_scan(path: &Path, sensor: SensorId) -> Result<Vec<LidarPoint>> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() % SCAN_RECORD != 0 {
        let offset = (bytes.len() - bytes.len() % SCAN_RECORD) as u64;
        return Err(Error::parse(path, offset, format!("truncated point record ({SCAN_RECORD} bytes each)")));
    }
    let mut r = bytes.as_slice();
    let mut points = Vec::with_capacity(bytes.len() / SCAN_RECORD);
    let mut offset = 0u64;
    let mut rec = [0u8; SCAN_RECORD];
    while !r.is_empty() {
        read_exact_at(&mut r, &mut rec, path, offset)?;
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
        let t = f64::from_le_bytes(rec[12..20].try_into().expect("8 bytes"));
        let xyz = Vec3::new(f(0), f(1), f(2));
        if !t.is_finite() || !xyz.iter().all(|c| c.is_finite()) {
            return Err(Error::parse(path, offset, "non-finite point record"));
        }
        points.push(LidarPoint { xyz, t, source: sensor });
        offset += SCAN_RECORD as u64;
    }
    Ok(points)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanMeta {
    files: Vec<String>,
    t_start: Vec<f64>,
    t_end: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RigFile {
    main: SensorId,
    sensors: Vec<SensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SensorEntry {
    id: SensorId,
    /// Row-major sensor→body rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_with(path, |w| writeln!(w, "{text}"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        let offset = text
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::parse(path, offset as u64, e.to_string())
    })
}

pub fn write_rig(path: &Path, rig: &SensorRig) -> Result<()> {
    let file = RigFile {
        main: rig.main,
        sensors: rig
            .extrinsics
            .iter()
            .map(|(&id, pose)| {
                let r = pose.rotation;
                SensorEntry {
                    id,
                    rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
                    translation: pose.translation.into(),
                }
            })
            .collect(),
    };
    write_json(path, &file)
}

pub fn read_rig(path: &Path) -> Result<SensorRig> {
    let file: RigFile = read_json(path)?;
    let mut extrinsics = BTreeMap::new();
    for s in file.sensors {
        let rotation = Mat3::from_row_slice(&s.rotation);
        let pose = Pose::new(rotation, Vec3::from(s.translation));
        if !pose.is_valid() {
            return Err(Error::parse(path, 0, format!("extrinsic of sensor {} is not a rigid transform", s.id)));
        }
        extrinsics.insert(s.id, pose);
    }
    let rig = SensorRig {
        main: file.main,
        extrinsics,
    };
    rig.validate().map_err(|e| Error::parse(path, 0, e.to_string()))?;
    Ok(rig)
}

fn scan_name(t_start: f64) -> String {
    format!("{t_start:.6}.bin")
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_imu_csv(&dir.join(IMU_FILE), &data.imu)?;
    write_rig(&dir.join(RIG_FILE), &data.rig)?;
    for id in data.rig.extrinsics.keys() {
        let sensor_dir = dir.join(SCAN_DIR).join(id.to_string());
        fs::create_dir_all(&sensor_dir).map_err(|e| Error::io(&sensor_dir, e))?;
        let frames = data.frames.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let mut meta = ScanMeta {
            files: Vec::new(),
            t_start: Vec::new(),
            t_end: Vec::new(),
        };
        for frame in frames {
            let name = scan_name(frame.t_start);
            write_scan(&sensor_dir.join(&name), frame)?;
            meta.files.push(name);
            meta.t_start.push(frame.t_start);
            meta.t_end.push(frame.t_end);
        }
        write_json(&sensor_dir.join(META_FILE), &meta)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let imu = read_imu_csv(&dir.join(IMU_FILE))?;
    let rig = read_rig(&dir.join(RIG_FILE))?;
    let mut frames = BTreeMap::new();
    for &id in rig.extrinsics.keys() {
        let sensor_dir = dir.join(SCAN_DIR).join(id.to_string());
        let meta_path = sensor_dir.join(META_FILE);
        let meta: ScanMeta = read_json(&meta_path)?;
        if meta.files.len() != meta.t_start.len() || meta.files.len() != meta.t_end.len() {
            return Err(Error::parse(&meta_path, 0, "files, t_start and t_end lists differ in length"));
        }
        let mut list = Vec::with_capacity(meta.files.len());
        for ((name, &t_start), &t_end) in meta.files.iter().zip(&meta.t_start).zip(&meta.t_end) {
            if !(t_end > t_start) {
                return Err(Error::parse(&meta_path, 0, format!("frame {name} has t_end <= t_start")));
            }
            let points = read_scan(&sensor_dir.join(name), id)?;
            list.push(LidarFrame {
                points,
                t_start,
                t_end,
                frame_id: id,
            });
        }
        frames.insert(id, list);
    }
    Ok(Dataset { imu, frames, rig })
}

/// Reads a TOML configuration, reporting the byte offset of syntax errors.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let offset = e.span().map(|s| s.start).unwrap_or(0);
        Error::parse(path, offset as u64, e.message().to_string())
    })
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_with(path, |w| w.write_all(text.as_bytes()))
}

/// Vertices and triangles read back from a binary PLY.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[i32; 3]>,
}

/// Binary little-endian PLY with `float` x, y, z vertices and, when `faces`
/// is given, `int` vertex-index triangles.
pub fn write_ply(path: &Path, vertices: &[Vec3], faces: Option<&[[u32; 3]]>) -> Result<()> {
    write_with(path, |w| {
        write!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", vertices.len())?;
        w.write_all(b"property float x\nproperty float y\nproperty float z\n")?;
        if let Some(f) = faces {
            write!(w, "element face {}\nproperty list uchar int vertex_indices\n", f.len())?;
        }
        w.write_all(b"end_header\n")?;
        for v in vertices {
            for c in v.iter() {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
        for tri in faces.unwrap_or(&[]) {
            w.write_all(&[3u8])?;
            for &i in tri {
                w.write_all(&(i as i32).to_le_bytes())?;
            }
        }
        Ok(())
    })
}

/// Reads the subset of PLY written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<PlyData> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let Some(end) = bytes.windows(11).position(|w| w == b"end_header\n") else {
        return Err(Error::parse(path, 0, "missing end_header"));
    };
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::parse(path, 0, "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format binary_little_endian 1.0") {
        return Err(Error::parse(path, 0, "not a binary little-endian PLY"));
    }
    let (mut n_vertices, mut n_faces) = (0usize, 0usize);
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["element", "vertex", n] => n_vertices = n.parse().map_err(|_| Error::parse(path, 0, "bad vertex count"))?,
            ["element", "face", n] => n_faces = n.parse().map_err(|_| Error::parse(path, 0, "bad face count"))?,
            ["element", other, ..] => return Err(Error::parse(path, 0, format!("unsupported element {other}"))),
            _ => {}
        }
    }
    let mut offset = (end + 11) as u64;
    let mut r = &bytes[end + 11..];
    let mut data = PlyData::default();
    let mut buf = [0u8; 12];
    for _ in 0..n_vertices {
        read_exact_at(&mut r, &mut buf, path, offset)?;
        data.vertices
            .push(std::array::from_fn(|k| f32::from_le_bytes(buf[4 * k..4 * k + 4].try_into().expect("4 bytes"))));
        offset += 12;
    }
    let mut rec = [0u8; 13];
    for _ in 0..n_faces {
        read_exact_at(&mut r, &mut rec, path, offset)?;
        if rec[0] != 3 {
            return Err(Error::parse(path, offset, "only triangles are supported"));
        }
        let tri: [i32; 3] = std::array::from_fn(|k| i32::from_le_bytes(rec[1 + 4 * k..5 + 4 * k].try_into().expect("4 bytes")));
        if tri.iter().any(|&i| i < 0 || i as usize >= n_vertices) {
            return Err(Error::parse(path, offset, "face index out of range"));
        }
        data.faces.push(tri);
        offset += 13;
    }
    if !r.is_empty() {
        return Err(Error::parse(path, offset, "trailing bytes after PLY body"));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;

    fn frame(id: SensorId, t_start: f64, n: usize) -> LidarFrame {
        LidarFrame {
            points: (0..n)
                .map(|i| LidarPoint {
                    xyz: Vec3::new(i as f64 * 0.25, -1.5, 2.0 + i as f64 * 0.125),
                    t: t_start + i as f64 * 1e-3,
                    source: id,
                })
                .collect(),
            t_start,
            t_end: t_start + 0.1,
            frame_id: id,
        }
    }

    fn dataset() -> Dataset {
        let mut rig = SensorRig::single(0, Pose::from_translation(Vec3::new(0.0, 0.0, 0.1)));
        rig.extrinsics
            .insert(1, Pose::new(exp_so3(&Vec3::new(1.0, 0.2, -0.3)), Vec3::new(0.1, 0.0, 0.2)));
        let imu = (0..50)
            .map(|k| ImuSample {
                t: k as f64 * 0.005,
                omega: Vec3::new(0.1, -0.2, 0.3 + k as f64 * 1e-3),
                accel: Vec3::new(0.01, 0.02, 9.81),
            })
            .collect();
        let mut frames = BTreeMap::new();
        frames.insert(0, vec![frame(0, 0.0, 10), frame(0, 0.1, 7)]);
        frames.insert(1, vec![frame(1, 0.05, 4)]);
        Dataset { imu, frames, rig }
    }

    fn parse_offset(e: Error) -> u64 {
        match e {
            Error::Parse { offset, .. } => offset,
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset();
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.imu, data.imu);
        assert_eq!(back.frames, data.frames);
        assert_eq!(back.rig.main, 0);
        for (id, pose) in &data.rig.extrinsics {
            let got = back.rig.extrinsics[id];
            assert!((got.rotation - pose.rotation).norm() < 1e-12);
            assert_eq!(got.translation, pose.translation);
        }
    }

    #[test]
    fn tum_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tum");
        let poses: Vec<(f64, Pose)> = (0..5)
            .map(|k| {
                let r = exp_so3(&Vec3::new(0.3 * k as f64, -0.1, 2.5));
                (k as f64 * 0.1, Pose::new(r, Vec3::new(k as f64, 2.0, -3.0)))
            })
            .collect();
        write_tum(&path, &poses).unwrap();
        let back = read_tum(&path).unwrap();
        assert_eq!(back.len(), poses.len());
        for ((ta, a), (tb, b)) in poses.iter().zip(&back) {
            assert!((ta - tb).abs() < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-8);
            assert!((a.rotation - b.rotation).norm() < 1e-8);
        }
    }

    #[test]
    fn malformed_inputs_report_their_offset() {
        let dir = tempfile::tempdir().unwrap();
        let imu = dir.path().join("imu.csv");
        fs::write(&imu, format!("{IMU_HEADER}\n0,0,0,0,0,0,9.8\n0.1,0,0,x,0,0,9.8\n")).unwrap();
        let offset = parse_offset(read_imu_csv(&imu).unwrap_err());
        assert_eq!(offset, IMU_HEADER.len() as u64 + 1 + 16);

        fs::write(&imu, format!("{IMU_HEADER}\n0.1,0,0,0,0,0,9.8\n0.1,0,0,0,0,0,9.8\n")).unwrap();
        assert!(read_imu_csv(&imu).is_err());

        let scan = dir.path().join("s.bin");
        fs::write(&scan, vec![0u8; SCAN_RECORD * 2 + 3]).unwrap();
        assert_eq!(parse_offset(read_scan(&scan, 0).unwrap_err()), 2 * SCAN_RECORD as u64);

        let tum = dir.path().join("t.tum");
        fs::write(&tum, "# header\n0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 2\n").unwrap();
        assert_eq!(parse_offset(read_tum(&tum).unwrap_err()), 25);
    }

    #[test]
    fn point_ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 8.0)];
        write_ply(&path, &pts, None).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.vertices, vec![[1.0, 2.0, 3.0], [-0.5, 0.25, 8.0]]);
        assert!(back.faces.is_empty());

        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(read_ply(&path).is_err());
    }
}
