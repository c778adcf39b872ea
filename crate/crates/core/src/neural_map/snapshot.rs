//! Binary map snapshot (`KNMAP1`), little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "KNMAP1\0\0"
//! n_points     u64
//! F            u32      feature dimension
//! input_dim    u32      decoder input (F, or F + 3 with the offset channel)
//! hidden       2×u32
//! activation   u8       0 = ELU, 1 = identity
//! config_len   u32
//! config       config_len bytes of JSON (MapConfig)
//! frame_count  u64
//! current      u64
//! points       n_points × { xyz: 3×f64, feature: F×f64, created_at: u64, stability: f64 }
//! params       f64 × (decoder parameter count implied by the shape)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, MapConfig, NeuralMap, NeuralPoint, SdfDecoder};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const MAGIC: &[u8; 8] = b"KNMAP1\0\0";

pub fn write_snapshot(map: &NeuralMap, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(map, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn encode(map: &NeuralMap, w: &mut impl Write) -> std::io::Result<()> {
    let config = serde_json::to_vec(map.config()).map_err(std::io::Error::other)?;
    let decoder = map.decoder();
    w.write_all(MAGIC)?;
    w.write_all(&(map.len() as u64).to_le_bytes())?;
    w.write_all(&(map.config().feature_dim as u32).to_le_bytes())?;
    w.write_all(&(decoder.input_dim() as u32).to_le_bytes())?;
    for h in decoder.hidden() {
        w.write_all(&(h as u32).to_le_bytes())?;
    }
    w.write_all(&[decoder.activation().code()])?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&map.frame_count().to_le_bytes())?;
    w.write_all(&map.current_frame().to_le_bytes())?;
    for p in map.points() {
        for x in p.position.iter().chain(&p.feature) {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&p.created_at.to_le_bytes())?;
        w.write_all(&p.stability.to_le_bytes())?;
    }
    for x in decoder.params() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    path: &'a Path,
    inner: BufReader<File>,
    offset: u64,
}

impl Cursor<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::parse(self.path, self.offset, "unexpected end of file")
            } else {
                Error::io(self.path, e)
            }
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::parse(self.path, self.offset, message)
    }
}

pub fn read_snapshot(path: &Path) -> Result<NeuralMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        path,
        inner: BufReader::new(file),
        offset: 0,
    };
    if &c.array::<8>()? != MAGIC {
        return Err(Error::parse(path, 0, "not a KNMAP1 snapshot"));
    }
    let n = c.u64()?;
    let header_start = c.offset;
    let feature_dim = c.u32()? as usize;
    let input_dim = c.u32()? as usize;
    let hidden = [c.u32()? as usize, c.u32()? as usize];
    let activation = Activation::from_code(c.array::<1>()?[0]).ok_or_else(|| c.fail("unknown activation code"))?;
    let config_len = c.u32()? as usize;
    let config_start = c.offset;
    let config: MapConfig = serde_json::from_slice(&c.bytes(config_len)?)
        .map_err(|e| Error::parse(path, config_start, format!("bad configuration: {e}")))?;
    config.validate().map_err(|e| Error::parse(path, config_start, e.to_string()))?;
    if config.feature_dim != feature_dim
        || config.decoder_input_dim() != input_dim
        || config.hidden != hidden
        || config.activation != activation
    {
        return Err(Error::parse(path, header_start, "header disagrees with stored configuration"));
    }
    let frame_count = c.u64()?;
    let current_frame = c.u64()?;
    let points_start = c.offset;
    let f = config.feature_dim;
    let mut points = Vec::new();
    for _ in 0..n {
        let position = Vec3::new(c.f64()?, c.f64()?, c.f64()?);
        let feature = (0..f).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let created_at = c.u64()?;
        let stability = c.f64()?;
        points.push(NeuralPoint {
            position,
            feature,
            created_at,
            stability,
        });
    }
    let params_start = c.offset;
    let n_params = SdfDecoder::zeros(input_dim, hidden, activation).param_count();
    let params = (0..n_params).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let decoder = SdfDecoder::from_params(input_dim, hidden, activation, params)
        .map_err(|e| Error::parse(path, params_start, e.to_string()))?;
    let mut trailing = [0u8; 1];
    if c.inner.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(c.fail("trailing bytes after snapshot"));
    }
    if points.iter().any(|p| !p.position.iter().all(|x| x.is_finite())) {
        return Err(Error::parse(path, points_start, "non-finite neural point position"));
    }

    let mut map = NeuralMap::with_decoder(config, decoder);
    for p in points {
        map.push_point(p);
    }
    map.set_frames(frame_count, current_frame);
    map.rebuild_index();
    Ok(map)
}
