//! Binary checkpoint of a [`FieldParams`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPKF"  magic
//! u32     version
//! repeated until end of file:
//!   u32   name length, then UTF-8 name bytes
//!   u32   rank, then rank × u64 dims
//!   f64   payload, product(dims) values
//! ```
//!
//! The first two tensors describe the architecture (`meta.config`,
//! `meta.frame`), then every network tensor in store order, and the scalar
//! `threshold` last.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::HashGridConfig;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::math::Aabb;

pub const MAGIC: &[u8; 4] = b"SPKF";
pub const VERSION: u32 = 1;
const THRESHOLD: &str = "threshold";

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn config_vector(c: &FieldConfig) -> Vec<f64> {
    let h = &c.hash;
    [
        h.levels,
        h.log2_table_size as usize,
        h.features,
        h.base_resolution as usize,
        h.max_resolution as usize,
        c.density_hidden,
        c.density_layers,
        c.geo_features,
        c.color_hidden,
        c.color_layers,
        c.sh_degree,
    ]
    .iter()
    .map(|&v| v as f64)
    .collect()
}

fn config_from_vector(v: &[f64]) -> Result<FieldConfig> {
    if v.len() != 11 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0 || *x > u32::MAX as f64) {
        return Err(Error::Checkpoint("meta.config is malformed".into()));
    }
    let u = |i: usize| v[i] as usize;
    Ok(FieldConfig {
        hash: HashGridConfig {
            levels: u(0),
            log2_table_size: u(1) as u32,
            features: u(2),
            base_resolution: u(3) as u32,
            max_resolution: u(4) as u32,
        },
        density_hidden: u(5),
        density_layers: u(6),
        geo_features: u(7),
        color_hidden: u(8),
        color_layers: u(9),
        sh_degree: u(10),
    })
}

/// Tensors of a field in file order.
pub fn tensors(field: &FieldParams) -> Vec<NamedTensor> {
    let frame = field.frame();
    let mut out = vec![
        NamedTensor {
            name: "meta.config".into(),
            shape: vec![11],
            data: config_vector(field.config()),
        },
        NamedTensor {
            name: "meta.frame".into(),
            shape: vec![6],
            data: frame.min.iter().chain(&frame.max).copied().collect(),
        },
    ];
    let store = field.store();
    for id in store.ids() {
        if id == field.threshold_id() {
            continue;
        }
        let e = store.entry(id);
        out.push(NamedTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: store.get(id).to_vec(),
        });
    }
    out.push(NamedTensor {
        name: THRESHOLD.into(),
        shape: vec![],
        data: vec![field.threshold()],
    });
    out
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = r.u64("dims")? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            shape.push(d);
        }
        let bytes = r.take(count.checked_mul(8).unwrap_or(usize::MAX), &name)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn to_bytes(field: &FieldParams) -> Vec<u8> {
    encode_tensors(&tensors(field))
}

pub fn from_bytes(buf: &[u8]) -> Result<FieldParams> {
    let ts = decode_tensors(buf)?;
    let find = |name: &str| {
        ts.iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let config = config_from_vector(&find("meta.config")?.data)?;
    let fr = &find("meta.frame")?.data;
    if fr.len() != 6 {
        return Err(Error::Checkpoint("meta.frame must hold 6 values".into()));
    }
    let frame = Aabb::new([fr[0], fr[1], fr[2]], [fr[3], fr[4], fr[5]]);
    let mut field = FieldParams::with_frame(config, frame, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
    let expected = 2 + field.store().entries().len();
    if ts.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} tensors, found {}", ts.len())));
    }
    if ts.last().map(|t| t.name.as_str()) != Some(THRESHOLD) {
        return Err(Error::Checkpoint("threshold must be the last tensor".into()));
    }
    let ids: Vec<_> = field.store().ids().collect();
    for id in ids {
        let e = field.store().entry(id).clone();
        let t = find(&e.name)?;
        let shape_ok = if id == field.threshold_id() {
            t.shape.is_empty()
        } else {
            t.shape == e.shape
        };
        if !shape_ok || t.data.len() != e.len {
            return Err(Error::Checkpoint(format!("tensor {} has shape {:?}, expected {:?}", e.name, t.shape, e.shape)));
        }
        field.store_mut().get_mut(id).copy_from_slice(&t.data);
    }
    Ok(field)
}

pub fn save(field: &FieldParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(field)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<FieldParams> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> FieldParams {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FieldConfig {
            hash: HashGridConfig {
                levels: 2,
                log2_table_size: 5,
                features: 2,
                base_resolution: 2,
                max_resolution: 4,
            },
            density_hidden: 4,
            density_layers: 1,
            geo_features: 2,
            color_hidden: 3,
            color_layers: 2,
            sh_degree: 3,
        };
        let mut f = FieldParams::new(cfg, Aabb::cube(1.5), &mut rng).unwrap();
        for v in f.store_mut().values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        f.set_threshold(0.7);
        f
    }

    #[test]
    fn byte_exact_round_trip() {
        let f = sample();
        let bytes = to_bytes(&f);
        let g = from_bytes(&bytes).unwrap();
        assert_eq!(g, f);
        assert_eq!(to_bytes(&g), bytes);
    }

    #[test]
    fn header_and_threshold_position() {
        let f = sample();
        let bytes = to_bytes(&f);
        assert_eq!(&bytes[..4], b"SPKF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let tail = &bytes[bytes.len() - (4 + 9 + 4 + 8)..];
        assert_eq!(u32::from_le_bytes(tail[..4].try_into().unwrap()), 9);
        assert_eq!(&tail[4..13], b"threshold");
        assert_eq!(u32::from_le_bytes(tail[13..17].try_into().unwrap()), 0);
        assert_eq!(f64::from_le_bytes(tail[17..].try_into().unwrap()), 0.7);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes(&sample());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        assert!(from_bytes(&bytes[..8]).is_err());
    }
}
