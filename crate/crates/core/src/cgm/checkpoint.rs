//! Single-file model container:
//!
//! ```text
//! magic "FASGENCK" | u32 version | u32 len + TOML header
//! u32 count | count × array
//! array = u16 len + name | u8 dtype (0 f64, 1 f32) | u8 rank | rank × u32 dim | data
//! ```
//!
//! All integers and floats are little-endian. Normalization arrays come
//! first (`norm.*`), followed by the weights in layout order.

use std::path::Path;

use fasgen_neural::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use super::model::CgmFasModel;
use super::{ArchConfig, Normalization};
use crate::geo::{GeoPoint, LocalFrame};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FASGENCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 16;
const MAX_NAME: usize = 256;
const MAX_RANK: usize = 4;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    /// Decimal string so the full `u64` range survives TOML.
    seed: String,
    alpha: f64,
    arch: ArchConfig,
}

#[derive(Clone, Copy, PartialEq)]
enum Dtype {
    F64 = 0,
    F32 = 1,
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], dtype: Dtype, write: impl FnOnce(&mut Vec<u8>)) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for d in shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    write(out);
}

fn put_f64(out: &mut Vec<u8>, name: &str, v: &[f64]) {
    put_array(out, name, &[v.len()], Dtype::F64, |o| v.iter().for_each(|x| o.extend_from_slice(&x.to_le_bytes())));
}

fn put_f32(out: &mut Vec<u8>, name: &str, shape: &[usize], v: &[f32]) {
    put_array(out, name, shape, Dtype::F32, |o| v.iter().for_each(|x| o.extend_from_slice(&x.to_le_bytes())));
}

/// Serializes weights, architecture and normalization constants.
pub fn write_checkpoint(model: &CgmFasModel) -> Vec<u8> {
    let header = toml::to_string(&Header {
        seed: model.seed.to_string(),
        alpha: model.alpha,
        arch: model.arch,
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&((4 + model.params.len()) as u32).to_le_bytes());
    let n = &model.norm;
    let f = &n.frame;
    put_f64(&mut out, "norm.frame", &[f.origin.lat, f.origin.lon, f.origin.depth, f.km_per_deg_lat, f.km_per_deg_lon]);
    put_f64(
        &mut out,
        "norm.box",
        &[n.x_range[0], n.x_range[1], n.y_range[0], n.y_range[1], n.depth_range[0], n.depth_range[1]],
    );
    put_f64(&mut out, "norm.freqs", &n.freqs);
    let stacked: Vec<f32> = n.dws_mean.iter().chain(&n.dws_scale).copied().collect();
    put_f32(&mut out, "norm.dws", &[2, n.dws_mean.len()], &stacked);
    for (name, t) in model.params.iter() {
        put_f32(&mut out, name, t.shape(), t.data());
    }
    out
}

pub fn save_checkpoint(model: &CgmFasModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CgmFasModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

enum Array {
    F64(Vec<f64>),
    F32(Tensor),
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

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn array(&mut self) -> Result<(String, Array)> {
        let len = self.u16("array name length")? as usize;
        if len == 0 || len > MAX_NAME {
            return Err(Error::Checkpoint(format!("bad array name length {len}")));
        }
        let name = std::str::from_utf8(self.take(len, "array name")?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let dtype = match self.u8("dtype")? {
            0 => Dtype::F64,
            1 => Dtype::F32,
            d => return Err(Error::Checkpoint(format!("`{name}`: unknown dtype {d}"))),
        };
        let rank = self.u8("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("`{name}`: unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = self.u32("dimension")? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?;
            shape.push(d);
        }
        let width = if dtype == Dtype::F64 { 8 } else { 4 };
        let bytes = self.take(
            count
                .checked_mul(width)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?,
            &format!("`{name}` data"),
        )?;
        let arr = match dtype {
            Dtype::F64 => {
                if rank != 1 {
                    return Err(Error::Checkpoint(format!("`{name}`: f64 arrays must be rank 1")));
                }
                Array::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
            }
            Dtype::F32 => {
                let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Array::F32(Tensor::new(shape, data)?)
            }
        };
        Ok((name, arr))
    }
}

fn expect_f64(got: (String, Array), name: &str, len: Option<usize>) -> Result<Vec<f64>> {
    match got {
        (n, Array::F64(v)) if n == name && len.map_or(true, |l| l == v.len()) => {
            if v.iter().all(|x| x.is_finite()) {
                Ok(v)
            } else {
                Err(Error::Checkpoint(format!("`{name}` contains non-finite values")))
            }
        }
        (n, _) => Err(Error::Checkpoint(format!("expected `{name}`, found `{n}` or wrong size"))),
    }
}

fn expect_f32(got: (String, Array), name: &str) -> Result<Tensor> {
    match got {
        (n, Array::F32(t)) if n == name => Ok(t),
        (n, _) => Err(Error::Checkpoint(format!("expected f32 array `{name}`, found `{n}`"))),
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<CgmFasModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32("header length")? as usize;
    if hlen > MAX_HEADER {
        return Err(Error::Checkpoint(format!("header length {hlen} exceeds limit")));
    }
    let text = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let seed: u64 = header
        .seed
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad seed `{}`", header.seed)))?;
    if !(header.alpha.is_finite() && header.alpha >= 0.0) {
        return Err(Error::Checkpoint(format!("bad alpha {}", header.alpha)));
    }
    let arch = header.arch;
    arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.u32("array count")? as usize;
    if count < 4 {
        return Err(Error::Checkpoint(format!("expected at least 4 arrays, found {count}")));
    }
    let frame = expect_f64(r.array()?, "norm.frame", Some(5))?;
    let bx = expect_f64(r.array()?, "norm.box", Some(6))?;
    let freqs = expect_f64(r.array()?, "norm.freqs", Some(arch.n_freq))?;
    let dws = expect_f32(r.array()?, "norm.dws")?;
    if dws.shape() != [2, arch.n_freq] {
        return Err(Error::Checkpoint(format!("`norm.dws` has shape {:?}", dws.shape())));
    }
    let mut params = ParamSet::new();
    for _ in 4..count {
        let (name, arr) = r.array()?;
        match arr {
            Array::F32(t) => {
                params.push(name, t);
            }
            Array::F64(_) => return Err(Error::Checkpoint(format!("weight `{name}` must be f32"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let origin = GeoPoint {
        lat: frame[0],
        lon: frame[1],
        depth: frame[2],
    };
    origin.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (mean, scale) = dws.data().split_at(arch.n_freq);
    let norm = Normalization {
        frame: LocalFrame {
            origin,
            km_per_deg_lat: frame[3],
            km_per_deg_lon: frame[4],
        },
        x_range: [bx[0], bx[1]],
        y_range: [bx[2], bx[3]],
        depth_range: [bx[4], bx[5]],
        freqs,
        dws_mean: mean.to_vec(),
        dws_scale: scale.to_vec(),
    };
    CgmFasModel::from_params(arch, norm, header.alpha, seed, params)
}
