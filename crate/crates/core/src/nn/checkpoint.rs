//! `NNW1` checkpoints.
//!
//! Layout (little-endian): magic `NNW1`, `u32` format version (1), `u8` value
//! width in bytes (4 = f32, 8 = f64), `u32` spec length followed by the layer
//! list as JSON, `u32` tensor count, then per tensor `u32` rank, `u32` dims and
//! the values in declaration order.

use std::path::Path;

use super::network::{NetSpec, Network};
use super::params::{NetParams, ParamTensor};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_bytes};

pub const MAGIC: &[u8; 4] = b"NNW1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn encode(net: &Network, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    });
    let spec = serde_json::to_vec(&net.spec).expect("spec serializes");
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(net.params.tensors.len() as u32).to_le_bytes());
    for t in &net.params.tensors {
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            match precision {
                Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: "truncated NNW1 checkpoint".into(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Network> {
    let fmt_err = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut c = Cursor { bytes, at: 0, path };
    if c.take(4)? != MAGIC {
        return Err(fmt_err("missing NNW1 magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported NNW1 version {version}")));
    }
    let width = c.take(1)?[0];
    if width != 4 && width != 8 {
        return Err(fmt_err(format!("unsupported value width {width}")));
    }
    let spec_len = c.u32()? as usize;
    let spec: NetSpec = serde_json::from_slice(c.take(spec_len)?).map_err(|e| fmt_err(format!("bad spec block: {e}")))?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = c.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * width as usize)?;
        let data = if width == 8 {
            raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
        } else {
            raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect()
        };
        tensors.push(ParamTensor::new(shape, data));
    }
    if c.at != bytes.len() {
        return Err(fmt_err("trailing bytes after NNW1 tensors".into()));
    }
    Network::new(spec, NetParams::new(tensors)).map_err(|e| fmt_err(e.to_string()))
}

pub fn save(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    write_bytes(path.as_ref(), &encode(net, Precision::F64))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    decode(&read_bytes(path)?, path)
}
