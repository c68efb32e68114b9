//! On-disk formats for cubes (`HSC1`) and change maps (`CM01`).
//!
//! HSC1: magic `HSC1`, little-endian `u32` bands, rows, cols, then
//! `bands*rows*cols` little-endian `f32` values, band-sequential.
//!
//! CM01: magic `CM01`, little-endian `u32` rows, cols, then `rows*cols` bytes
//! each 0 or 1.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BinaryMap, HyperImage};

pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
pub const MAP_MAGIC: &[u8; 4] = b"CM01";

pub fn encode_cube(img: &HyperImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.shape().len());
    out.extend_from_slice(CUBE_MAGIC);
    for d in [img.bands(), img.rows(), img.cols()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_cube(bytes: &[u8], path: &Path) -> Result<HyperImage> {
    if bytes.len() < 16 || &bytes[..4] != CUBE_MAGIC {
        return Err(format_err(path, "missing HSC1 header"));
    }
    let (bands, rows, cols) = (
        read_u32(bytes, 4) as usize,
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
    );
    let n = bands * rows * cols;
    if bytes.len() != 16 + 4 * n {
        return Err(format_err(
            path,
            format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    HyperImage::from_vec(bands, rows, cols, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn encode_map(map: &BinaryMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + map.len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(map.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(map.cols() as u32).to_le_bytes());
    out.extend_from_slice(map.data());
    out
}

pub fn decode_map(bytes: &[u8], path: &Path) -> Result<BinaryMap> {
    if bytes.len() < 12 || &bytes[..4] != MAP_MAGIC {
        return Err(format_err(path, "missing CM01 header"));
    }
    let rows = read_u32(bytes, 4) as usize;
    let cols = read_u32(bytes, 8) as usize;
    if bytes.len() != 12 + rows * cols {
        return Err(format_err(path, "truncated or oversized CM01 payload"));
    }
    BinaryMap::from_vec(rows, cols, bytes[12..].to_vec()).map_err(|e| format_err(path, e.to_string()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperImage> {
    let path = path.as_ref();
    decode_cube(&read_bytes(path)?, path)
}

pub fn write_cube(path: impl AsRef<Path>, img: &HyperImage) -> Result<()> {
    write_bytes(path.as_ref(), &encode_cube(img))
}

pub fn read_map(path: impl AsRef<Path>) -> Result<BinaryMap> {
    let path = path.as_ref();
    decode_map(&read_bytes(path)?, path)
}

pub fn write_map(path: impl AsRef<Path>, map: &BinaryMap) -> Result<()> {
    write_bytes(path.as_ref(), &encode_map(map))
}
