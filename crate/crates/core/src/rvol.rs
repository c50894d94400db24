//! The RVOL single-file volume format.
//!
//! Little-endian layout:
//!
//! | field         | type      | bytes |
//! |---------------|-----------|-------|
//! | magic `RVL1`  | [u8; 4]   | 4     |
//! | version (= 1) | u32       | 4     |
//! | d, h, w       | u32 × 3   | 12    |
//! | sz, sy, sx    | f32 × 3   | 12    |
//! | dtype         | u8        | 1     |
//! | value space   | u8        | 1     |
//! | payload       | d·h·w elements, z-major |
//!
//! dtype 0 is f32 voxels, dtype 1 is a one-byte-per-voxel mask in {0, 1}.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Mask, Spacing, ValueSpace, Volume};

pub const MAGIC: &[u8; 4] = b"RVL1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 34;

const DTYPE_F32: u8 = 0;
const DTYPE_MASK: u8 = 1;

struct Header {
    dims: Dims,
    spacing: Spacing,
    dtype: u8,
    value_space: u8,
}

fn encode_header(h: &Header, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for &d in &h.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &h.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(h.dtype);
    out.push(h.value_space);
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = le_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dims = [
        le_u32(&bytes[8..12]) as usize,
        le_u32(&bytes[12..16]) as usize,
        le_u32(&bytes[16..20]) as usize,
    ];
    if dims.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {dims:?}")));
    }
    let spacing = [le_f32(&bytes[20..24]), le_f32(&bytes[24..28]), le_f32(&bytes[28..32])];
    Ok(Header {
        dims,
        spacing,
        dtype: bytes[32],
        value_space: bytes[33],
    })
}

fn expect_payload(bytes: &[u8], elements: usize, width: usize) -> Result<&[u8]> {
    let expected = HEADER_LEN + elements * width;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[HEADER_LEN..])
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.voxels().len());
    encode_header(
        &Header {
            dims: v.dims(),
            spacing: v.spacing(),
            dtype: DTYPE_F32,
            value_space: v.value_space().code(),
        },
        &mut out,
    );
    for &x in v.voxels() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let h = decode_header(bytes)?;
    if h.dtype != DTYPE_F32 {
        return Err(Error::Format(format!("expected f32 dtype 0, found dtype {}", h.dtype)));
    }
    let space = ValueSpace::from_code(h.value_space)
        .ok_or_else(|| Error::Format(format!("unknown value space {}", h.value_space)))?;
    let payload = expect_payload(bytes, voxel_count(h.dims), 4)?;
    let voxels = payload.chunks_exact(4).map(le_f32).collect();
    Volume::new(h.dims, h.spacing, voxels, space)
}

pub fn encode_mask(m: &Mask, spacing: Spacing) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.bits().len());
    encode_header(
        &Header {
            dims: m.dims(),
            spacing,
            dtype: DTYPE_MASK,
            value_space: 0,
        },
        &mut out,
    );
    out.extend(m.bits().iter().map(|&b| b as u8));
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<(Mask, Spacing)> {
    let h = decode_header(bytes)?;
    if h.dtype != DTYPE_MASK {
        return Err(Error::Format(format!("expected mask dtype 1, found dtype {}", h.dtype)));
    }
    let payload = expect_payload(bytes, voxel_count(h.dims), 1)?;
    let mut bits = Vec::with_capacity(payload.len());
    for (i, &b) in payload.iter().enumerate() {
        match b {
            0 => bits.push(false),
            1 => bits.push(true),
            other => return Err(Error::Format(format!("mask byte {other} at voxel {i}"))),
        }
    }
    Ok((Mask::new(h.dims, bits)?, h.spacing))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(v)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<(Mask, Spacing)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}

pub fn write_mask(m: &Mask, spacing: Spacing, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(m, spacing)).map_err(|e| Error::io(path, e))
}
