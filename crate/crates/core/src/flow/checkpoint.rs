//! `RFLW` checkpoint files.
//!
//! Little-endian: magic `RFLW`, version u32, the [`FlowConfig`] fields
//! (levels, flows_per_level, patch_edge, in_channels, coupling_hidden as u32,
//! scale_clamp as f64), then a tensor table: count u32 and per tensor a u16
//! name length, the UTF-8 name, a u8 rank, u32 dims and f32 data.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::model::{FlowConfig, FlowModel};
use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"RFLW";
pub const VERSION: u32 = 1;

struct Entry {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Real>(model: &FlowModel<T>) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.levels,
        cfg.flows_per_level,
        cfg.patch_edge,
        cfg.in_channels,
        cfg.coupling_hidden,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.scale_clamp.to_le_bytes());

    let mut body = Vec::new();
    let mut count = 0u32;
    model.params.visit(&mut |name, dims, values| {
        push_tensor(&mut body, name, dims, values.iter().map(|v| v.f64() as f32));
        count += 1;
    });
    for (l, steps) in model.params.levels.iter().enumerate() {
        for (k, s) in steps.iter().enumerate() {
            let c = s.invconv.channels();
            let p = format!("l{l}.f{k}.invconv");
            push_tensor(
                &mut body,
                &format!("{p}.perm"),
                &[c],
                s.invconv.perm.iter().map(|&v| v as f32),
            );
            push_tensor(
                &mut body,
                &format!("{p}.sign"),
                &[c],
                s.invconv.sign.iter().map(|v| v.f64() as f32),
            );
            count += 2;
        }
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<FlowModel<T>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an RFLW checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut fields = [0usize; 5];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let config = FlowConfig {
        levels: fields[0],
        flows_per_level: fields[1],
        patch_edge: fields[2],
        in_channels: fields[3],
        coupling_hidden: fields[4],
        scale_clamp: r.f64()?,
    };
    config.validate()?;

    let count = r.u32()? as usize;
    let mut table = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r
            .take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if table.insert(name.clone(), Entry { dims, data }).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Length {
            expected: r.at,
            found: bytes.len(),
        });
    }

    let mut model = FlowModel::<T>::identity(config)?;
    let mut missing = |name: &str, dims: &[usize]| -> Result<Vec<f32>> {
        let e = table
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if e.dims != dims {
            return Err(Error::Structure(format!(
                "tensor {name} has shape {:?}, config expects {dims:?}",
                e.dims
            )));
        }
        Ok(e.data)
    };
    let mut shapes = Vec::new();
    model
        .params
        .visit(&mut |name, dims, _| shapes.push((name.to_string(), dims.to_vec())));
    let mut loaded = Vec::with_capacity(shapes.len());
    for (name, dims) in &shapes {
        loaded.push(missing(name, dims)?);
    }
    let mut it = loaded.into_iter();
    model.params.for_each_trainable_mut(|_, v| {
        let src = it.next().expect("one tensor per slot");
        for (d, s) in v.iter_mut().zip(src) {
            *d = T::of(s as f64);
        }
    });
    for (l, steps) in model.params.levels.iter_mut().enumerate() {
        for (k, s) in steps.iter_mut().enumerate() {
            let c = s.invconv.channels();
            let p = format!("l{l}.f{k}.invconv");
            let perm = missing(&format!("{p}.perm"), &[c])?;
            let mut seen = vec![false; c];
            for (dst, &v) in s.invconv.perm.iter_mut().zip(&perm) {
                let i = v as usize;
                if v.fract() != 0.0 || v < 0.0 || i >= c || seen[i] {
                    return Err(Error::Format(format!("{p}.perm is not a permutation")));
                }
                seen[i] = true;
                *dst = i;
            }
            let sign = missing(&format!("{p}.sign"), &[c])?;
            if sign.iter().any(|v| v.abs() != 1.0) {
                return Err(Error::Format(format!("{p}.sign entries must be ±1")));
            }
            s.invconv.sign = sign.into_iter().map(|v| T::of(v as f64)).collect();
        }
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// partial checkpoint at `path`.
pub fn save_checkpoint<T: Real>(path: &Path, model: &FlowModel<T>) -> Result<()> {
    let bytes = encode_checkpoint(model);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<FlowModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> FlowConfig {
        FlowConfig {
            levels: 2,
            flows_per_level: 1,
            patch_edge: 4,
            in_channels: 1,
            coupling_hidden: 3,
            scale_clamp: 2.0,
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let m = FlowModel::<f32>::random(cfg(), 9, 1.0).unwrap();
        let back: FlowModel<f32> = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_and_padded_files_rejected() {
        let bytes = encode_checkpoint(&FlowModel::<f64>::random(cfg(), 1, 1.0).unwrap());
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint::<f64>(&long), Err(Error::Length { .. })));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn config_shape_mismatch_rejected() {
        let mut bytes = encode_checkpoint(&FlowModel::<f64>::random(cfg(), 1, 1.0).unwrap());
        // coupling_hidden field lives at offset 24
        bytes[24..28].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Structure(_))));
    }
}
