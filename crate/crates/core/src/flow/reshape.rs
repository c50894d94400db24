//! Volume-preserving reshapes: 2×2×2 squeeze and channel-halving split.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Folds every 2×2×2 block into channels. Output channel `8c + 4dz + 2dy + dx`
/// holds input channel `c` at block offset `(dz, dy, dx)`.
pub fn squeeze<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [d, h, w] = x.spatial();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Structure(format!(
            "squeeze needs even spatial dims, got {:?}",
            x.spatial()
        )));
    }
    let c = x.channels();
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros(8 * c, [od, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for z in 0..d {
        for y in 0..h {
            for xx in 0..w {
                let off = (z % 2) * 4 + (y % 2) * 2 + xx % 2;
                let ov = ((z / 2) * oh + y / 2) * ow + xx / 2;
                let iv = (z * h + y) * w + xx;
                for ch in 0..c {
                    dst[ov * 8 * c + ch * 8 + off] = src[iv * c + ch];
                }
            }
        }
    }
    Ok(out)
}

pub fn unsqueeze<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.channels().is_multiple_of(8) {
        return Err(Error::Structure(format!(
            "unsqueeze needs channels divisible by 8, got {}",
            x.channels()
        )));
    }
    let c = x.channels() / 8;
    let [od, oh, ow] = x.spatial();
    let (d, h, w) = (od * 2, oh * 2, ow * 2);
    let mut out = Tensor::zeros(c, [d, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for z in 0..d {
        for y in 0..h {
            for xx in 0..w {
                let off = (z % 2) * 4 + (y % 2) * 2 + xx % 2;
                let ov = ((z / 2) * oh + y / 2) * ow + xx / 2;
                let iv = (z * h + y) * w + xx;
                for ch in 0..c {
                    dst[iv * c + ch] = src[ov * 8 * c + ch * 8 + off];
                }
            }
        }
    }
    Ok(out)
}

/// Splits channels into (kept, emitted) halves.
pub fn split<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.channels();
    if !c.is_multiple_of(2) {
        return Err(Error::Structure(format!("split needs an even channel count, got {c}")));
    }
    Ok((x.channel_range(0, c / 2), x.channel_range(c / 2, c)))
}
