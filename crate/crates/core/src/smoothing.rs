//! Separable Gaussian smoothing with border renormalisation.

use crate::volume::{linear_index, Dims};

/// Unnormalised Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Smooths one line in place. Only in-bounds taps contribute and their
/// weights are renormalised to sum to one. The result is accumulated as
/// `centre + Σ w·(v − centre) / Σ w`, which is the same weighted mean but
/// leaves a constant line bit-identical.
pub fn smooth_line(line: &mut [f64], taps: &[f64], scratch: &mut Vec<f64>) {
    let r = (taps.len() / 2) as isize;
    let n = line.len() as isize;
    scratch.clear();
    scratch.extend_from_slice(line);
    for i in 0..n {
        let centre = scratch[i as usize];
        let lo = (i - r).max(0);
        let hi = (i + r).min(n - 1);
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for j in lo..=hi {
            let w = taps[(j - i + r) as usize];
            wsum += w;
            acc += w * (scratch[j as usize] - centre);
        }
        line[i as usize] = centre + acc / wsum;
    }
}

/// Smooths a z-major volume along all three axes. `sigma <= 0` is a no-op.
pub fn smooth_volume(values: &mut [f64], dims: Dims, sigma: f64) {
    if !(sigma > 0.0) {
        return;
    }
    let taps = gaussian_taps(sigma);
    let mut line = Vec::new();
    let mut scratch = Vec::new();
    for axis in 0..3 {
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for u in 0..dims[others[0]] {
            for v in 0..dims[others[1]] {
                let index = |t: usize| {
                    let mut p = [0usize; 3];
                    p[axis] = t;
                    p[others[0]] = u;
                    p[others[1]] = v;
                    linear_index(dims, p[0], p[1], p[2])
                };
                line.clear();
                line.extend((0..dims[axis]).map(|t| values[index(t)]));
                smooth_line(&mut line, &taps, &mut scratch);
                for (t, &val) in line.iter().enumerate() {
                    values[index(t)] = val;
                }
            }
        }
    }
}
