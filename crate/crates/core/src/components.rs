//! Connected-component labelling and small morphology helpers on masks.

use std::collections::VecDeque;

use crate::volume::{linear_index, Dims, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// 1-based label as stored in [`Labels::labels`].
    pub label: u32,
    pub voxels: usize,
    /// Lowest and highest voxel coordinate per axis.
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl Component {
    /// True when the bounding box reaches both faces on every axis.
    pub fn touches_all_faces(&self, dims: Dims) -> bool {
        (0..3).all(|a| self.min[a] == 0 && self.max[a] == dims[a] - 1)
    }
}

#[derive(Clone, Debug)]
pub struct Labels {
    pub dims: Dims,
    /// 0 for background, otherwise the component label.
    pub labels: Vec<u32>,
    /// Components in order of discovery (raster order of their first voxel).
    pub components: Vec<Component>,
}

impl Labels {
    /// Mask holding the components for which `keep` returns true.
    pub fn select(&self, mut keep: impl FnMut(&Component) -> bool) -> Mask {
        let kept: Vec<bool> = std::iter::once(false)
            .chain(self.components.iter().map(&mut keep))
            .collect();
        let bits = self.labels.iter().map(|&l| kept[l as usize]).collect();
        Mask::new(self.dims, bits).expect("label grid matches dims")
    }
}

fn neighbours26() -> Vec<[isize; 3]> {
    let mut out = Vec::with_capacity(26);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dz, dy, dx) != (0, 0, 0) {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

/// Labels the 26-connected components of `mask` by breadth-first flood fill.
pub fn label_components(mask: &Mask) -> Labels {
    let dims = mask.dims();
    let mut labels = vec![0u32; mask.bits().len()];
    let mut components = Vec::new();
    let offsets = neighbours26();
    let mut queue = VecDeque::new();

    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let start = linear_index(dims, z, y, x);
                if !mask.bits()[start] || labels[start] != 0 {
                    continue;
                }
                let label = components.len() as u32 + 1;
                let mut comp = Component {
                    label,
                    voxels: 0,
                    min: [z, y, x],
                    max: [z, y, x],
                };
                labels[start] = label;
                queue.push_back([z, y, x]);
                while let Some(p) = queue.pop_front() {
                    comp.voxels += 1;
                    for a in 0..3 {
                        comp.min[a] = comp.min[a].min(p[a]);
                        comp.max[a] = comp.max[a].max(p[a]);
                    }
                    for off in &offsets {
                        let nz = p[0] as isize + off[0];
                        let ny = p[1] as isize + off[1];
                        let nx = p[2] as isize + off[2];
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= dims[0] as isize
                            || ny >= dims[1] as isize
                            || nx >= dims[2] as isize
                        {
                            continue;
                        }
                        let n = [nz as usize, ny as usize, nx as usize];
                        let ni = linear_index(dims, n[0], n[1], n[2]);
                        if mask.bits()[ni] && labels[ni] == 0 {
                            labels[ni] = label;
                            queue.push_back(n);
                        }
                    }
                }
                components.push(comp);
            }
        }
    }
    Labels {
        dims,
        labels,
        components,
    }
}

const CROSS: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn shifted(dims: Dims, p: [usize; 3], off: [isize; 3]) -> Option<usize> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + off[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(linear_index(dims, q[0], q[1], q[2]))
}

/// Dilation by the radius-1 ball (centre plus its six face neighbours).
pub fn dilate_ball1(mask: &Mask) -> Mask {
    let dims = mask.dims();
    let mut out = mask.clone();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if !mask.get(z, y, x) {
                    continue;
                }
                for off in CROSS {
                    if let Some(i) = shifted(dims, [z, y, x], off) {
                        out.bits_mut()[i] = true;
                    }
                }
            }
        }
    }
    out
}

/// Erosion by the radius-1 ball. Out-of-volume neighbours do not erode.
pub fn erode_ball1(mask: &Mask) -> Mask {
    let dims = mask.dims();
    let mut out = mask.clone();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if !mask.get(z, y, x) {
                    continue;
                }
                let hit = CROSS
                    .iter()
                    .any(|&off| matches!(shifted(dims, [z, y, x], off), Some(i) if !mask.bits()[i]));
                if hit {
                    out.set(z, y, x, false);
                }
            }
        }
    }
    out
}

pub fn close_ball1(mask: &Mask) -> Mask {
    erode_ball1(&dilate_ball1(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_voxels_are_one_component() {
        let mut m = Mask::empty([3, 3, 3]);
        m.set(0, 0, 0, true);
        m.set(1, 1, 1, true);
        m.set(2, 2, 2, true);
        let l = label_components(&m);
        assert_eq!(l.components.len(), 1);
        assert_eq!(l.components[0].voxels, 3);
        assert!(l.components[0].touches_all_faces([3, 3, 3]));
    }

    #[test]
    fn separated_voxels_are_distinct() {
        let mut m = Mask::empty([1, 1, 5]);
        m.set(0, 0, 0, true);
        m.set(0, 0, 2, true);
        m.set(0, 0, 3, true);
        let l = label_components(&m);
        let sizes: Vec<_> = l.components.iter().map(|c| c.voxels).collect();
        assert_eq!(sizes, vec![1, 2]);
        let big = l.select(|c| c.voxels > 1);
        assert_eq!(big.count(), 2);
        assert!(!big.get(0, 0, 0));
    }

    #[test]
    fn closing_fills_single_voxel_hole() {
        let mut m = Mask::full([5, 5, 5]);
        m.set(2, 2, 2, false);
        let closed = close_ball1(&m);
        assert!(closed.get(2, 2, 2));
        assert_eq!(closed.count(), 125);
    }

    #[test]
    fn closing_is_extensive_on_solid_block() {
        let mut m = Mask::empty([8, 8, 8]);
        for z in 2..6 {
            for y in 2..6 {
                for x in 2..6 {
                    m.set(z, y, x, true);
                }
            }
        }
        assert_eq!(close_ball1(&m), m);
    }
}
