use std::sync::Arc;

use crate::error::{Error, Result};
use crate::voxel::{ActiveSet, VoxelCoord};

/// Gather/scatter plan for one sparse convolution. `pairs[k]` lists
/// `(input row, output row)` for kernel offset `k`, ordered by output row.
#[derive(Clone, Debug, PartialEq)]
pub struct Rulebook {
    pub kernel: [u32; 3],
    pub stride: [u32; 3],
    pub n_in: usize,
    pub n_out: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn volume(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

fn volume(kernel: [u32; 3]) -> usize {
    kernel.iter().map(|&k| k as usize).product()
}

/// Offsets are enumerated x-major, z fastest.
fn offset_index(d: [i32; 3], kernel: [u32; 3]) -> usize {
    ((d[0] as usize * kernel[1] as usize) + d[1] as usize) * kernel[2] as usize + d[2] as usize
}

/// Submanifold convolution: outputs sit exactly on the input sites.
/// Offset `k` covers displacement `d - (K - 1) / 2` per axis.
pub fn submanifold(input: &ActiveSet, kernel: [u32; 3]) -> Result<(Rulebook, Arc<ActiveSet>)> {
    if kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
        return Err(Error::Config(format!("submanifold kernel must be odd per axis, got {kernel:?}")));
    }
    let half = kernel.map(|k| (k as i32 - 1) / 2);
    let mut pairs = vec![Vec::new(); volume(kernel)];
    for (o, c) in input.iter().enumerate() {
        for dx in 0..kernel[0] as i32 {
            for dy in 0..kernel[1] as i32 {
                for dz in 0..kernel[2] as i32 {
                    let src = c.offset([dx - half[0], dy - half[1], dz - half[2]]);
                    if let Some(i) = input.row_of(src) {
                        pairs[offset_index([dx, dy, dz], kernel)].push((i as u32, o as u32));
                    }
                }
            }
        }
    }
    let n = input.len();
    let rb = Rulebook { kernel, stride: [1, 1, 1], n_in: n, n_out: n, pairs };
    Ok((rb, Arc::new(input.clone())))
}

/// Strided convolution producing `{ floor(c / stride) }`. Output `o` reads
/// input `o * stride - pad + d` for `d` in `[0, kernel)`, with
/// `pad = (kernel - stride) / 2`.
pub fn strided(input: &ActiveSet, kernel: [u32; 3], stride: [u32; 3]) -> Result<(Rulebook, Arc<ActiveSet>)> {
    for a in 0..3 {
        if stride[a] == 0 || kernel[a] < stride[a] || (kernel[a] - stride[a]) % 2 != 0 {
            return Err(Error::Config(format!(
                "strided kernel {kernel:?} incompatible with stride {stride:?} (need kernel >= stride, same parity)"
            )));
        }
    }
    let out = Arc::new(ActiveSet::from_iter_dedup(input.level() + 1, input.iter().map(|c| c.parent(stride))));
    let pad = [0, 1, 2].map(|a| ((kernel[a] - stride[a]) / 2) as i32);
    let s = stride.map(|v| v as i32);
    let mut pairs = vec![Vec::new(); volume(kernel)];
    for (o, c) in out.iter().enumerate() {
        let base = VoxelCoord::new(c.ix * s[0] - pad[0], c.iy * s[1] - pad[1], c.iz * s[2] - pad[2]);
        for dx in 0..kernel[0] as i32 {
            for dy in 0..kernel[1] as i32 {
                for dz in 0..kernel[2] as i32 {
                    if let Some(i) = input.row_of(base.offset([dx, dy, dz])) {
                        pairs[offset_index([dx, dy, dz], kernel)].push((i as u32, o as u32));
                    }
                }
            }
        }
    }
    let rb = Rulebook { kernel, stride, n_in: input.len(), n_out: out.len(), pairs };
    Ok((rb, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_submanifold_uses_center_only() {
        let set = ActiveSet::new(1, vec![VoxelCoord::new(3, 3, 3)]).unwrap();
        let (rb, out) = submanifold(&set, [3, 3, 3]).unwrap();
        assert_eq!(*out, set);
        assert_eq!(rb.num_pairs(), 1);
        assert_eq!(rb.pairs[13], vec![(0, 0)]);
    }

    #[test]
    fn eight_children_pool_to_one() {
        let coords = (0..8).map(|i| VoxelCoord::new(2 + (i >> 2), 4 + ((i >> 1) & 1), i & 1)).collect();
        let set = ActiveSet::new(1, coords).unwrap();
        let (rb, out) = strided(&set, [2, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(out.coords(), &[VoxelCoord::new(1, 2, 0)]);
        assert_eq!(rb.num_pairs(), 8);
        assert!(rb.pairs.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn rejects_bad_kernels() {
        let set = ActiveSet::empty(1);
        assert!(submanifold(&set, [2, 3, 3]).is_err());
        assert!(strided(&set, [2, 2, 4], [2, 2, 5]).is_err());
        assert!(strided(&set, [2, 2, 2], [1, 1, 1]).is_err());
        assert!(strided(&set, [3, 3, 5], [1, 1, 5]).is_ok());
    }
}
