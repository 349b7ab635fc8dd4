use serde::{Deserialize, Serialize};

use super::VoxelCoord;
use crate::error::{Error, Result};

/// Level-1 voxel grid plus the per-transition pooling kernels that define
/// every coarser level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Meters per voxel along x, y, z at level 1.
    pub voxel_size: [f64; 3],
    /// World position of the low corner of voxel (0, 0, 0).
    pub origin: [f64; 3],
    /// Level-1 voxel counts per axis.
    pub extent: [u32; 3],
    /// Stride from level i to level i+1.
    pub kernels: Vec<[u32; 3]>,
}

pub const DEFAULT_KERNELS: [[u32; 3]; 4] = [[2, 2, 2], [2, 2, 2], [2, 2, 2], [1, 1, 5]];

impl Default for GridConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GridConfig {
    /// 12.8 m x 12.8 m x 3.2 m around the sensor.
    pub fn desk() -> Self {
        Self {
            voxel_size: [0.1, 0.1, 0.2],
            origin: [-6.4, -6.4, -2.0],
            extent: [128, 128, 16],
            kernels: DEFAULT_KERNELS.to_vec(),
        }
    }

    /// Full-size nuScenes-style grid, `[1024, 1024, 40]` voxels.
    pub fn full() -> Self {
        Self {
            voxel_size: [0.1, 0.1, 0.2],
            origin: [-51.2, -51.2, -5.0],
            extent: [1024, 1024, 40],
            kernels: DEFAULT_KERNELS.to_vec(),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.kernels.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("voxel size must be positive, got {:?}", self.voxel_size)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        if self.extent.iter().any(|&e| e == 0 || e > (i32::MAX as u32)) {
            return Err(Error::Config(format!("grid extent must be positive, got {:?}", self.extent)));
        }
        if self.kernels.iter().flatten().any(|&k| k == 0) {
            return Err(Error::Config("pooling kernels must be >= 1".into()));
        }
        Ok(())
    }

    /// Grid geometry at `level` (1-based). Extents are derived from the
    /// kernel list by ceiling division.
    pub fn level(&self, level: usize) -> LevelGrid {
        assert!((1..=self.num_levels()).contains(&level), "level {level} out of range");
        let mut voxel_size = self.voxel_size;
        let mut extent = self.extent;
        for k in &self.kernels[..level - 1] {
            for a in 0..3 {
                voxel_size[a] *= k[a] as f64;
                extent[a] = extent[a].div_ceil(k[a]);
            }
        }
        LevelGrid {
            level,
            voxel_size,
            origin: self.origin,
            extent,
        }
    }

    pub fn levels(&self) -> Vec<LevelGrid> {
        (1..=self.num_levels()).map(|l| self.level(l)).collect()
    }

    /// Kernel used when going from `level` to `level + 1`.
    pub fn kernel(&self, level: usize) -> [u32; 3] {
        self.kernels[level - 1]
    }

    /// Physical bounds (low, high) of the level-1 grid.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let hi = std::array::from_fn(|a| self.origin[a] + self.voxel_size[a] * self.extent[a] as f64);
        (self.origin, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGrid {
    pub level: usize,
    pub voxel_size: [f64; 3],
    pub origin: [f64; 3],
    pub extent: [u32; 3],
}

impl LevelGrid {
    /// Unbounded voxel index of a point (floor semantics: a point on a
    /// boundary belongs to the higher-index voxel).
    pub fn coord_unbounded(&self, p: [f64; 3]) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.voxel_size[a]).floor() as i64)
    }

    pub fn coord_of(&self, p: [f64; 3]) -> Option<VoxelCoord> {
        let c = self.coord_unbounded(p);
        let inside = (0..3).all(|a| c[a] >= 0 && c[a] < self.extent[a] as i64);
        inside.then(|| VoxelCoord::new(c[0] as i32, c[1] as i32, c[2] as i32))
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        c.to_array()
            .iter()
            .zip(self.extent)
            .all(|(&v, e)| v >= 0 && (v as i64) < e as i64)
    }

    pub fn center(&self, c: VoxelCoord) -> [f64; 3] {
        let c = c.to_array();
        std::array::from_fn(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.voxel_size[a])
    }

    pub fn num_cells(&self) -> u64 {
        self.extent.iter().map(|&e| e as u64).product()
    }
}
