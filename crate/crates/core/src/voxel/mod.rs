//! Sparse voxel tensors and the coordinate algebra shared by the encoder,
//! the decoder and ground-truth generation.

mod grid;
pub mod ndjson;
mod ops;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use grid::{GridConfig, LevelGrid, DEFAULT_KERNELS};
pub use ops::{
    align_union, expand_children, max_pool_occupancy, occupancy, points_above_threshold, voxel_centers, voxelize,
    Children, Union, Voxelized,
};

use crate::autodiff::DenseArray;
use crate::error::{Error, Result};

/// Integer grid index. Ordering is lexicographic over (ix, iy, iz).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelCoord {
    pub const fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    pub fn to_array(self) -> [i32; 3] {
        [self.ix, self.iy, self.iz]
    }

    pub fn from_array(a: [i32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Floor division by a per-axis stride.
    pub fn parent(self, kernel: [u32; 3]) -> Self {
        Self::new(
            self.ix.div_euclid(kernel[0] as i32),
            self.iy.div_euclid(kernel[1] as i32),
            self.iz.div_euclid(kernel[2] as i32),
        )
    }

    pub fn offset(self, d: [i32; 3]) -> Self {
        Self::new(self.ix + d[0], self.iy + d[1], self.iz + d[2])
    }
}

/// Sorted, duplicate-free set of active coordinates at one level, with a
/// coordinate-to-row lookup. Row `r` is the `r`-th coordinate in
/// lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSet {
    level: usize,
    coords: Vec<VoxelCoord>,
    index: HashMap<VoxelCoord, usize>,
}

impl ActiveSet {
    pub fn empty(level: usize) -> Self {
        Self {
            level,
            coords: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Builds a set from coordinates in any order; duplicates are an error.
    pub fn new(level: usize, mut coords: Vec<VoxelCoord>) -> Result<Self> {
        coords.sort_unstable();
        if let Some(w) = coords.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateCoordinate(w[0].to_array()));
        }
        let index = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self { level, coords, index })
    }

    /// Builds a set, silently merging duplicates.
    pub fn from_iter_dedup(level: usize, coords: impl IntoIterator<Item = VoxelCoord>) -> Self {
        let mut v: Vec<VoxelCoord> = coords.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self::new(level, v).expect("deduplicated")
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn row_of(&self, c: VoxelCoord) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        self.index.contains_key(&c)
    }

    pub fn iter(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        self.coords.iter().copied()
    }

    /// Coordinates present in both sets, as a new set at this level.
    pub fn intersection(&self, other: &ActiveSet) -> ActiveSet {
        let coords = self.coords.iter().copied().filter(|c| other.contains(*c)).collect();
        Self::new(self.level, coords).expect("subset of a set")
    }
}

/// Active coordinates with a `[num_active, channels]` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelTensor {
    pub set: Arc<ActiveSet>,
    pub features: DenseArray,
}

impl SparseVoxelTensor {
    pub fn new(set: Arc<ActiveSet>, features: DenseArray) -> Result<Self> {
        if features.rank() != 2 || features.dims()[0] != set.len() {
            return Err(Error::shape(
                "SparseVoxelTensor",
                format!("[{}, c]", set.len()),
                format!("{:?}", features.dims()),
            ));
        }
        Ok(Self { set, features })
    }

    pub fn empty(level: usize, channels: usize) -> Self {
        Self {
            set: Arc::new(ActiveSet::empty(level)),
            features: DenseArray::zeros(&[0, channels]),
        }
    }

    pub fn level(&self) -> usize {
        self.set.level()
    }

    pub fn channels(&self) -> usize {
        self.features.last_dim()
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn feature(&self, c: VoxelCoord) -> Option<&[f64]> {
        self.set.row_of(c).map(|r| self.features.row(r))
    }
}

/// Binary occupancy per level; `levels[0]` is level 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ExistencePyramid {
    pub levels: Vec<ActiveSet>,
}

impl ExistencePyramid {
    pub fn level(&self, level: usize) -> &ActiveSet {
        &self.levels[level - 1]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Existence scores for generated voxels at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredVoxels {
    pub level: usize,
    pub coords: Vec<VoxelCoord>,
    pub scores: Vec<f64>,
}
