use std::cmp::Ordering;
use std::sync::Arc;

use super::{ActiveSet, LevelGrid, ScoredVoxels, SparseVoxelTensor, VoxelCoord};
use crate::autodiff::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Voxelized {
    pub tensor: SparseVoxelTensor,
    /// Points that fell outside the grid extent.
    pub dropped: usize,
}

fn check_grid(grid: &LevelGrid) -> Result<()> {
    if grid.voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Invalid(format!("voxel size must be positive, got {:?}", grid.voxel_size)));
    }
    Ok(())
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Averages per-point features into voxels. `features` is row-major
/// `[positions.len(), channels]`.
///
/// Per-voxel sums run over the voxel's points sorted by feature value, so the
/// result does not depend on input order.
pub fn voxelize(positions: &[[f64; 3]], features: &[f64], channels: usize, grid: &LevelGrid) -> Result<Voxelized> {
    check_grid(grid)?;
    if features.len() != positions.len() * channels {
        return Err(Error::shape(
            "voxelize",
            format!("{} feature values", positions.len() * channels),
            features.len(),
        ));
    }
    let row = |i: usize| &features[i * channels..(i + 1) * channels];
    let mut keyed: Vec<(VoxelCoord, usize)> = Vec::with_capacity(positions.len());
    let mut dropped = 0;
    for (i, p) in positions.iter().enumerate() {
        match grid.coord_of(*p) {
            Some(c) => keyed.push((c, i)),
            None => dropped += 1,
        }
    }
    keyed.sort_unstable_by(|a, b| a.0.cmp(&b.0).then_with(|| cmp_rows(row(a.1), row(b.1))));

    let mut coords = Vec::new();
    let mut data = Vec::new();
    let mut start = 0;
    while start < keyed.len() {
        let c = keyed[start].0;
        let end = start + keyed[start..].iter().take_while(|(k, _)| *k == c).count();
        let mut sum = vec![0.0; channels];
        for &(_, i) in &keyed[start..end] {
            sum.iter_mut().zip(row(i)).for_each(|(s, v)| *s += v);
        }
        let n = (end - start) as f64;
        data.extend(sum.into_iter().map(|s| s / n));
        coords.push(c);
        start = end;
    }
    let set = Arc::new(ActiveSet::new(grid.level, coords)?);
    let n = set.len();
    let features = DenseArray::new(vec![n, channels], data)?;
    Ok(Voxelized {
        tensor: SparseVoxelTensor::new(set, features)?,
        dropped,
    })
}

/// Binary voxelization: the set of voxels containing at least one point.
pub fn occupancy(positions: &[[f64; 3]], grid: &LevelGrid) -> Result<(ActiveSet, usize)> {
    check_grid(grid)?;
    let mut dropped = 0;
    let coords: Vec<VoxelCoord> = positions
        .iter()
        .filter_map(|p| {
            let c = grid.coord_of(*p);
            dropped += c.is_none() as usize;
            c
        })
        .collect();
    Ok((ActiveSet::from_iter_dedup(grid.level, coords), dropped))
}

/// Parent occupancy: a parent is occupied iff any child is.
pub fn max_pool_occupancy(occ: &ActiveSet, kernel: [u32; 3]) -> ActiveSet {
    ActiveSet::from_iter_dedup(occ.level() + 1, occ.iter().map(|c| c.parent(kernel)))
}

/// Child coordinates produced by [`expand_children`], in emission order.
#[derive(Clone, Debug, PartialEq)]
pub struct Children {
    pub coords: Vec<VoxelCoord>,
    /// Row of the parent in the parent set.
    pub parent: Vec<usize>,
    /// Lexicographic offset index within the kernel, in `0..S`.
    pub slot: Vec<usize>,
}

impl Children {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Lexicographic offsets `[0, kernel)` per axis, z fastest.
pub(crate) fn kernel_offsets(kernel: [u32; 3]) -> Vec<[i32; 3]> {
    let mut v = Vec::with_capacity((kernel[0] * kernel[1] * kernel[2]) as usize);
    for dx in 0..kernel[0] as i32 {
        for dy in 0..kernel[1] as i32 {
            for dz in 0..kernel[2] as i32 {
                v.push([dx, dy, dz]);
            }
        }
    }
    v
}

/// Splits every parent into `S = prod(kernel)` children, dropping children
/// outside `child_grid`.
pub fn expand_children(parents: &ActiveSet, kernel: [u32; 3], child_grid: &LevelGrid) -> Children {
    let offsets = kernel_offsets(kernel);
    let mut out = Children {
        coords: Vec::with_capacity(parents.len() * offsets.len()),
        parent: Vec::new(),
        slot: Vec::new(),
    };
    let k = kernel.map(|v| v as i32);
    for (row, p) in parents.iter().enumerate() {
        let base = VoxelCoord::new(p.ix * k[0], p.iy * k[1], p.iz * k[2]);
        for (slot, d) in offsets.iter().enumerate() {
            let c = base.offset(*d);
            if child_grid.contains(c) {
                out.coords.push(c);
                out.parent.push(row);
                out.slot.push(slot);
            }
        }
    }
    out
}

/// Union of two active sets with row maps into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Union {
    pub set: ActiveSet,
    /// Union row of each row of `a`.
    pub a_rows: Vec<usize>,
    /// Union row of each row of `b`.
    pub b_rows: Vec<usize>,
    /// For each union row, the row of `a` or `None` (zero-filled).
    pub from_a: Vec<Option<usize>>,
    pub from_b: Vec<Option<usize>>,
}

pub fn align_union(a: &ActiveSet, b: &ActiveSet) -> Result<Union> {
    if a.level() != b.level() {
        return Err(Error::LevelMismatch(a.level(), b.level()));
    }
    let set = ActiveSet::from_iter_dedup(a.level(), a.iter().chain(b.iter()));
    let a_rows: Vec<usize> = a.iter().map(|c| set.row_of(c).unwrap()).collect();
    let b_rows: Vec<usize> = b.iter().map(|c| set.row_of(c).unwrap()).collect();
    let from_a = set.iter().map(|c| a.row_of(c)).collect();
    let from_b = set.iter().map(|c| b.row_of(c)).collect();
    Ok(Union {
        set,
        a_rows,
        b_rows,
        from_a,
        from_b,
    })
}

/// Geometric centers of all voxels in `set`.
pub fn voxel_centers(set: &ActiveSet, grid: &LevelGrid) -> Vec<[f64; 3]> {
    set.iter().map(|c| grid.center(c)).collect()
}

/// Centers and scores of voxels whose score is strictly above `threshold`.
pub fn points_above_threshold(scored: &ScoredVoxels, threshold: f64, grid: &LevelGrid) -> Result<Vec<([f64; 3], f64)>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    Ok(scored
        .coords
        .iter()
        .zip(&scored.scores)
        .filter(|(_, &s)| s > threshold)
        .map(|(&c, &s)| (grid.center(c), s))
        .collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::voxel::GridConfig;

    fn vc(x: i32, y: i32, z: i32) -> VoxelCoord {
        VoxelCoord::new(x, y, z)
    }

    fn grid0() -> LevelGrid {
        LevelGrid {
            level: 1,
            voxel_size: [0.1, 0.1, 0.2],
            origin: [0.0; 3],
            extent: [128, 128, 16],
        }
    }

    #[test]
    fn voxelize_floor_rule_and_mean() {
        let v = voxelize(&[[0.05, 0.05, 0.10]], &[1.0], 1, &grid0()).unwrap();
        assert_eq!(v.tensor.set.coords(), &[vc(0, 0, 0)]);

        let pos = [[0.01, 0.02, 0.03], [0.09, 0.08, 0.19]];
        let feats = [1.0, 10.0, 3.0, 20.0];
        let v = voxelize(&pos, &feats, 2, &grid0()).unwrap();
        assert_eq!(v.tensor.len(), 1);
        assert_eq!(v.tensor.features.data(), &[2.0, 15.0]);

        let v = voxelize(&[], &[], 5, &grid0()).unwrap();
        assert!(v.tensor.is_empty());
        assert_eq!(v.tensor.channels(), 5);
    }

    #[test]
    fn voxelize_counts_dropped_and_rejects_bad_size() {
        let v = voxelize(&[[-0.01, 0.0, 0.0], [0.0, 0.0, 0.0]], &[], 0, &grid0()).unwrap();
        assert_eq!(v.dropped, 1);
        let mut g = grid0();
        g.voxel_size[2] = -0.2;
        assert!(voxelize(&[], &[], 1, &g).is_err());
    }

    #[test]
    fn boundary_point_goes_to_higher_voxel() {
        let g = LevelGrid { voxel_size: [0.5, 0.5, 0.5], ..grid0() };
        let v = voxelize(&[[0.5, 1.0, 0.0]], &[0.0], 1, &g).unwrap();
        assert_eq!(v.tensor.set.coords(), &[vc(1, 2, 0)]);
    }

    #[test]
    fn voxelize_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)])
            .collect();
        let feats: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = voxelize(&pos, &feats, 2, &grid0()).unwrap();
        let mut idx: Vec<usize> = (0..500).collect();
        idx.shuffle(&mut rng);
        let pos2: Vec<[f64; 3]> = idx.iter().map(|&i| pos[i]).collect();
        let feats2: Vec<f64> = idx.iter().flat_map(|&i| [feats[2 * i], feats[2 * i + 1]]).collect();
        let b = voxelize(&pos2, &feats2, 2, &grid0()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pool_examples() {
        let occ = ActiveSet::new(1, vec![vc(3, 5, 7)]).unwrap();
        assert_eq!(max_pool_occupancy(&occ, [2, 2, 2]).coords(), &[vc(1, 2, 3)]);
        let col = ActiveSet::new(4, vec![vc(0, 0, 3)]).unwrap();
        let p = max_pool_occupancy(&col, [1, 1, 5]);
        assert_eq!(p.coords(), &[vc(0, 0, 0)]);
        assert_eq!(p.level(), 5);
        assert!(max_pool_occupancy(&ActiveSet::empty(1), [2, 2, 2]).is_empty());
    }

    #[test]
    fn expand_examples() {
        let g = GridConfig::desk();
        let parents = ActiveSet::new(2, vec![vc(1, 2, 3)]).unwrap();
        let ch = expand_children(&parents, [2, 2, 2], &g.level(1));
        assert_eq!(ch.len(), 8);
        assert_eq!(ch.coords[0], vc(2, 4, 6));
        assert_eq!(ch.coords[1], vc(2, 4, 7));
        assert_eq!(ch.coords[7], vc(3, 5, 7));
        assert_eq!(ch.slot, (0..8).collect::<Vec<_>>());

        let parents = ActiveSet::new(5, vec![vc(0, 0, 0)]).unwrap();
        let ch = expand_children(&parents, [1, 1, 5], &LevelGrid { extent: [16, 16, 5], ..g.level(4) });
        assert_eq!(ch.coords, (0..5).map(|z| vc(0, 0, z)).collect::<Vec<_>>());
        // desk level 4 has only 2 z-cells, so 3 of the 5 children are clipped
        let ch = expand_children(&parents, [1, 1, 5], &g.level(4));
        assert_eq!(ch.coords, vec![vc(0, 0, 0), vc(0, 0, 1)]);
    }

    #[test]
    fn union_examples() {
        let a = ActiveSet::new(1, vec![vc(0, 0, 0)]).unwrap();
        let b = ActiveSet::new(1, vec![vc(1, 0, 0)]).unwrap();
        let u = align_union(&a, &b).unwrap();
        assert_eq!(u.set.len(), 2);
        assert_eq!(u.from_a, vec![Some(0), None]);
        assert_eq!(u.from_b, vec![None, Some(0)]);
        let u = align_union(&a, &a).unwrap();
        assert_eq!(u.set.len(), 1);
        assert!(u.from_a.iter().chain(&u.from_b).all(Option::is_some));
        let c = ActiveSet::new(2, vec![]).unwrap();
        assert!(matches!(align_union(&a, &c), Err(Error::LevelMismatch(1, 2))));
    }

    #[test]
    fn centers_and_threshold() {
        let g = grid0();
        let set = ActiveSet::new(1, vec![vc(0, 0, 0)]).unwrap();
        let c = voxel_centers(&set, &g)[0];
        assert!((c[0] - 0.05).abs() < 1e-15 && (c[1] - 0.05).abs() < 1e-15 && (c[2] - 0.1).abs() < 1e-15);
        assert!(voxel_centers(&ActiveSet::empty(1), &g).is_empty());
        let scored = ScoredVoxels { level: 1, coords: vec![vc(0, 0, 0), vc(0, 0, 1)], scores: vec![0.3, 0.9] };
        assert!(points_above_threshold(&scored, 1.5, &g).is_err());
    }

    #[test]
    fn duplicate_coordinates_rejected() {
        assert!(matches!(
            ActiveSet::new(1, vec![vc(1, 1, 1), vc(1, 1, 1)]),
            Err(Error::DuplicateCoordinate([1, 1, 1]))
        ));
    }

    fn coord_strategy(max: i32) -> impl Strategy<Value = VoxelCoord> {
        (0..max, 0..max, 0..max).prop_map(|(x, y, z)| vc(x, y, z))
    }

    proptest! {
        #[test]
        fn expand_then_pool_roundtrip(parents in proptest::collection::btree_set(coord_strategy(6), 0..20)) {
            let g = GridConfig { extent: [16, 16, 16], ..GridConfig::desk() };
            let set = ActiveSet::new(2, parents.iter().copied().collect()).unwrap();
            let ch = expand_children(&set, [2, 2, 2], &g.level(1));
            prop_assert_eq!(ch.len(), 8 * set.len());
            for (c, &p) in ch.coords.iter().zip(&ch.parent) {
                prop_assert_eq!(c.parent([2, 2, 2]), set.coords()[p]);
            }
            let child_set = ActiveSet::from_iter_dedup(1, ch.coords.iter().copied());
            let pooled = max_pool_occupancy(&child_set, [2, 2, 2]);
            prop_assert_eq!(pooled.coords(), set.coords());
        }

        #[test]
        fn union_matches_set_oracle(
            a in proptest::collection::btree_set(coord_strategy(4), 0..30),
            b in proptest::collection::btree_set(coord_strategy(4), 0..30),
        ) {
            let sa = ActiveSet::new(1, a.iter().copied().collect()).unwrap();
            let sb = ActiveSet::new(1, b.iter().copied().collect()).unwrap();
            let u = align_union(&sa, &sb).unwrap();
            let oracle: BTreeSet<VoxelCoord> = a.union(&b).copied().collect();
            let expected: Vec<VoxelCoord> = oracle.iter().copied().collect();
            prop_assert_eq!(u.set.coords(), expected.as_slice());
            for (i, c) in u.set.iter().enumerate() {
                prop_assert_eq!(u.from_a[i].is_some(), a.contains(&c));
                prop_assert_eq!(u.from_b[i].is_some(), b.contains(&c));
            }
        }

        #[test]
        fn threshold_count_matches(scores in proptest::collection::vec(0.0f64..1.0, 0..40), t in 0.0f64..1.0) {
            let coords: Vec<VoxelCoord> = (0..scores.len() as i32).map(|i| vc(i, 0, 0)).collect();
            let n = scores.iter().filter(|&&s| s > t).count();
            let sv = ScoredVoxels { level: 1, coords, scores };
            prop_assert_eq!(points_above_threshold(&sv, t, &grid0()).unwrap().len(), n);
        }
    }
}
