//! Dense, smear-free completion targets from a simulated sequence.
//!
//! Foreground points are moved into their object's box frame and pooled over
//! all frames; background points are pooled in world coordinates. Each pooled
//! set is densified once and re-posed into every frame.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, RigidTransform};
use crate::sim::{ObjectTrack, SceneSequence};
use crate::voxel::{max_pool_occupancy, occupancy, ExistencePyramid, GridConfig};

/// Point sets at or below this size are never densified.
pub const DENSIFY_MIN_POINTS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedForeground {
    pub k: usize,
    /// Points in the object's box frame.
    pub points: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedBackground {
    /// Points in world (frame 0) coordinates.
    pub points: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseFrame {
    pub t: usize,
    /// Points in the frame's sensor coordinates.
    pub points: Vec<[f64; 3]>,
    /// Object id per point, or -1 for background.
    pub labels: Vec<i64>,
}

pub fn gather_foreground(seq: &SceneSequence, k: usize) -> Result<AlignedForeground> {
    let track = seq.track(k)?;
    let mut points = Vec::new();
    for (t, f) in seq.frames.iter().enumerate() {
        let inv = track.poses[t].inverse();
        points.extend(
            f.positions()
                .into_iter()
                .zip(&f.fg_labels)
                .filter(|(_, &l)| l == k as i64)
                .map(|(p, _)| inv.apply(p)),
        );
    }
    Ok(AlignedForeground { k, points })
}

pub fn merge_background(seq: &SceneSequence) -> MergedBackground {
    let mut points = Vec::new();
    for f in &seq.frames {
        points.extend(
            f.positions()
                .into_iter()
                .zip(&f.fg_labels)
                .filter(|(_, &l)| l < 0)
                .map(|(p, _)| f.ego_pose.apply(p)),
        );
    }
    MergedBackground { points }
}

/// Every frame's points in world coordinates, labels kept.
pub fn naive_merge(seq: &SceneSequence) -> (Vec<[f64; 3]>, Vec<i64>) {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for f in &seq.frames {
        points.extend(f.positions().into_iter().map(|p| f.ego_pose.apply(p)));
        labels.extend_from_slice(&f.fg_labels);
    }
    (points, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyParams {
    /// Neighbor radius for midpoint insertion.
    pub radius: f64,
    pub rounds: usize,
    /// Cell size of the final resampling grid.
    pub spacing: f64,
}

impl Default for DensifyParams {
    fn default() -> Self {
        Self {
            radius: 0.25,
            rounds: 1,
            spacing: 0.05,
        }
    }
}

impl DensifyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("densify radius must be positive, got {}", self.radius)));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config(format!("densify spacing must be positive, got {}", self.spacing)));
        }
        Ok(())
    }
}

pub trait Densifier {
    fn densify(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>>;
}

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityDensifier;

impl Densifier for IdentityDensifier {
    fn densify(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        Ok(points.to_vec())
    }
}

/// Midpoint insertion between close neighbors followed by grid resampling.
#[derive(Clone, Debug, Default)]
pub struct MidpointDensifier {
    pub params: DensifyParams,
}

impl Densifier for MidpointDensifier {
    fn densify(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        densify(points, &self.params)
    }
}

fn lex(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

fn sorted_unique(mut v: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    v.sort_by(lex);
    v.dedup();
    v
}

/// Uniform hash grid over a point set for radius queries.
struct PointGrid<'a> {
    cell: f64,
    points: &'a [[f64; 3]],
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    fn new(points: &'a [[f64; 3]], cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, points, buckets }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    /// Calls `f` with every index within `r` (<= cell) of `p`.
    fn visit_within(&self, p: &[f64; 3], r: f64, mut f: impl FnMut(usize)) {
        let k = Self::key(p, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        b.iter().copied().filter(|&j| distance(*p, self.points[j]) <= r).for_each(&mut f);
                    }
                }
            }
        }
    }

    fn any_within(&self, p: &[f64; 3], r: f64) -> bool {
        let k = Self::key(p, self.cell);
        (-1..=1).any(|dx| {
            (-1..=1).any(|dy| {
                (-1..=1).any(|dz| {
                    self.buckets
                        .get(&[k[0] + dx, k[1] + dy, k[2] + dz])
                        .is_some_and(|b| b.iter().any(|&j| distance(*p, self.points[j]) <= r))
                })
            })
        })
    }
}

fn for_each_midpoint(points: &[[f64; 3]], r: f64, mut f: impl FnMut([f64; 3])) {
    let grid = PointGrid::new(points, r);
    for (i, p) in points.iter().enumerate() {
        grid.visit_within(p, r, |j| {
            if j > i {
                let q = points[j];
                f([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1]), 0.5 * (p[2] + q[2])]);
            }
        });
    }
}

/// One insertion round: the input plus the midpoint of every pair of points
/// at distance at most `r`, sorted and deduplicated.
pub fn midpoint_round(points: &[[f64; 3]], r: f64) -> Vec<[f64; 3]> {
    let mut out = points.to_vec();
    for_each_midpoint(points, r, |m| out.push(m));
    sorted_unique(out)
}

/// Per-cell winner of [`grid_resample`], fed one point at a time.
struct Resampler {
    spacing: f64,
    best: HashMap<[i64; 3], [f64; 3]>,
}

impl Resampler {
    fn new(spacing: f64) -> Self {
        Self { spacing, best: HashMap::new() }
    }

    fn push(&mut self, p: [f64; 3]) {
        let key = PointGrid::key(&p, self.spacing);
        match self.best.get_mut(&key) {
            None => {
                self.best.insert(key, p);
            }
            Some(cur) => {
                let center = key.map(|k| (k as f64 + 0.5) * self.spacing);
                let (dn, dc) = (distance(p, center), distance(*cur, center));
                if dn < dc || (dn == dc && lex(&p, cur) == Ordering::Less) {
                    *cur = p;
                }
            }
        }
    }

    fn finish(self) -> Vec<[f64; 3]> {
        let mut cells: Vec<([i64; 3], [f64; 3])> = self.best.into_iter().collect();
        cells.sort_unstable_by_key(|c| c.0);
        cells.into_iter().map(|c| c.1).collect()
    }
}

/// Keeps, per `spacing` cell, the point closest to the cell center; ties go
/// to the lexicographically smaller point. Output is sorted by cell.
pub fn grid_resample(points: &[[f64; 3]], spacing: f64) -> Vec<[f64; 3]> {
    let mut r = Resampler::new(spacing);
    points.iter().for_each(|&p| r.push(p));
    r.finish()
}

/// Default densifier. Sets with at most [`DENSIFY_MIN_POINTS`] points are
/// returned unchanged. Every output point is within `radius / 2` of an input
/// point.
pub fn densify(points: &[[f64; 3]], params: &DensifyParams) -> Result<Vec<[f64; 3]>> {
    params.validate()?;
    if points.len() <= DENSIFY_MIN_POINTS {
        return Ok(points.to_vec());
    }
    let input = sorted_unique(points.to_vec());
    let half = 0.5 * params.radius;
    let anchor = PointGrid::new(&input, half);
    let mut cur = input.clone();
    // the last round streams into the resampler, which ignores order and duplicates
    for round in 0..params.rounds.saturating_sub(1) {
        let next = midpoint_round(&cur, params.radius);
        cur = if round == 0 { next } else { next.into_iter().filter(|p| anchor.any_within(p, half)).collect() };
    }
    let mut out = Resampler::new(params.spacing);
    cur.iter().for_each(|&p| out.push(p));
    if params.rounds > 0 {
        let filter = params.rounds > 1;
        for_each_midpoint(&cur, params.radius, |m| {
            if !filter || anchor.any_within(&m, half) {
                out.push(m);
            }
        });
    }
    Ok(out.finish())
}

/// Transform taking points posed by `from` to points posed by `to`, or `None`
/// when both poses are the same.
fn relative(to: &RigidTransform, from: &RigidTransform) -> Option<RigidTransform> {
    (to != from).then(|| to.compose(&from.inverse()))
}

fn apply_opt(m: &Option<RigidTransform>, p: [f64; 3]) -> [f64; 3] {
    m.as_ref().map_or(p, |m| m.apply(p))
}

/// Object points of every frame carried to where the object sits in frame 0.
/// A rigid copy of the object-frame pool; frames where the object has its
/// frame-0 pose contribute their points unchanged.
fn pool_object(seq: &SceneSequence, track: &ObjectTrack) -> Vec<[f64; 3]> {
    let mut points = Vec::new();
    for (t, f) in seq.frames.iter().enumerate() {
        let m = relative(&track.poses[0], &track.poses[t]);
        points.extend(
            f.positions()
                .into_iter()
                .zip(&f.fg_labels)
                .filter(|(_, &l)| l == track.k as i64)
                .map(|(p, _)| apply_opt(&m, p)),
        );
    }
    points
}

/// Densifies each pooled set once and poses it into every frame: objects by
/// their pose relative to frame 0, background by the inverse ego pose.
/// Background points come first, then objects in track order.
pub fn compose_dsrecon(seq: &SceneSequence, densifier: &dyn Densifier) -> Result<Vec<DenseFrame>> {
    let background = densifier.densify(&merge_background(seq).points)?;
    let objects: Vec<(&ObjectTrack, Vec<[f64; 3]>)> = seq
        .tracks
        .iter()
        .map(|tr| Ok((tr, densifier.densify(&pool_object(seq, tr))?)))
        .collect::<Result<_>>()?;
    let frames = seq
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let to_frame = f.ego_pose.inverse();
            let mut points: Vec<[f64; 3]> = background.iter().map(|p| to_frame.apply(*p)).collect();
            let mut labels = vec![-1; points.len()];
            for (tr, pts) in &objects {
                let m = relative(&tr.poses[t], &tr.poses[0]);
                points.extend(pts.iter().map(|&p| apply_opt(&m, p)));
                labels.resize(points.len(), tr.k as i64);
            }
            DenseFrame { t, points, labels }
        })
        .collect();
    Ok(frames)
}

/// Root mean square distance of `points` (box frame) to the box volume.
pub fn rms_out_of_box(track: &ObjectTrack, points: &[[f64; 3]]) -> (f64, usize) {
    let sq: f64 = points
        .iter()
        .map(|p| {
            (0..3)
                .map(|a| (p[a].abs() - 0.5 * track.extent[a]).max(0.0).powi(2))
                .sum::<f64>()
        })
        .sum();
    (sq, points.len())
}

/// Smear of object points: RMS distance outside the annotated box, measured
/// in each frame's box frame and pooled over objects and frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smear {
    pub dsrecon: f64,
    pub naive: f64,
}

pub fn smear_metric(seq: &SceneSequence, dense: &[DenseFrame]) -> Smear {
    let (world, labels) = naive_merge(seq);
    let (mut sd, mut nd, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (t, f) in seq.frames.iter().enumerate() {
        let to_frame: RigidTransform = f.ego_pose.inverse();
        for tr in &seq.tracks {
            let to_box = tr.poses[t].inverse();
            let naive: Vec<[f64; 3]> = world
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == tr.k as i64)
                .map(|(p, _)| to_box.apply(to_frame.apply(*p)))
                .collect();
            let (s, n) = rms_out_of_box(tr, &naive);
            sn += s;
            nn += n;
            if let Some(d) = dense.iter().find(|d| d.t == t) {
                let pts: Vec<[f64; 3]> = d
                    .points
                    .iter()
                    .zip(&d.labels)
                    .filter(|(_, &l)| l == tr.k as i64)
                    .map(|(p, _)| to_box.apply(*p))
                    .collect();
                let (s, n) = rms_out_of_box(tr, &pts);
                sd += s;
                nd += n;
            }
        }
    }
    let rms = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
    Smear { dsrecon: rms(sd, nd), naive: rms(sn, nn) }
}

/// Occupancy of `points` at level 1 (points outside the grid are cropped),
/// max-pooled up through every level.
pub fn build_existence_pyramid(points: &[[f64; 3]], grid: &GridConfig) -> Result<ExistencePyramid> {
    grid.validate()?;
    let (first, _) = occupancy(points, &grid.level(1))?;
    let mut levels = vec![first];
    for l in 1..grid.num_levels() {
        let next = max_pool_occupancy(levels.last().unwrap(), grid.kernel(l));
        levels.push(next);
    }
    Ok(ExistencePyramid { levels })
}
