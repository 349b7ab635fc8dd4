//! Synthetic multi-frame LiDAR scenes: moving and static objects, walls, a
//! ground plane, and a ray-cast spinning sensor with hard occlusion.
//!
//! The world frame is the sensor frame of frame 0. Frame `t` stores points in
//! its own sensor frame together with `ego_pose`, the transform taking frame-`t`
//! coordinates to world coordinates. Track poses map the object's canonical
//! box frame (origin at the box center) into the frame-`t` sensor frame.

pub mod raycast;

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
pub use raycast::{Hit, Solid, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSpec {
    pub rings: usize,
    /// Lowest and highest ring elevation, degrees.
    pub elevation_deg: [f64; 2],
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    /// Height of the sensor above the ground plane.
    pub mount_height: f64,
    /// Half-width of uniform range noise; zero disables it.
    pub range_jitter: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            rings: 32,
            elevation_deg: [-30.0, 10.0],
            azimuth_step_deg: 0.4,
            max_range: 60.0,
            mount_height: 1.8,
            range_jitter: 0.0,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sensor: {m}")));
        if self.rings == 0 {
            return bad("rings must be positive");
        }
        if !(self.azimuth_step_deg > 0.0 && self.azimuth_step_deg <= 360.0) {
            return bad("azimuth_step_deg must be in (0, 360]");
        }
        if !(self.max_range > 0.0) {
            return bad("max_range must be positive");
        }
        if !(self.mount_height > 0.0) {
            return bad("sensor must be above the ground (mount_height > 0)");
        }
        if !(self.range_jitter >= 0.0) {
            return bad("range_jitter must be non-negative");
        }
        let [lo, hi] = self.elevation_deg;
        if !(lo <= hi && lo > -90.0 && hi < 90.0) {
            return bad("elevation_deg must be an ordered range inside (-90, 90)");
        }
        Ok(())
    }

    pub fn azimuth_steps(&self) -> usize {
        (360.0 / self.azimuth_step_deg).round().max(1.0) as usize
    }

    /// Unit ray directions in the sensor frame, ring-major.
    pub fn directions(&self) -> Vec<[f64; 3]> {
        let n_az = self.azimuth_steps();
        let [lo, hi] = self.elevation_deg;
        let mut out = Vec::with_capacity(self.rings * n_az);
        for r in 0..self.rings {
            let el = if self.rings == 1 {
                lo
            } else {
                lo + (hi - lo) * r as f64 / (self.rings - 1) as f64
            }
            .to_radians();
            for a in 0..n_az {
                let az = 2.0 * PI * a as f64 / n_az as f64;
                out.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub frames: usize,
    pub moving_objects: usize,
    pub static_objects: usize,
    /// Speed range of moving objects, m per frame.
    pub speed: [f64; 2],
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    /// Probability that an object is a vertical cylinder instead of a box.
    pub cylinder_fraction: f64,
    /// Number of background walls, alternating on both sides of the road.
    pub walls: usize,
    /// Half size of the region, around the origin, where objects start.
    pub region_half: [f64; 2],
    /// Ego motion per frame: forward distance (m) and yaw change (rad).
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    /// Seconds between frames; used for point timestamps.
    pub frame_dt: f64,
    /// Minimum horizontal gap between object footprints and the sensor.
    pub clearance: f64,
    pub max_retries: usize,
    pub sensor: SensorSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 5,
            moving_objects: 2,
            static_objects: 2,
            speed: [0.4, 1.0],
            length: [1.6, 3.2],
            width: [0.8, 1.6],
            height: [0.8, 1.8],
            cylinder_fraction: 0.2,
            walls: 2,
            region_half: [5.5, 5.0],
            ego_speed: 0.3,
            ego_yaw_rate: 0.0,
            frame_dt: 0.1,
            clearance: 0.5,
            max_retries: 200,
            sensor: SensorSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene: {m}")));
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        for (name, r, min) in [
            ("speed", self.speed, 0.0),
            ("length", self.length, f64::MIN_POSITIVE),
            ("width", self.width, f64::MIN_POSITIVE),
            ("height", self.height, f64::MIN_POSITIVE),
        ] {
            if !(r[0] >= min && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} range {r:?} must be ordered and positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.cylinder_fraction) {
            return bad("cylinder_fraction must be in [0, 1]".into());
        }
        if !(self.region_half[0] > 0.0 && self.region_half[1] > 0.0) {
            return bad("region_half must be positive".into());
        }
        if !(self.ego_speed.is_finite() && self.ego_yaw_rate.is_finite() && self.frame_dt >= 0.0) {
            return bad("ego motion must be finite".into());
        }
        if !(self.clearance >= 0.0) || self.max_retries == 0 {
            return bad("clearance must be non-negative and max_retries positive".into());
        }
        self.sensor.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cuboid,
    Cylinder,
}

/// Static background box in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticBox {
    pub pose: RigidTransform,
    pub extent: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub k: usize,
    pub shape: Shape,
    /// Box size (l, w, h); cylinders have `l == w` equal to the diameter.
    pub extent: [f64; 3],
    /// Per-frame pose in that frame's sensor coordinates.
    pub poses: Vec<RigidTransform>,
    /// World-frame velocity, m per frame.
    pub velocity: [f64; 3],
}

impl ObjectTrack {
    pub fn solid(&self, pose: RigidTransform) -> Solid {
        let half = self.extent.map(|e| 0.5 * e);
        match self.shape {
            Shape::Cuboid => Solid::Cuboid { pose, half },
            Shape::Cylinder => Solid::Cylinder { pose, radius: half[0], half_height: half[2] },
        }
    }

    /// True when `p` (object frame) lies within the half extents plus `tol`.
    pub fn box_contains(&self, p: [f64; 3], tol: f64) -> bool {
        (0..3).all(|a| p[a].abs() <= 0.5 * self.extent[a] + tol)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub seed: u64,
    pub spec: SceneSpec,
    /// Ground plane height in world coordinates.
    pub ground_z: f64,
    pub walls: Vec<StaticBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: usize,
    pub ego_pose: RigidTransform,
    /// `[x, y, z, intensity, timestamp]` in the frame's sensor coordinates.
    pub points: Vec<[f64; 5]>,
    /// Object id per point, or -1 for background.
    pub fg_labels: Vec<i64>,
}

impl Frame {
    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p[0], p[1], p[2]]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    pub meta: SequenceMeta,
    pub frames: Vec<Frame>,
    pub tracks: Vec<ObjectTrack>,
}

/// Scene geometry before rendering, all in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub seed: u64,
    pub spec: SceneSpec,
    pub ego_poses: Vec<RigidTransform>,
    pub ground_z: f64,
    pub walls: Vec<StaticBox>,
    pub objects: Vec<PlacedObject>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    pub shape: Shape,
    pub extent: [f64; 3],
    pub yaw: f64,
    pub start: [f64; 3],
    pub velocity: [f64; 3],
}

impl PlacedObject {
    pub fn world_pose(&self, t: usize) -> RigidTransform {
        let t = t as f64;
        RigidTransform::from_yaw(
            self.yaw,
            [
                self.start[0] + t * self.velocity[0],
                self.start[1] + t * self.velocity[1],
                self.start[2] + t * self.velocity[2],
            ],
        )
    }

    fn radius(&self) -> f64 {
        0.5 * self.extent[0].hypot(self.extent[1])
    }
}

fn ego_poses(spec: &SceneSpec) -> Vec<RigidTransform> {
    let step = RigidTransform::from_yaw(spec.ego_yaw_rate, [spec.ego_speed, 0.0, 0.0]);
    let mut poses = vec![RigidTransform::identity()];
    for _ in 1..spec.frames {
        let next = poses.last().unwrap().compose(&step);
        poses.push(next);
    }
    poses
}

fn sample(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Samples a scene layout. Deterministic in `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego = ego_poses(spec);
    let ground_z = -spec.sensor.mount_height;
    let [hx, hy] = spec.region_half;

    let xs: Vec<f64> = ego.iter().map(|e| e.translation.x).collect();
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min) - hx - 10.0;
    let x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + hx + 10.0;
    let mut walls = Vec::with_capacity(spec.walls);
    let mut wall_inner = f64::INFINITY;
    for w in 0..spec.walls {
        let side = if w % 2 == 0 { 1.0 } else { -1.0 };
        let inner = hy + 1.0 + rng.gen_range(0.0..1.0);
        wall_inner = wall_inner.min(inner);
        let (thick, height) = (0.3, 3.0);
        walls.push(StaticBox {
            pose: RigidTransform::from_yaw(
                0.0,
                [0.5 * (x_lo + x_hi), side * (inner + 0.5 * thick), ground_z + 0.5 * height],
            ),
            extent: [x_hi - x_lo, thick, height],
        });
    }
    if ego.iter().any(|e| e.translation.y.abs() + spec.clearance >= wall_inner) {
        return Err(Error::InfeasiblePlacement(0));
    }

    let n = spec.moving_objects + spec.static_objects;
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(n);
    for i in 0..n {
        let moving = i < spec.moving_objects;
        let mut placed = None;
        for _ in 0..spec.max_retries {
            let cyl = rng.gen_bool(spec.cylinder_fraction);
            let w = sample(&mut rng, spec.width);
            let l = if cyl { w } else { sample(&mut rng, spec.length).max(w) };
            let h = sample(&mut rng, spec.height);
            let yaw = rng.gen_range(-PI..PI);
            let x = rng.gen_range(-hx..hx);
            let y = rng.gen_range(-hy..hy);
            let speed = if moving { sample(&mut rng, spec.speed) } else { 0.0 };
            let cand = PlacedObject {
                shape: if cyl { Shape::Cylinder } else { Shape::Cuboid },
                extent: [l, w, h],
                yaw,
                start: [x, y, ground_z + 0.5 * h],
                velocity: [speed * yaw.cos(), speed * yaw.sin(), 0.0],
            };
            if feasible(&cand, &objects, &ego, wall_inner, spec.clearance) {
                placed = Some(cand);
                break;
            }
        }
        objects.push(placed.ok_or(Error::InfeasiblePlacement(spec.max_retries))?);
    }

    Ok(SceneLayout {
        seed,
        spec: spec.clone(),
        ego_poses: ego,
        ground_z,
        walls,
        objects,
    })
}

fn feasible(c: &PlacedObject, others: &[PlacedObject], ego: &[RigidTransform], wall_inner: f64, gap: f64) -> bool {
    let rc = c.radius();
    (0..ego.len()).all(|t| {
        let p = c.world_pose(t).translation;
        let e = ego[t].translation;
        let clear_ego = (p.x - e.x).hypot(p.y - e.y) >= rc + gap;
        let clear_wall = p.y.abs() + rc + gap < wall_inner;
        let clear_obj = others.iter().all(|o| {
            let q = o.world_pose(t).translation;
            (p.x - q.x).hypot(p.y - q.y) >= rc + o.radius() + gap
        });
        clear_ego && clear_wall && clear_obj
    })
}

impl SceneLayout {
    /// All geometry at frame `t` in world coordinates.
    pub fn world(&self, t: usize) -> World {
        let mut solids: Vec<(Solid, i64)> = self
            .walls
            .iter()
            .map(|w| (Solid::Cuboid { pose: w.pose, half: w.extent.map(|e| 0.5 * e) }, -1))
            .collect();
        for (k, o) in self.objects.iter().enumerate() {
            let pose = o.world_pose(t);
            let half = o.extent.map(|e| 0.5 * e);
            let s = match o.shape {
                Shape::Cuboid => Solid::Cuboid { pose, half },
                Shape::Cylinder => Solid::Cylinder { pose, radius: half[0], half_height: half[2] },
            };
            solids.push((s, k as i64));
        }
        World { ground_z: Some(self.ground_z), solids }
    }
}

/// Casts every sensor ray from `ego` into `world` and keeps the nearest hit.
/// Points are returned in the sensor frame.
pub fn simulate_lidar_frame(
    world: &World,
    ego: &RigidTransform,
    sensor: &SensorSpec,
    t: usize,
    timestamp: f64,
    rng: &mut ChaCha8Rng,
) -> Frame {
    let origin = ego.apply([0.0; 3]);
    let mut points = Vec::new();
    let mut fg_labels = Vec::new();
    for d in sensor.directions() {
        let dw = ego.apply_vector(d);
        let Some(hit) = world.cast(origin, dw, sensor.max_range) else {
            continue;
        };
        let mut r = hit.distance;
        if sensor.range_jitter > 0.0 {
            r += rng.gen_range(-sensor.range_jitter..sensor.range_jitter);
        }
        let cos = (hit.normal[0] * dw[0] + hit.normal[1] * dw[1] + hit.normal[2] * dw[2]).abs();
        points.push([r * d[0], r * d[1], r * d[2], cos.min(1.0), timestamp]);
        fg_labels.push(hit.label);
    }
    Frame { t, ego_pose: *ego, points, fg_labels }
}

/// Renders every frame of a layout.
pub fn render_sequence(layout: &SceneLayout) -> SceneSequence {
    let spec = &layout.spec;
    let frames = (0..spec.frames)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(layout.seed ^ 0x5EED_0000_0000_0000 ^ t as u64);
            simulate_lidar_frame(
                &layout.world(t),
                &layout.ego_poses[t],
                &spec.sensor,
                t,
                t as f64 * spec.frame_dt,
                &mut rng,
            )
        })
        .collect();
    let tracks = layout
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| ObjectTrack {
            k,
            shape: o.shape,
            extent: o.extent,
            poses: (0..spec.frames)
                .map(|t| layout.ego_poses[t].inverse().compose(&o.world_pose(t)))
                .collect(),
            velocity: o.velocity,
        })
        .collect();
    SceneSequence {
        meta: SequenceMeta {
            seed: layout.seed,
            spec: spec.clone(),
            ground_z: layout.ground_z,
            walls: layout.walls.clone(),
        },
        frames,
        tracks,
    }
}

/// `generate_scene` followed by `render_sequence`.
pub fn simulate(seed: u64, spec: &SceneSpec) -> Result<SceneSequence> {
    Ok(render_sequence(&generate_scene(seed, spec)?))
}

impl SceneSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn track(&self, k: usize) -> Result<&ObjectTrack> {
        self.tracks.iter().find(|tr| tr.k == k).ok_or(Error::UnknownTrack(k))
    }

    /// Frame-`t` geometry in world coordinates, rebuilt from the stored
    /// tracks and walls.
    pub fn world(&self, t: usize) -> World {
        let ego = &self.frames[t].ego_pose;
        let mut solids: Vec<(Solid, i64)> = self
            .meta
            .walls
            .iter()
            .map(|w| (Solid::Cuboid { pose: w.pose, half: w.extent.map(|e| 0.5 * e) }, -1))
            .collect();
        for tr in &self.tracks {
            solids.push((tr.solid(ego.compose(&tr.poses[t])), tr.k as i64));
        }
        World { ground_z: Some(self.meta.ground_z), solids }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Invalid("sequence has no frames".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.points.len() != f.fg_labels.len() {
                return Err(Error::Invalid(format!("frame {i}: {} points but {} labels", f.points.len(), f.fg_labels.len())));
            }
            if f.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("frame {i}: non-finite point")));
            }
            if let Some(&bad) = f.fg_labels.iter().find(|&&l| l < -1 || (l >= 0 && self.track(l as usize).is_err())) {
                return Err(Error::Invalid(format!("frame {i}: label {bad} has no track")));
            }
        }
        for tr in &self.tracks {
            if tr.poses.len() != self.frames.len() {
                return Err(Error::Invalid(format!("track {}: {} poses for {} frames", tr.k, tr.poses.len(), self.frames.len())));
            }
            if tr.extent.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
                return Err(Error::Invalid(format!("track {}: extents must be positive", tr.k)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("sequence serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let seq: Self = serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.into(), source })?;
        seq.validate()?;
        Ok(seq)
    }
}
