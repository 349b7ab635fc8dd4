use crate::geometry::RigidTransform;

/// Closed solid used both for ray casting and for point-in-solid queries.
#[derive(Clone, Debug, PartialEq)]
pub enum Solid {
    /// Oriented box centered at `pose.translation` with half extents `half`.
    Cuboid { pose: RigidTransform, half: [f64; 3] },
    /// Vertical cylinder centered at `pose.translation`.
    Cylinder { pose: RigidTransform, radius: f64, half_height: f64 },
}

const EPS: f64 = 1e-9;

impl Solid {
    fn pose(&self) -> &RigidTransform {
        match self {
            Solid::Cuboid { pose, .. } | Solid::Cylinder { pose, .. } => pose,
        }
    }

    /// Nearest entry distance along `origin + t * dir` (unit `dir`) and the
    /// outward world-frame normal there.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let inv = self.pose().inverse();
        let o = inv.apply(origin);
        let d = inv.apply_vector(dir);
        let (t, n_local) = match self {
            Solid::Cuboid { half, .. } => intersect_box(o, d, *half)?,
            Solid::Cylinder { radius, half_height, .. } => intersect_cylinder(o, d, *radius, *half_height)?,
        };
        Some((t, self.pose().apply_vector(n_local)))
    }

    /// True when `p` lies inside the solid, with boundary tolerance `tol`
    /// (negative `tol` shrinks the solid).
    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        let q = self.pose().inverse().apply(p);
        match self {
            Solid::Cuboid { half, .. } => (0..3).all(|a| q[a].abs() <= half[a] + tol),
            Solid::Cylinder { radius, half_height, .. } => {
                q[2].abs() <= half_height + tol && q[0].hypot(q[1]) <= radius + tol
            }
        }
    }
}

fn intersect_box(o: [f64; 3], d: [f64; 3], half: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t1 = (-half[a] - o[a]) / d[a];
        let t2 = (half[a] - o[a]) / d[a];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            axis = a;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near <= EPS {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = -d[axis].signum();
    Some((t_near, n))
}

fn intersect_cylinder(o: [f64; 3], d: [f64; 3], r: f64, hh: f64) -> Option<(f64, [f64; 3])> {
    let mut best: Option<(f64, [f64; 3])> = None;
    let mut consider = |t: f64, n: [f64; 3]| {
        if t > EPS && best.is_none_or(|(b, _)| t < b) {
            best = Some((t, n));
        }
    };
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-30 {
        let b = 2.0 * (o[0] * d[0] + o[1] * d[1]);
        let c = o[0] * o[0] + o[1] * o[1] - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = o[2] + t * d[2];
            if z.abs() <= hh {
                let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
                consider(t, [x / r, y / r, 0.0]);
            }
        }
    }
    if d[2].abs() > 1e-15 {
        for cap in [-hh, hh] {
            let t = (cap - o[2]) / d[2];
            let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
            if x.hypot(y) <= r {
                consider(t, [0.0, 0.0, cap.signum()]);
            }
        }
    }
    best
}

/// One frame's static and dynamic geometry in world coordinates.
#[derive(Clone, Debug, Default)]
pub struct World {
    pub ground_z: Option<f64>,
    /// Solids with their label: object id, or -1 for background.
    pub solids: Vec<(Solid, i64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub normal: [f64; 3],
    pub label: i64,
}

impl World {
    /// Nearest surface hit within `max_range`; only the first surface along
    /// the ray is returned.
    pub fn cast(&self, origin: [f64; 3], dir: [f64; 3], max_range: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if let Some(g) = self.ground_z {
            if dir[2] < 0.0 {
                let t = (g - origin[2]) / dir[2];
                if t > EPS {
                    best = Some(Hit { distance: t, normal: [0.0, 0.0, 1.0], label: -1 });
                }
            }
        }
        for (solid, label) in &self.solids {
            if let Some((t, normal)) = solid.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.distance) {
                    best = Some(Hit { distance: t, normal, label: *label });
                }
            }
        }
        best.filter(|h| h.distance <= max_range)
    }

    /// True if `p` is inside any solid or below the ground.
    pub fn occupied(&self, p: [f64; 3], tol: f64) -> bool {
        self.ground_z.is_some_and(|g| p[2] < g - tol) || self.solids.iter().any(|(s, _)| s.contains(p, tol))
    }
}
