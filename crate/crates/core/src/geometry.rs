//! Rigid transforms (rotation + translation) on 3D points.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `p -> R p + t`. Serialized as a row-major 3x3 rotation and a translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<RigidTransform> for PoseRecord {
    fn from(t: RigidTransform) -> Self {
        let r = &t.rotation;
        Self {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<PoseRecord> for RigidTransform {
    type Error = Error;

    fn try_from(p: PoseRecord) -> Result<Self> {
        let t = RigidTransform {
            rotation: Matrix3::from_row_slice(&p.rotation),
            translation: Vector3::from(p.translation),
        };
        t.validate(1e-9)?;
        Ok(t)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: Vector3::from(translation),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(p) + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn apply_vector(&self, d: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(d);
        [v.x, v.y, v.z]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Orthonormal rotation with determinant +1, finite translation.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        let finite = self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite());
        if !finite || ortho > tol || (det - 1.0).abs() > tol {
            return Err(Error::Invalid(format!(
                "not a rigid transform (orthonormality error {ortho:e}, det {det})"
            )));
        }
        Ok(())
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
