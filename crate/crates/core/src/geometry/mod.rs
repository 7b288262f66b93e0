//! Pinhole cameras, rigid poses, minimal and robust absolute pose solvers.

mod p3p;
mod ransac;
mod refine;

pub use p3p::p3p;
pub use ransac::{ransac_pnp, Correspondence, RansacConfig, RansacOutcome};
pub(crate) use ransac::inlier_mask;
pub use refine::{refine_pose, RefineOutcome};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sfm::CameraId;

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Maps a pixel to unit-focal normalized image coordinates.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: CameraId,
    pub intrinsics: Intrinsics,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(id: CameraId, intrinsics: Intrinsics, width: u32, height: u32) -> Result<Self> {
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        let finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !finite || fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Integrity(format!(
                "camera {id}: focal lengths must be positive and finite"
            )));
        }
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(Error::Integrity(format!(
                "camera {id}: principal point outside the image"
            )));
        }
        Ok(Self {
            id,
            intrinsics,
            width,
            height,
        })
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rotation), translation)
    }

    /// Camera placed at `center` looking at `target`, with `up` projecting to
    /// the negative image y axis.
    pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Self> {
        let forward = target - center;
        if forward.norm() < 1e-12 {
            return Err(Error::Degenerate("camera centre coincides with its target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(up);
        if right.norm() < 1e-12 {
            return Err(Error::Degenerate("viewing direction parallel to up vector".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Ok(Self::from_matrix(&rotation, translation))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }
}

/// Projects a world point to pixels. Fails for points at or behind the
/// camera plane (`z_cam <= 1e-9`).
pub fn project(pose: &CameraPose, camera: &Camera, world: &Vector3<f64>) -> Result<Vector2<f64>> {
    project_camera_point(&pose.transform(world), &camera.intrinsics)
}

pub(crate) fn project_camera_point(p: &Vector3<f64>, k: &Intrinsics) -> Result<Vector2<f64>> {
    if p.z <= 1e-9 {
        return Err(Error::Degenerate(format!(
            "point behind camera (z = {:.3e})",
            p.z
        )));
    }
    Ok(Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Translation error (distance between camera centres, world units) and
/// rotation error (angle of `R_est * R_gt^T`, degrees).
pub fn pose_error(estimated: &CameraPose, ground_truth: &CameraPose) -> (f64, f64) {
    let translation = (estimated.center() - ground_truth.center()).norm();
    let delta = estimated.rotation * ground_truth.rotation.inverse();
    let q = delta.quaternion();
    let angle = 2.0 * q.imag().norm().atan2(q.w.abs());
    (translation, angle.to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn camera() -> Camera {
        let k = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
        };
        Camera::new(CameraId(1), k, 100, 100).unwrap()
    }

    #[test]
    fn projects_on_axis_point_to_principal_point() {
        let uv = project(&CameraPose::identity(), &camera(), &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_abs_diff_eq!(uv, Vector2::new(50.0, 50.0));
        let uv = project(&CameraPose::identity(), &camera(), &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_abs_diff_eq!(uv, Vector2::new(100.0, 50.0));
    }

    #[test]
    fn rejects_points_behind_camera() {
        let err = project(&CameraPose::identity(), &camera(), &Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn camera_validation() {
        let k = Intrinsics {
            fx: -1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        };
        assert!(Camera::new(CameraId(0), k, 10, 10).is_err());
        let k = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 11.0,
            cy: 0.0,
        };
        assert!(Camera::new(CameraId(0), k, 10, 10).is_err());
    }

    #[test]
    fn pose_error_cases() {
        let gt = CameraPose::identity();
        assert_eq!(pose_error(&gt, &gt), (0.0, 0.0));

        let rotated = CameraPose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians()),
            Vector3::zeros(),
        );
        let (t, r) = pose_error(&rotated, &gt);
        assert_abs_diff_eq!(t, 0.0);
        assert_abs_diff_eq!(r, 10.0, epsilon = 1e-10);

        let moved = CameraPose::new(UnitQuaternion::identity(), Vector3::new(0.0, -0.5, 0.0));
        let (t, r) = pose_error(&moved, &gt);
        assert_abs_diff_eq!(t, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.0);
    }

    #[test]
    fn rotation_error_is_symmetric() {
        let a = CameraPose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.4, 0.7),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let b = CameraPose::new(
            UnitQuaternion::from_euler_angles(-0.3, 0.2, 0.1),
            Vector3::new(0.0, 2.0, 1.0),
        );
        assert_abs_diff_eq!(pose_error(&a, &b).1, pose_error(&b, &a).1, epsilon = 1e-10);
    }

    #[test]
    fn look_at_points_forward_axis_at_target() {
        let center = Vector3::new(8.0, 0.0, 1.0);
        let pose = CameraPose::look_at(&center, &Vector3::zeros(), &Vector3::z()).unwrap();
        let target_cam = pose.transform(&Vector3::zeros());
        assert_abs_diff_eq!(target_cam.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(target_cam.y, 0.0, epsilon = 1e-12);
        assert!(target_cam.z > 0.0);
        assert_abs_diff_eq!(pose.center(), center, epsilon = 1e-12);
        // World up maps to negative image y.
        let above = pose.transform(&Vector3::new(0.0, 0.0, 1.0));
        assert!(above.y < 0.0);
    }
}
