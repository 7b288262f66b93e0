//! Gauss-Newton pose refinement on total squared reprojection error.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};

use super::{project_camera_point, Camera, CameraPose, Correspondence};
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100;
const STEP_TOLERANCE: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub pose: CameraPose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Set when the normal equations were rank deficient; `pose` is then
    /// the input pose.
    pub degenerate: bool,
}

/// Minimizes the summed squared pixel error over a 6-dof tangent update
/// `R <- exp(w) R, t <- t + dt`, halving steps that fail to decrease the
/// cost. The returned cost never exceeds the initial cost.
pub fn refine_pose(
    pose: &CameraPose,
    inliers: &[Correspondence],
    camera: &Camera,
) -> Result<RefineOutcome> {
    if inliers.len() < 4 {
        return Err(Error::invalid(format!(
            "pose refinement needs at least 4 inliers, got {}",
            inliers.len()
        )));
    }
    let initial_cost = cost(pose, inliers, camera)
        .ok_or_else(|| Error::Degenerate("initial pose places an inlier behind the camera".into()))?;

    let mut current = *pose;
    let mut current_cost = initial_cost;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (h, g) = normal_equations(&current, inliers, camera);
        let eigen = h.symmetric_eigen();
        let max_ev = eigen.eigenvalues.max();
        let min_ev = eigen.eigenvalues.min();
        if !(max_ev > 0.0) || min_ev <= 1e-12 * max_ev {
            return Ok(RefineOutcome {
                pose: *pose,
                initial_cost,
                final_cost: initial_cost,
                iterations,
                degenerate: true,
            });
        }
        let Some(chol) = h.cholesky() else {
            return Ok(RefineOutcome {
                pose: *pose,
                initial_cost,
                final_cost: initial_cost,
                iterations,
                degenerate: true,
            });
        };
        let step = -chol.solve(&g);
        if step.norm() < STEP_TOLERANCE {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = apply(&current, &(step * scale));
            if let Some(c) = cost(&candidate, inliers, camera) {
                if c < current_cost {
                    current = candidate;
                    current_cost = c;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(RefineOutcome {
        pose: current,
        initial_cost,
        final_cost: current_cost,
        iterations,
        degenerate: false,
    })
}

fn apply(pose: &CameraPose, step: &SVector<f64, 6>) -> CameraPose {
    let omega = Vector3::new(step[0], step[1], step[2]);
    let dt = Vector3::new(step[3], step[4], step[5]);
    CameraPose::new(
        UnitQuaternion::from_scaled_axis(omega) * pose.rotation,
        pose.translation + dt,
    )
}

fn cost(pose: &CameraPose, inliers: &[Correspondence], camera: &Camera) -> Option<f64> {
    inliers.iter().try_fold(0.0, |acc, c| {
        project_camera_point(&pose.transform(&c.point), &camera.intrinsics)
            .ok()
            .map(|uv| acc + (uv - c.pixel).norm_squared())
    })
}

fn normal_equations(
    pose: &CameraPose,
    inliers: &[Correspondence],
    camera: &Camera,
) -> (SMatrix<f64, 6, 6>, SVector<f64, 6>) {
    let k = &camera.intrinsics;
    let mut h = SMatrix::<f64, 6, 6>::zeros();
    let mut g = SVector::<f64, 6>::zeros();
    for c in inliers {
        let rotated = pose.rotation * c.point;
        let p = rotated + pose.translation;
        let inv_z = 1.0 / p.z;
        let residual = [
            k.fx * p.x * inv_z + k.cx - c.pixel.x,
            k.fy * p.y * inv_z + k.cy - c.pixel.y,
        ];
        // d(pixel)/d(p_cam)
        let dproj = SMatrix::<f64, 2, 3>::new(
            k.fx * inv_z,
            0.0,
            -k.fx * p.x * inv_z * inv_z,
            0.0,
            k.fy * inv_z,
            -k.fy * p.y * inv_z * inv_z,
        );
        // d(p_cam)/d(omega) = -[R X]_x, d(p_cam)/d(dt) = I
        let skew = -rotated.cross_matrix();
        let mut dp = SMatrix::<f64, 3, 6>::zeros();
        dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew);
        dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        let jac = dproj * dp;
        for row in 0..2 {
            let j = jac.row(row).transpose();
            h += j * j.transpose();
            g += j * residual[row];
        }
    }
    (h, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_error, project, Intrinsics};
    use crate::sfm::CameraId;
    use nalgebra::Vector2;

    fn camera() -> Camera {
        let k = Intrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
        };
        Camera::new(CameraId(0), k, 640, 480).unwrap()
    }

    fn scene(pose: &CameraPose) -> Vec<Correspondence> {
        let cam = camera();
        let mut out = Vec::new();
        for i in 0..20 {
            let f = i as f64;
            let p = Vector3::new((f * 0.37).sin() * 2.0, (f * 0.71).cos() * 1.5, (f * 0.13).sin());
            out.push(Correspondence {
                pixel: project(pose, &cam, &p).unwrap(),
                point: p,
            });
        }
        out
    }

    fn truth() -> CameraPose {
        CameraPose::new(
            UnitQuaternion::from_euler_angles(0.05, -0.2, 0.1),
            Vector3::new(0.3, -0.2, 7.0),
        )
    }

    #[test]
    fn converges_from_perturbed_start() {
        let gt = truth();
        let data = scene(&gt);
        let perturbed = CameraPose::new(
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 1f64.to_radians()) * gt.rotation,
            gt.translation + Vector3::new(0.07, 0.0, 0.0),
        );
        let out = refine_pose(&perturbed, &data, &camera()).unwrap();
        let (t, r) = pose_error(&out.pose, &gt);
        assert!(t < 1e-6 && r < 1e-6, "t {t} r {r}");
        assert!(out.final_cost <= out.initial_cost);
    }

    #[test]
    fn optimal_pose_is_a_fixed_point() {
        let gt = truth();
        let out = refine_pose(&gt, &scene(&gt), &camera()).unwrap();
        assert!((out.pose.translation - gt.translation).norm() < 1e-12);
        assert!(out.pose.rotation.angle_to(&gt.rotation) < 1e-12);
    }

    #[test]
    fn needs_four_inliers() {
        let gt = truth();
        let data = scene(&gt);
        assert!(matches!(
            refine_pose(&gt, &data[..3], &camera()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn never_increases_cost_under_noise() {
        let gt = truth();
        let mut data = scene(&gt);
        for (i, c) in data.iter_mut().enumerate() {
            c.pixel += Vector2::new((i as f64).sin() * 2.0, (i as f64 * 1.3).cos() * 2.0);
        }
        let out = refine_pose(&gt, &data, &camera()).unwrap();
        assert!(out.final_cost <= out.initial_cost);
    }

    #[test]
    fn flags_rank_deficiency() {
        let gt = truth();
        let data = scene(&gt);
        let same = vec![data[0]; 5];
        let out = refine_pose(&gt, &same, &camera()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.pose, gt);
    }
}
