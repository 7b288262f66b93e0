//! Minimal absolute pose from three 2D-3D correspondences.
//!
//! Grunert's distance formulation: with unknown depths `s1, s2, s3` along
//! the three bearing rays, the pairwise 3D distances give three quadratic
//! constraints. Substituting `u = s2/s1`, `v = s3/s1` and eliminating `u`
//! leaves a quartic in `v`. Each real root yields depths, which are polished
//! with Newton steps before an absolute-orientation fit recovers `R, t`.

use nalgebra::{Matrix3, Matrix4, Vector3};

use super::{Camera, CameraPose, Correspondence};
use crate::error::{Error, Result};

/// Returns up to four poses consistent with the three correspondences.
///
/// Fails when two 3D points coincide or the triple is collinear (triangle
/// area `<= 1e-9` times the squared extent).
pub fn p3p(sample: &[Correspondence; 3], camera: &Camera) -> Result<Vec<CameraPose>> {
    let x = [sample[0].point, sample[1].point, sample[2].point];
    check_triangle(&x)?;

    let k = &camera.intrinsics;
    let f: Vec<Vector3<f64>> = sample
        .iter()
        .map(|c| {
            let n = k.normalize(&c.pixel);
            Vector3::new(n.x, n.y, 1.0).normalize()
        })
        .collect();

    let a2 = (x[1] - x[2]).norm_squared();
    let b2 = (x[0] - x[2]).norm_squared();
    let c2 = (x[0] - x[1]).norm_squared();
    let cos_alpha = f[1].dot(&f[2]);
    let cos_beta = f[0].dot(&f[2]);
    let cos_gamma = f[0].dot(&f[1]);

    // Work with lengths relative to b so the quartic stays well scaled.
    let ra = a2 / b2;
    let rc = c2 / b2;

    // Polynomials in v, coefficients in ascending powers.
    let q = [1.0, -2.0 * cos_beta, 1.0];
    // N(v) = (a^2 - c^2) Q(v) + (1 - v^2)
    let num = [
        (ra - rc) * q[0] + 1.0,
        (ra - rc) * q[1],
        (ra - rc) * q[2] - 1.0,
    ];
    // D(v) = 2 (cos_gamma - v cos_alpha)
    let den = [2.0 * cos_gamma, -2.0 * cos_alpha];
    // (1 - c^2 Q(v))
    let rest = [1.0 - rc * q[0], -rc * q[1], -rc * q[2]];

    let nn = poly_mul(&num, &num);
    let nd = poly_mul(&num, &den);
    let dd = poly_mul(&den, &den);
    let rdd = poly_mul(&rest, &dd);
    let mut quartic = [0.0; 5];
    for (i, c) in quartic.iter_mut().enumerate() {
        *c = coeff(&nn, i) - 2.0 * cos_gamma * coeff(&nd, i) + coeff(&rdd, i);
    }

    let mut poses: Vec<CameraPose> = Vec::with_capacity(4);
    for v in real_roots(&quartic) {
        if v <= 0.0 {
            continue;
        }
        let d = eval(&den, v);
        if d.abs() < 1e-14 {
            continue;
        }
        let u = eval(&num, v) / d;
        let qv = eval(&q, v);
        if u <= 0.0 || qv <= 0.0 {
            continue;
        }
        let s1 = (b2 / qv).sqrt();
        let depths = polish_depths(
            Vector3::new(s1, u * s1, v * s1),
            [a2, b2, c2],
            [cos_alpha, cos_beta, cos_gamma],
        );
        if depths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            continue;
        }
        let cam = [f[0] * depths[0], f[1] * depths[1], f[2] * depths[2]];
        let Some(pose) = align_triplets(&x, &cam) else {
            continue;
        };
        let consistent = (0..3).all(|i| {
            let p = pose.transform(&x[i]);
            p.z > 0.0 && p.normalize().dot(&f[i]) > 1.0 - 1e-10
        });
        let duplicate = poses
            .iter()
            .any(|other| (other.rotation.angle_to(&pose.rotation)) < 1e-9
                && (other.translation - pose.translation).norm() < 1e-9 * (1.0 + pose.translation.norm()));
        if consistent && !duplicate {
            poses.push(pose);
        }
    }
    Ok(poses)
}

fn check_triangle(x: &[Vector3<f64>; 3]) -> Result<()> {
    let d01 = (x[0] - x[1]).norm_squared();
    let d02 = (x[0] - x[2]).norm_squared();
    let d12 = (x[1] - x[2]).norm_squared();
    let extent2 = d01.max(d02).max(d12);
    let shortest = d01.min(d02).min(d12);
    if extent2 == 0.0 || shortest <= 1e-24 * extent2 {
        return Err(Error::Degenerate("duplicate 3D point in minimal sample".into()));
    }
    let area = 0.5 * (x[1] - x[0]).cross(&(x[2] - x[0])).norm();
    if area <= 1e-9 * extent2 {
        return Err(Error::Degenerate("collinear 3D points in minimal sample".into()));
    }
    Ok(())
}

fn coeff(p: &[f64], i: usize) -> f64 {
    p.get(i).copied().unwrap_or(0.0)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn derivative(p: &[f64]) -> Vec<f64> {
    p.iter().enumerate().skip(1).map(|(i, &c)| i as f64 * c).collect()
}

/// Real roots of a polynomial of degree at most four via companion-matrix
/// eigenvalues, each refined with Newton iterations.
fn real_roots(p: &[f64; 5]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut degree = 4;
    while degree > 0 && p[degree].abs() <= 1e-14 * scale {
        degree -= 1;
    }
    if degree == 0 {
        return Vec::new();
    }
    let lead = p[degree];
    let mut companion = Matrix4::<f64>::zeros();
    for i in 0..degree {
        companion[(0, i)] = -p[degree - 1 - i] / lead;
        if i + 1 < degree {
            companion[(i + 1, i)] = 1.0;
        }
    }
    let block = companion.view((0, 0), (degree, degree)).into_owned();
    let eigen = block.complex_eigenvalues();
    let dp = derivative(p);
    let mut roots = Vec::new();
    for z in eigen.iter() {
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut r = z.re;
        for _ in 0..8 {
            let d = eval(&dp, r);
            if d == 0.0 {
                break;
            }
            let step = eval(p, r) / d;
            r -= step;
            if step.abs() <= 1e-16 * (1.0 + r.abs()) {
                break;
            }
        }
        if r.is_finite() {
            roots.push(r);
        }
    }
    roots
}

/// Newton refinement of the depths against the three law-of-cosines
/// constraints; keeps the input when a step does not reduce the residual.
fn polish_depths(start: Vector3<f64>, sq: [f64; 3], cos: [f64; 3]) -> Vector3<f64> {
    let [a2, b2, c2] = sq;
    let [ca, cb, cg] = cos;
    let residual = |s: &Vector3<f64>| {
        Vector3::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * ca * s[1] * s[2] - a2,
            s[0] * s[0] + s[2] * s[2] - 2.0 * cb * s[0] * s[2] - b2,
            s[0] * s[0] + s[1] * s[1] - 2.0 * cg * s[0] * s[1] - c2,
        )
    };
    let mut s = start;
    let mut r = residual(&s);
    for _ in 0..10 {
        let jac = Matrix3::new(
            0.0,
            2.0 * s[1] - 2.0 * ca * s[2],
            2.0 * s[2] - 2.0 * ca * s[1],
            2.0 * s[0] - 2.0 * cb * s[2],
            0.0,
            2.0 * s[2] - 2.0 * cb * s[0],
            2.0 * s[0] - 2.0 * cg * s[1],
            2.0 * s[1] - 2.0 * cg * s[0],
            0.0,
        );
        let Some(inv) = jac.try_inverse() else { break };
        let candidate = s - inv * r;
        let rc = residual(&candidate);
        if rc.norm() >= r.norm() {
            break;
        }
        s = candidate;
        r = rc;
    }
    s
}

/// Rigid transform taking `world` onto `cam` (least squares, exact for a
/// non-degenerate triangle).
fn align_triplets(world: &[Vector3<f64>; 3], cam: &[Vector3<f64>; 3]) -> Option<CameraPose> {
    let wc = (world[0] + world[1] + world[2]) / 3.0;
    let cc = (cam[0] + cam[1] + cam[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (world[i] - wc) * (cam[i] - cc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = cc - rotation * wc;
    Some(CameraPose::from_matrix(&rotation, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Intrinsics};
    use crate::sfm::CameraId;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        let k = Intrinsics {
            fx: 500.0,
            fy: 520.0,
            cx: 320.0,
            cy: 240.0,
        };
        Camera::new(CameraId(0), k, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rotation = UnitQuaternion::from_scaled_axis(axis * 0.8);
        let translation = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..8.0));
        CameraPose::new(rotation, translation)
    }

    fn visible_sample(rng: &mut ChaCha8Rng, pose: &CameraPose, cam: &Camera) -> [Correspondence; 3] {
        let inv = pose.rotation.inverse();
        let mut out = Vec::new();
        while out.len() < 3 {
            let p_cam = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(3.0..9.0));
            let world = inv * (p_cam - pose.translation);
            let pixel = project(pose, cam, &world).unwrap();
            out.push(Correspondence { pixel, point: world });
        }
        [out[0], out[1], out[2]]
    }

    #[test]
    fn recovers_synthesized_pose() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let sample = visible_sample(&mut rng, &pose, &cam);
            let candidates = p3p(&sample, &cam).unwrap();
            let best = candidates
                .iter()
                .map(|c| c.rotation.angle_to(&pose.rotation))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "rotation error {best}");
            for c in &candidates {
                for s in &sample {
                    let uv = project(c, &cam, &s.point).unwrap();
                    assert!((uv - s.pixel).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_collinear_triple() {
        let cam = camera();
        let s = |x: f64| Correspondence {
            pixel: nalgebra::Vector2::new(300.0 + x, 200.0),
            point: Vector3::new(x, 2.0 * x, 5.0),
        };
        assert!(matches!(p3p(&[s(0.0), s(1.0), s(2.0)], &cam), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rejects_duplicated_point() {
        let cam = camera();
        let a = Correspondence {
            pixel: nalgebra::Vector2::new(300.0, 200.0),
            point: Vector3::new(0.0, 0.0, 5.0),
        };
        let b = Correspondence {
            pixel: nalgebra::Vector2::new(350.0, 210.0),
            point: Vector3::new(1.0, 0.0, 5.0),
        };
        assert!(matches!(p3p(&[a, b, a], &cam), Err(Error::Degenerate(_))));
    }
}
