//! GAMM v1: a whitespace-separated, line-oriented text encoding of [`SfmModel`].
//!
//! ```text
//! GAMM 1 <D> <G>
//! CAMERA <id> <fx> <fy> <cx> <cy> <width> <height>
//! IMAGE <id> <camera_id> <qw> <qx> <qy> <qz> <tx> <ty> <tz>
//! GDESC <g1> ... <gG>
//! KP <x> <y> <d1> ... <dD>
//! POINT <id> <X> <Y> <Z> <n> (<image_id> <kp_index>) x n
//! ```
//!
//! `#` starts a comment. Floats are written with 17 significant digits so
//! that a save/load cycle is bit-exact.

use std::fmt::Write;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};

use super::{CameraId, ImageId, Keypoint, Observation, Point3D, PointId, RegisteredImage, SfmModel};
use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraPose, Intrinsics};
use crate::textio::{lines, push_f64, push_f64s, Line};

pub fn load_model(path: impl AsRef<Path>) -> Result<SfmModel> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}

pub fn save_model(model: &SfmModel, path: impl AsRef<Path>) -> Result<()> {
    let text = write_model(model)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_model(text: &str) -> Result<SfmModel> {
    let mut iter = lines(text);
    let header = iter.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    if header.keyword() != "GAMM" {
        return Err(Error::parse(header.number, "missing GAMM header"));
    }
    header.expect_len(4)?;
    if header.int::<u32>(1)? != 1 {
        return Err(Error::parse(header.number, "unsupported GAMM version"));
    }
    let dim: usize = header.int(2)?;
    let global_dim: usize = header.int(3)?;

    let mut cameras = Vec::new();
    let mut images: Vec<RegisteredImage> = Vec::new();
    let mut has_global: Vec<bool> = Vec::new();
    let mut points = Vec::new();

    for line in iter {
        match line.keyword() {
            "CAMERA" => {
                line.expect_len(8)?;
                let intrinsics = Intrinsics {
                    fx: line.f64(2)?,
                    fy: line.f64(3)?,
                    cx: line.f64(4)?,
                    cy: line.f64(5)?,
                };
                cameras.push(Camera {
                    id: CameraId(line.int(1)?),
                    intrinsics,
                    width: line.int(6)?,
                    height: line.int(7)?,
                });
            }
            "IMAGE" => {
                line.expect_len(10)?;
                images.push(RegisteredImage {
                    id: ImageId(line.int(1)?),
                    camera_id: CameraId(line.int(2)?),
                    pose: parse_pose(&line, 3)?,
                    keypoints: Vec::new(),
                    global_descriptor: Vec::new(),
                });
                has_global.push(false);
            }
            "GDESC" => {
                line.expect_len(global_dim + 1)?;
                let image = images
                    .last_mut()
                    .ok_or_else(|| Error::parse(line.number, "GDESC before any IMAGE"))?;
                let seen = has_global.last_mut().expect("parallel to images");
                if *seen {
                    return Err(Error::parse(line.number, "second GDESC for one image"));
                }
                *seen = true;
                image.global_descriptor = line.f64_run(1, global_dim)?;
            }
            "KP" => {
                line.expect_len(dim + 3)?;
                let image = images
                    .last_mut()
                    .ok_or_else(|| Error::parse(line.number, "KP before any IMAGE"))?;
                image.keypoints.push(Keypoint {
                    position: Vector2::new(line.f64(1)?, line.f64(2)?),
                    descriptor: line.f64_run(3, dim)?,
                });
            }
            "POINT" => {
                if line.tokens.len() < 6 {
                    return Err(Error::parse(line.number, "POINT line too short"));
                }
                let n: usize = line.int(5)?;
                line.expect_len(6 + 2 * n)?;
                let track = (0..n)
                    .map(|i| {
                        Ok(Observation {
                            image_id: ImageId(line.int(6 + 2 * i)?),
                            keypoint_index: line.int(7 + 2 * i)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                points.push(Point3D {
                    id: PointId(line.int(1)?),
                    position: Vector3::new(line.f64(2)?, line.f64(3)?, line.f64(4)?),
                    track,
                });
            }
            other => {
                return Err(Error::parse(line.number, format!("unknown record '{other}'")));
            }
        }
    }
    if let Some(i) = has_global.iter().position(|seen| !seen) {
        return Err(Error::Integrity(format!("{} has no GDESC line", images[i].id)));
    }
    SfmModel::new(dim, global_dim, cameras, images, points)
}

pub(crate) fn parse_pose(line: &Line<'_>, start: usize) -> Result<CameraPose> {
    let q = Quaternion::new(
        line.f64(start)?,
        line.f64(start + 1)?,
        line.f64(start + 2)?,
        line.f64(start + 3)?,
    );
    let t = Vector3::new(line.f64(start + 4)?, line.f64(start + 5)?, line.f64(start + 6)?);
    // Kept bit-exact; the model constructor checks the norm.
    Ok(CameraPose::new(UnitQuaternion::new_unchecked(q), t))
}

pub(crate) fn push_pose(out: &mut String, pose: &CameraPose) -> Result<()> {
    let q = pose.rotation.quaternion();
    push_f64s(out, &[q.w, q.i, q.j, q.k])?;
    push_f64s(out, pose.translation.as_slice())
}

/// Canonical GAMM text for `model`: cameras, images and points in ascending
/// id order. Fails on non-finite values.
pub fn write_model(model: &SfmModel) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "GAMM 1 {} {}", model.descriptor_dim(), model.global_dim()).unwrap();
    for camera in model.cameras().values() {
        let k = &camera.intrinsics;
        write!(out, "CAMERA {}", camera.id.0).unwrap();
        push_f64s(&mut out, &[k.fx, k.fy, k.cx, k.cy])?;
        writeln!(out, " {} {}", camera.width, camera.height).unwrap();
    }
    for image in model.images().values() {
        write!(out, "IMAGE {} {}", image.id.0, image.camera_id.0).unwrap();
        push_pose(&mut out, &image.pose)?;
        out.push_str("\nGDESC");
        push_f64s(&mut out, &image.global_descriptor)?;
        out.push('\n');
        for kp in &image.keypoints {
            out.push_str("KP");
            push_f64(&mut out, kp.position.x)?;
            push_f64(&mut out, kp.position.y)?;
            push_f64s(&mut out, &kp.descriptor)?;
            out.push('\n');
        }
    }
    for point in model.points().values() {
        write!(out, "POINT {}", point.id.0).unwrap();
        push_f64s(&mut out, point.position.as_slice())?;
        write!(out, " {}", point.track.len()).unwrap();
        for obs in &point.track {
            write!(out, " {} {}", obs.image_id.0, obs.keypoint_index).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfm::fixtures::small_model;

    const MINIMAL: &str = "# one camera, one image\n\
        GAMM 1 2 2\n\
        CAMERA 1 100 100 50 40 100 80\n\
        IMAGE 3 1 1 0 0 0 0 0 0\n\
        GDESC 0 1\n\
        KP 10.5 20 1 0\n";

    #[test]
    fn parses_minimal_file() {
        let m = parse_model(MINIMAL).unwrap();
        assert_eq!(m.points().len(), 0);
        assert_eq!(m.images()[&ImageId(3)].keypoints.len(), 1);
    }

    #[test]
    fn canonical_text_round_trips() {
        let m = parse_model(MINIMAL).unwrap();
        let canonical = write_model(&m).unwrap();
        let again = write_model(&parse_model(&canonical).unwrap()).unwrap();
        assert_eq!(canonical, again);
    }

    #[test]
    fn model_round_trip_and_determinism() {
        let m = small_model();
        let text = write_model(&m).unwrap();
        assert_eq!(parse_model(&text).unwrap(), m);
        assert_eq!(text, write_model(&m).unwrap());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = MINIMAL.replace("KP 10.5 20 1 0", "KP 10.5 twenty 1 0");
        match parse_model(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
        let nan = MINIMAL.replace("KP 10.5", "KP NaN");
        assert!(matches!(parse_model(&nan), Err(Error::Parse { line: 6, .. })));
    }

    #[test]
    fn dangling_track_reference_names_image() {
        let text = format!("{MINIMAL}POINT 1 0 0 1 1 99 0\n");
        let err = parse_model(&text).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        assert!(err.to_string().contains("image 99"));
    }

    #[test]
    fn non_finite_values_are_not_serializable() {
        let mut out = String::new();
        assert!(matches!(push_f64(&mut out, f64::NAN), Err(Error::Serialization(_))));
        assert!(matches!(push_f64(&mut out, f64::INFINITY), Err(Error::Serialization(_))));
    }
}
