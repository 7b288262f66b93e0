//! Query images and the GAMQ sidecar format.
//!
//! ```text
//! GAMQ 1 <D> <G>
//! QUERY <camera_id> <qw> <qx> <qy> <qz> <tx> <ty> <tz>   # ground-truth pose
//! GDESC <g1> ... <gG>
//! KP <x> <y> <d1> ... <dD>
//! GT <kp_index> <point_id>
//! ```
//!
//! A file holds any number of QUERY blocks.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::sfm::{CameraId, Keypoint, PointId};
use crate::textio::{lines, push_f64, push_f64s};

/// What the localizer sees of a query image.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub camera_id: CameraId,
    pub keypoints: Vec<Keypoint>,
    pub global_descriptor: Vec<f64>,
}

/// A query together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySample {
    pub query: Query,
    pub gt_pose: CameraPose,
    /// Keypoint index to true 3D point; clutter keypoints have no entry.
    pub gt_correspondences: BTreeMap<usize, PointId>,
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QuerySample>> {
    parse_queries(&std::fs::read_to_string(path)?)
}

pub fn save_queries(samples: &[QuerySample], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_queries(samples)?)?;
    Ok(())
}

pub fn parse_queries(text: &str) -> Result<Vec<QuerySample>> {
    let mut iter = lines(text);
    let header = iter.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    if header.keyword() != "GAMQ" {
        return Err(Error::parse(header.number, "missing GAMQ header"));
    }
    header.expect_len(4)?;
    if header.int::<u32>(1)? != 1 {
        return Err(Error::parse(header.number, "unsupported GAMQ version"));
    }
    let dim: usize = header.int(2)?;
    let global_dim: usize = header.int(3)?;

    let mut samples: Vec<QuerySample> = Vec::new();
    for line in iter {
        if line.keyword() == "QUERY" {
            line.expect_len(9)?;
            samples.push(QuerySample {
                query: Query {
                    camera_id: CameraId(line.int(1)?),
                    keypoints: Vec::new(),
                    global_descriptor: Vec::new(),
                },
                gt_pose: crate::sfm::format::parse_pose(&line, 2)?,
                gt_correspondences: BTreeMap::new(),
            });
            continue;
        }
        let sample = samples
            .last_mut()
            .ok_or_else(|| Error::parse(line.number, "record before any QUERY"))?;
        match line.keyword() {
            "GDESC" => {
                line.expect_len(global_dim + 1)?;
                if !sample.query.global_descriptor.is_empty() {
                    return Err(Error::parse(line.number, "second GDESC for one query"));
                }
                sample.query.global_descriptor = line.f64_run(1, global_dim)?;
            }
            "KP" => {
                line.expect_len(dim + 3)?;
                sample.query.keypoints.push(Keypoint {
                    position: Vector2::new(line.f64(1)?, line.f64(2)?),
                    descriptor: line.f64_run(3, dim)?,
                });
            }
            "GT" => {
                line.expect_len(3)?;
                let kp: usize = line.int(1)?;
                if sample
                    .gt_correspondences
                    .insert(kp, PointId(line.int(2)?))
                    .is_some()
                {
                    return Err(Error::parse(line.number, format!("duplicate GT for keypoint {kp}")));
                }
            }
            other => {
                return Err(Error::parse(line.number, format!("unknown record '{other}'")));
            }
        }
    }
    for (i, s) in samples.iter().enumerate() {
        if s.query.global_descriptor.len() != global_dim {
            return Err(Error::Integrity(format!("query {i} has no GDESC line")));
        }
        if let Some((&kp, _)) = s
            .gt_correspondences
            .range(s.query.keypoints.len()..)
            .next()
        {
            return Err(Error::Integrity(format!("query {i}: GT references missing keypoint {kp}")));
        }
    }
    Ok(samples)
}

pub fn write_queries(samples: &[QuerySample]) -> Result<String> {
    let (dim, global_dim) = samples
        .first()
        .map(|s| {
            (
                s.query.keypoints.first().map_or(0, |k| k.descriptor.len()),
                s.query.global_descriptor.len(),
            )
        })
        .unwrap_or((0, 0));
    let mut out = String::new();
    writeln!(out, "GAMQ 1 {dim} {global_dim}").unwrap();
    for s in samples {
        if s.query.global_descriptor.len() != global_dim
            || s.query.keypoints.iter().any(|k| k.descriptor.len() != dim)
        {
            return Err(Error::Serialization("queries disagree on descriptor sizes".into()));
        }
        write!(out, "QUERY {}", s.query.camera_id.0).unwrap();
        crate::sfm::format::push_pose(&mut out, &s.gt_pose)?;
        out.push_str("\nGDESC");
        push_f64s(&mut out, &s.query.global_descriptor)?;
        out.push('\n');
        for kp in &s.query.keypoints {
            out.push_str("KP");
            push_f64(&mut out, kp.position.x)?;
            push_f64(&mut out, kp.position.y)?;
            push_f64s(&mut out, &kp.descriptor)?;
            out.push('\n');
        }
        for (kp, pid) in &s.gt_correspondences {
            writeln!(out, "GT {kp} {}", pid.0).unwrap();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "GAMQ 1 2 2\n\
        QUERY 1 1 0 0 0 0.5 0 0\n\
        GDESC 1 0\n\
        KP 3 4 0 1\n\
        KP 5 6 1 0\n\
        GT 1 42\n";

    #[test]
    fn round_trip() {
        let samples = parse_queries(TEXT).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].gt_correspondences[&1], PointId(42));
        let text = write_queries(&samples).unwrap();
        assert_eq!(parse_queries(&text).unwrap(), samples);
        assert_eq!(text, write_queries(&parse_queries(&text).unwrap()).unwrap());
    }

    #[test]
    fn gt_must_reference_existing_keypoint() {
        let bad = TEXT.replace("GT 1 42", "GT 7 42");
        assert!(matches!(parse_queries(&bad), Err(Error::Integrity(_))));
    }

    #[test]
    fn records_need_a_query() {
        assert!(matches!(
            parse_queries("GAMQ 1 2 2\nKP 1 2 1 0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
