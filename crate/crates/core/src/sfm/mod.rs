//! Sparse SfM map: cameras, registered images, triangulated points with
//! observation tracks, and the derived per-image point sets ("meta scenes").

pub(crate) mod format;

pub use format::{load_model, parse_model, save_model, write_model};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraPose};

macro_rules! id_type {
    ($name:ident, $label:literal) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{} {}", $label, self.0)
            }
        }
    };
}

id_type!(CameraId, "camera");
id_type!(ImageId, "image");
id_type!(PointId, "point");

pub(crate) const UNIT_NORM_TOLERANCE: f64 = 1e-6;
const ROTATION_TOLERANCE: f64 = 1e-9;

pub(crate) fn is_unit(v: &[f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm - 1.0).abs() < UNIT_NORM_TOLERANCE
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub position: Vector2<f64>,
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisteredImage {
    pub id: ImageId,
    pub camera_id: CameraId,
    pub pose: CameraPose,
    pub keypoints: Vec<Keypoint>,
    pub global_descriptor: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Observation {
    pub image_id: ImageId,
    pub keypoint_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point3D {
    pub id: PointId,
    pub position: Vector3<f64>,
    pub track: Vec<Observation>,
}

/// Points observed by a single registered image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaScene {
    pub image_id: ImageId,
    pub point_ids: BTreeSet<PointId>,
}

/// A validated, immutable SfM model.
#[derive(Clone, Debug, PartialEq)]
pub struct SfmModel {
    descriptor_dim: usize,
    global_dim: usize,
    cameras: BTreeMap<CameraId, Camera>,
    images: BTreeMap<ImageId, RegisteredImage>,
    points: BTreeMap<PointId, Point3D>,
    // Derived: per image, sorted ids of the points it observes, and the
    // owning point of each keypoint.
    scene_points: BTreeMap<ImageId, Vec<PointId>>,
    keypoint_owner: BTreeMap<ImageId, Vec<Option<PointId>>>,
}

impl SfmModel {
    /// Builds a model, checking every structural invariant.
    pub fn new(
        descriptor_dim: usize,
        global_dim: usize,
        cameras: Vec<Camera>,
        images: Vec<RegisteredImage>,
        points: Vec<Point3D>,
    ) -> Result<Self> {
        let mut camera_map = BTreeMap::new();
        for camera in cameras {
            let camera = Camera::new(camera.id, camera.intrinsics, camera.width, camera.height)?;
            if camera_map.insert(camera.id, camera).is_some() {
                return Err(Error::Integrity("duplicate camera id".into()));
            }
        }

        let mut image_map = BTreeMap::new();
        for image in images {
            let id = image.id;
            let camera = camera_map
                .get(&image.camera_id)
                .ok_or_else(|| Error::Integrity(format!("{id} references missing {}", image.camera_id)))?;
            let q = image.pose.rotation.quaternion();
            if (q.norm() - 1.0).abs() > ROTATION_TOLERANCE {
                return Err(Error::Integrity(format!("{id}: rotation quaternion is not unit norm")));
            }
            if image.pose.translation.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!("{id}: non-finite translation")));
            }
            if image.global_descriptor.len() != global_dim || !is_unit(&image.global_descriptor) {
                return Err(Error::Integrity(format!(
                    "{id}: global descriptor must be a unit {global_dim}-vector"
                )));
            }
            for (k, kp) in image.keypoints.iter().enumerate() {
                if kp.descriptor.len() != descriptor_dim || !is_unit(&kp.descriptor) {
                    return Err(Error::Integrity(format!(
                        "{id} keypoint {k}: descriptor must be a unit {descriptor_dim}-vector"
                    )));
                }
                if !camera.contains(&kp.position) {
                    return Err(Error::Integrity(format!("{id} keypoint {k}: outside the image")));
                }
            }
            if image_map.insert(id, image).is_some() {
                return Err(Error::Integrity(format!("duplicate {id}")));
            }
        }

        let mut keypoint_owner: BTreeMap<ImageId, Vec<Option<PointId>>> = image_map
            .iter()
            .map(|(id, img)| (*id, vec![None; img.keypoints.len()]))
            .collect();
        let mut scene_points: BTreeMap<ImageId, Vec<PointId>> =
            image_map.keys().map(|id| (*id, Vec::new())).collect();
        let mut point_map = BTreeMap::new();
        for point in points {
            let pid = point.id;
            if point.track.is_empty() {
                return Err(Error::Integrity(format!("{pid} has an empty track")));
            }
            if point.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!("{pid}: non-finite position")));
            }
            let mut seen = BTreeSet::new();
            for obs in &point.track {
                let owners = keypoint_owner
                    .get_mut(&obs.image_id)
                    .ok_or_else(|| Error::Integrity(format!("{pid} references missing {}", obs.image_id)))?;
                let slot = owners.get_mut(obs.keypoint_index).ok_or_else(|| {
                    Error::Integrity(format!(
                        "{pid} references missing keypoint {} of {}",
                        obs.keypoint_index, obs.image_id
                    ))
                })?;
                if !seen.insert(obs.image_id) {
                    return Err(Error::Integrity(format!(
                        "{pid} observed twice in {}",
                        obs.image_id
                    )));
                }
                if let Some(other) = slot {
                    return Err(Error::Integrity(format!(
                        "keypoint {} of {} claimed by {other} and {pid}",
                        obs.keypoint_index, obs.image_id
                    )));
                }
                *slot = Some(pid);
                scene_points.get_mut(&obs.image_id).expect("image exists").push(pid);
            }
            if point_map.insert(pid, point).is_some() {
                return Err(Error::Integrity(format!("duplicate {pid}")));
            }
        }
        for ids in scene_points.values_mut() {
            ids.sort_unstable();
        }

        Ok(Self {
            descriptor_dim,
            global_dim,
            cameras: camera_map,
            images: image_map,
            points: point_map,
            scene_points,
            keypoint_owner,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    pub fn cameras(&self) -> &BTreeMap<CameraId, Camera> {
        &self.cameras
    }

    pub fn images(&self) -> &BTreeMap<ImageId, RegisteredImage> {
        &self.images
    }

    pub fn points(&self) -> &BTreeMap<PointId, Point3D> {
        &self.points
    }

    pub fn camera(&self, id: CameraId) -> Result<&Camera> {
        self.cameras.get(&id).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    pub fn image(&self, id: ImageId) -> Result<&RegisteredImage> {
        self.images.get(&id).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    pub fn point(&self, id: PointId) -> Result<&Point3D> {
        self.points.get(&id).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// The 3D point triangulated from keypoint `keypoint_index` of `image`, if any.
    pub fn keypoint_owner(&self, image: ImageId, keypoint_index: usize) -> Option<PointId> {
        self.keypoint_owner
            .get(&image)
            .and_then(|owners| owners.get(keypoint_index).copied().flatten())
    }

    /// Sorted ids of the points observed by `image`.
    pub fn scene_point_ids(&self, image: ImageId) -> Result<&[PointId]> {
        self.scene_points
            .get(&image)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::NotFound(image.to_string()))
    }

    pub fn meta_scene(&self, image: ImageId) -> Result<MetaScene> {
        let ids = self.scene_point_ids(image)?;
        Ok(MetaScene {
            image_id: image,
            point_ids: ids.iter().copied().collect(),
        })
    }

    /// Number of points observed by both images.
    pub fn covisibility(&self, a: ImageId, b: ImageId) -> Result<usize> {
        Ok(sorted_intersection_len(
            self.scene_point_ids(a)?,
            self.scene_point_ids(b)?,
        ))
    }

    /// Unit-normalized mean of the track descriptors of `point`, optionally
    /// leaving out the observation in `exclude_image`.
    pub fn point_descriptor(&self, point: PointId, exclude_image: Option<ImageId>) -> Result<Vec<f64>> {
        let p = self.point(point)?;
        let mut sum = vec![0.0; self.descriptor_dim];
        let mut count = 0usize;
        for obs in p.track.iter().filter(|o| Some(o.image_id) != exclude_image) {
            let d = &self.images[&obs.image_id].keypoints[obs.keypoint_index].descriptor;
            for (s, v) in sum.iter_mut().zip(d) {
                *s += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Degenerate(format!(
                "{point} has no observations left after exclusion"
            )));
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 * count as f64 {
            return Err(Error::Degenerate(format!(
                "{point}: track descriptors cancel to a zero mean"
            )));
        }
        Ok(sum.into_iter().map(|x| x / norm).collect())
    }
}

pub(crate) fn sorted_intersection_len<T: Ord>(a: &[T], b: &[T]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}
