//! Seeded synthetic SfM scenes and query samples with exact ground truth.
//!
//! Points are uniform in a cube centred on the origin; registered cameras
//! sit on a horizontal ring around it (jittered height) and look at the
//! centre. Every point has a random unit "base" descriptor; observations
//! perturb it with Gaussian noise and re-normalize. A fraction of the
//! points are organised in pairs whose second member copies the first
//! member's base descriptor with a small perturbation, modelling repetitive
//! structure. Global descriptors are normalized sums of per-point random
//! signatures over the visible points, so retrieval similarity tracks view
//! overlap.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraPose, Intrinsics};
use crate::query::{Query, QuerySample};
use crate::sfm::{CameraId, ImageId, Keypoint, Observation, Point3D, PointId, RegisteredImage, SfmModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_points: usize,
    pub n_images: usize,
    pub descriptor_dim: usize,
    pub global_dim: usize,
    /// Per-dimension std-dev added to base descriptors for each observation.
    pub inlier_descriptor_noise: f64,
    /// Fraction of points that belong to a near-duplicate descriptor pair.
    pub distractor_fraction: f64,
    /// Per-dimension std-dev separating a copied descriptor from its source.
    pub distractor_noise: f64,
    pub keypoint_noise_px: f64,
    pub intrinsics: Intrinsics,
    pub width: u32,
    pub height: u32,
    /// Edge length of the cube holding the points (world units).
    pub world_extent: f64,
    /// Radius of the camera ring (world units).
    pub ring_radius: f64,
    /// Camera heights are uniform in `±height_jitter * world_extent`.
    pub height_jitter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 200,
            n_images: 24,
            descriptor_dim: 32,
            global_dim: 64,
            inlier_descriptor_noise: 0.06,
            distractor_fraction: 0.3,
            distractor_noise: 0.04,
            keypoint_noise_px: 1.0,
            intrinsics: Intrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
            },
            width: 640,
            height: 480,
            world_extent: 10.0,
            ring_radius: 8.0,
            height_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            self.inlier_descriptor_noise,
            self.distractor_noise,
            self.keypoint_noise_px,
            self.height_jitter,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("noise levels and jitter must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return Err(Error::invalid("distractor fraction must lie in [0, 1]"));
        }
        if self.descriptor_dim == 0 || self.global_dim == 0 {
            return Err(Error::invalid("descriptor dimensions must be positive"));
        }
        if !(self.world_extent > 0.0) {
            return Err(Error::invalid("world extent must be positive"));
        }
        if !(self.ring_radius >= 0.0) {
            return Err(Error::invalid("ring radius must be non-negative"));
        }
        if self.ring_radius == 0.0 && self.height_jitter == 0.0 && self.n_images > 0 {
            return Err(Error::Degenerate("all cameras placed at the scene centroid".into()));
        }
        self.camera(CameraId(0)).map(|_| ())
    }

    fn camera(&self, id: CameraId) -> Result<Camera> {
        Camera::new(id, self.intrinsics, self.width, self.height)
    }

    fn near_plane(&self) -> f64 {
        0.05 * self.world_extent
    }
}

/// A generated scene together with the hidden generation state.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub model: SfmModel,
    /// Base descriptor of every generated point, indexed by point id
    /// (including points no camera observed, which are absent from `model`).
    pub base_descriptors: Vec<Vec<f64>>,
    pub positions: Vec<Vector3<f64>>,
    /// `(source, copy)` pairs of near-duplicate base descriptors.
    pub distractor_pairs: Vec<(PointId, PointId)>,
}

struct SceneTruth {
    positions: Vec<Vector3<f64>>,
    base: Vec<Vec<f64>>,
    signatures: Vec<Vec<f64>>,
    pairs: Vec<(PointId, PointId)>,
}

pub fn generate_scene(config: &SceneConfig) -> Result<SfmModel> {
    generate_scene_with_truth(config).map(|s| s.model)
}

pub fn generate_scene_with_truth(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let truth = scene_truth(config);
    let mut rng = stream(config.seed, 1);
    let camera = config.camera(CameraId(0))?;

    let mut tracks: Vec<Vec<Observation>> = vec![Vec::new(); config.n_points];
    let mut images = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let azimuth = 2.0 * PI * i as f64 / config.n_images as f64;
        let z = rng.random_range(-1.0..=1.0) * config.height_jitter * config.world_extent;
        let center = Vector3::new(
            config.ring_radius * azimuth.cos(),
            config.ring_radius * azimuth.sin(),
            z,
        );
        let pose = CameraPose::look_at(&center, &Vector3::zeros(), &Vector3::z())?;
        let image_id = ImageId(i as u32);

        let mut observed = Vec::new();
        for (p, position) in truth.positions.iter().enumerate() {
            let Some(pixel) = observe(config, &camera, &pose, position, &mut rng) else {
                continue;
            };
            let descriptor = perturb(&truth.base[p], config.inlier_descriptor_noise, &mut rng);
            observed.push((p, Keypoint { position: pixel, descriptor }));
        }
        observed.shuffle(&mut rng);

        let global = signature_sum(observed.iter().map(|(p, _)| &truth.signatures[*p]), config.global_dim);
        let mut keypoints = Vec::with_capacity(observed.len());
        for (k, (p, kp)) in observed.into_iter().enumerate() {
            tracks[p].push(Observation {
                image_id,
                keypoint_index: k,
            });
            keypoints.push(kp);
        }
        images.push(RegisteredImage {
            id: image_id,
            camera_id: camera.id,
            pose,
            keypoints,
            global_descriptor: global,
        });
    }

    let points = tracks
        .into_iter()
        .enumerate()
        .filter(|(_, track)| !track.is_empty())
        .map(|(p, track)| Point3D {
            id: PointId(p as u32),
            position: truth.positions[p],
            track,
        })
        .collect();
    let model = SfmModel::new(
        config.descriptor_dim,
        config.global_dim,
        vec![camera],
        images,
        points,
    )?;
    Ok(SyntheticScene {
        model,
        base_descriptors: truth.base,
        positions: truth.positions,
        distractor_pairs: truth.pairs,
    })
}

/// Generates a query from a fresh pose near (but off) the camera ring.
///
/// `model` must come from [`generate_scene`] with the same `config`. Each
/// visible model point yields a noisy keypoint; `clutter_count` extra
/// keypoints with random positions and descriptors have no ground truth.
pub fn generate_query(
    model: &SfmModel,
    config: &SceneConfig,
    clutter_count: usize,
    seed: u64,
) -> Result<QuerySample> {
    config.validate()?;
    let truth = scene_truth(config);
    if model
        .points()
        .keys()
        .any(|id| id.0 as usize >= config.n_points)
    {
        return Err(Error::invalid("model was not generated from this configuration"));
    }
    let camera = model.camera(CameraId(0))?.clone();
    let mut rng = stream(mix(seed, config.seed), 2);

    let azimuth = rng.random_range(0.0..2.0 * PI);
    let radius = config.ring_radius * rng.random_range(0.9..1.1);
    let z = rng.random_range(-1.0..=1.0) * config.height_jitter * config.world_extent;
    let center = Vector3::new(radius * azimuth.cos(), radius * azimuth.sin(), z);
    let wobble = 0.05 * config.world_extent;
    let target = Vector3::new(
        rng.random_range(-wobble..=wobble),
        rng.random_range(-wobble..=wobble),
        rng.random_range(-wobble..=wobble),
    );
    let pose = CameraPose::look_at(&center, &target, &Vector3::z())?;

    let mut entries: Vec<(Option<PointId>, Keypoint)> = Vec::new();
    for (id, point) in model.points() {
        let Some(pixel) = observe(config, &camera, &pose, &point.position, &mut rng) else {
            continue;
        };
        let descriptor = perturb(&truth.base[id.0 as usize], config.inlier_descriptor_noise, &mut rng);
        entries.push((Some(*id), Keypoint { position: pixel, descriptor }));
    }
    if entries.len() < 4 {
        return Err(Error::Degenerate(format!(
            "query pose sees only {} points",
            entries.len()
        )));
    }
    let global = signature_sum(
        entries
            .iter()
            .filter_map(|(id, _)| id.map(|id| &truth.signatures[id.0 as usize])),
        config.global_dim,
    );
    for _ in 0..clutter_count {
        let pixel = Vector2::new(
            rng.random_range(0.0..config.width as f64),
            rng.random_range(0.0..config.height as f64),
        );
        let descriptor = random_unit(config.descriptor_dim, &mut rng);
        entries.push((None, Keypoint { position: pixel, descriptor }));
    }
    entries.shuffle(&mut rng);

    let mut gt = BTreeMap::new();
    let mut keypoints = Vec::with_capacity(entries.len());
    for (k, (id, kp)) in entries.into_iter().enumerate() {
        if let Some(id) = id {
            gt.insert(k, id);
        }
        keypoints.push(kp);
    }
    Ok(QuerySample {
        query: Query {
            camera_id: camera.id,
            keypoints,
            global_descriptor: global,
        },
        gt_pose: pose,
        gt_correspondences: gt,
    })
}

fn scene_truth(config: &SceneConfig) -> SceneTruth {
    let mut rng = stream(config.seed, 0);
    let half = 0.5 * config.world_extent;
    let positions: Vec<Vector3<f64>> = (0..config.n_points)
        .map(|_| {
            Vector3::new(
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
            )
        })
        .collect();
    let mut base: Vec<Vec<f64>> = (0..config.n_points)
        .map(|_| random_unit(config.descriptor_dim, &mut rng))
        .collect();

    let involved = distractor_count(config.n_points, config.distractor_fraction);
    let chosen = index::sample(&mut rng, config.n_points, involved).into_vec();
    let (sources, copies) = chosen.split_at(involved / 2);
    let mut pairs = Vec::with_capacity(sources.len());
    for (&src, &dst) in sources.iter().zip(copies) {
        base[dst] = perturb(&base[src], config.distractor_noise, &mut rng);
        pairs.push((PointId(src as u32), PointId(dst as u32)));
    }

    let mut sig_rng = stream(config.seed, 3);
    let signatures = (0..config.n_points)
        .map(|_| {
            (0..config.global_dim)
                .map(|_| StandardNormal.sample(&mut sig_rng))
                .collect()
        })
        .collect();
    SceneTruth {
        positions,
        base,
        signatures,
        pairs,
    }
}

/// Number of points that take part in a near-duplicate pair (always even).
pub fn distractor_count(n_points: usize, fraction: f64) -> usize {
    let n = (fraction * n_points as f64).round() as usize;
    n.min(n_points) & !1
}

fn observe(
    config: &SceneConfig,
    camera: &Camera,
    pose: &CameraPose,
    position: &Vector3<f64>,
    rng: &mut ChaCha8Rng,
) -> Option<Vector2<f64>> {
    let p = pose.transform(position);
    if p.z < config.near_plane() {
        return None;
    }
    let k = &camera.intrinsics;
    let exact = Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
    if !camera.contains(&exact) {
        return None;
    }
    let pixel = if config.keypoint_noise_px > 0.0 {
        let noise = Normal::new(0.0, config.keypoint_noise_px).expect("validated std-dev");
        exact + Vector2::new(noise.sample(rng), noise.sample(rng))
    } else {
        exact
    };
    camera.contains(&pixel).then_some(pixel)
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn perturb(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let noise = Normal::new(0.0, sigma).expect("validated std-dev");
    loop {
        let v: Vec<f64> = base.iter().map(|b| b + noise.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn signature_sum<'a>(signatures: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    for s in signatures {
        for (acc, v) in sum.iter_mut().zip(s) {
            *acc += v;
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        return e;
    }
    sum.into_iter().map(|x| x / norm).collect()
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64-style combination of two seeds.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::sfm::write_model;

    fn quiet() -> SceneConfig {
        SceneConfig {
            inlier_descriptor_noise: 0.0,
            keypoint_noise_px: 0.0,
            seed: 5,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let c = SceneConfig::default();
        let a = write_model(&generate_scene(&c).unwrap()).unwrap();
        let b = write_model(&generate_scene(&c).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SceneConfig { seed: 1, ..c };
        assert_ne!(a, write_model(&generate_scene(&other).unwrap()).unwrap());
    }

    #[test]
    fn zero_noise_keypoints_are_exact_projections() {
        let c = quiet();
        let scene = generate_scene_with_truth(&c).unwrap();
        let m = &scene.model;
        let cam = m.camera(CameraId(0)).unwrap();
        for point in m.points().values() {
            let first = &m.images()[&point.track[0].image_id].keypoints[point.track[0].keypoint_index].descriptor;
            for obs in &point.track {
                let image = &m.images()[&obs.image_id];
                let kp = &image.keypoints[obs.keypoint_index];
                let uv = project(&image.pose, cam, &point.position).unwrap();
                assert_eq!(kp.position, uv);
                assert_eq!(&kp.descriptor, first);
            }
        }
    }

    #[test]
    fn distractor_count_matches_fraction() {
        let c = SceneConfig {
            n_points: 100,
            distractor_fraction: 0.3,
            ..SceneConfig::default()
        };
        let scene = generate_scene_with_truth(&c).unwrap();
        // Exhaustive pairwise comparison of base descriptors: a point "shares"
        // a base descriptor when another base lies far closer than random
        // unit vectors do (those sit near sqrt(2)).
        let base = &scene.base_descriptors;
        let shared = (0..base.len())
            .filter(|&i| {
                (0..base.len()).any(|j| {
                    j != i && base[i].iter().zip(&base[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() < 0.6
                })
            })
            .count();
        assert_eq!(shared, 30);
        assert_eq!(scene.distractor_pairs.len(), 15);
    }

    #[test]
    fn all_cameras_at_centroid_is_degenerate() {
        let c = SceneConfig {
            ring_radius: 0.0,
            height_jitter: 0.0,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&c), Err(Error::Degenerate(_))));
    }

    #[test]
    fn query_bookkeeping() {
        let c = quiet();
        let m = generate_scene(&c).unwrap();
        let q = generate_query(&m, &c, 0, 3).unwrap();
        assert_eq!(q.gt_correspondences.len(), q.query.keypoints.len());
        let q = generate_query(&m, &c, 25, 3).unwrap();
        assert_eq!(q.gt_correspondences.len(), q.query.keypoints.len() - 25);
        let again = generate_query(&m, &c, 25, 3).unwrap();
        assert_eq!(q, again);
    }

    #[test]
    fn query_reprojection_within_three_sigma() {
        let c = SceneConfig {
            keypoint_noise_px: 1.5,
            ..SceneConfig::default()
        };
        let m = generate_scene(&c).unwrap();
        let cam = m.camera(CameraId(0)).unwrap();
        let (mut total, mut within) = (0, 0);
        for seed in 0..10 {
            let q = generate_query(&m, &c, 10, seed).unwrap();
            for (&k, id) in &q.gt_correspondences {
                let uv = project(&q.gt_pose, cam, &m.point(*id).unwrap().position).unwrap();
                assert!(cam.contains(&uv));
                let err = uv - q.query.keypoints[k].position;
                total += 1;
                if err.x.abs() <= 4.5 && err.y.abs() <= 4.5 {
                    within += 1;
                }
            }
        }
        assert!(within as f64 >= 0.99 * total as f64, "{within}/{total}");
    }
}
