//! Hierarchical localization: retrieval → scene expansion → per-scene
//! matching → prior-guided RANSAC → refinement, with early stop.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::bmnet::{forward, hungarian_pooling, BmnetParams};
use crate::error::{Error, Result};
use crate::eval::{pose_report, PoseReport, DEFAULT_THRESHOLDS};
use crate::geometry::{
    inlier_mask, pose_error, ransac_pnp, refine_pose, Camera, CameraPose, Correspondence, RansacConfig,
};
use crate::matcher::{
    baseline_from_distances, build_graph, descriptor_distances, knn_ratio_from_distances, BaselineMode, CandidateEdge,
    DEFAULT_K, DEFAULT_RATIO,
};
use crate::query::{Query, QuerySample};
use crate::retrieval::{expand_scenes, retrieve_images, ExpandedScene, DEFAULT_EXPAND_M, DEFAULT_TOP_R};
use crate::sfm::{is_unit, PointId, SfmModel};
use crate::synth::mix;

/// How candidate matches are turned into the correspondences fed to RANSAC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MatchStrategy {
    /// kNN-ratio candidates, network weights, Hungarian pooling.
    Gam,
    /// kNN-ratio candidates and network weights, keeping `w > threshold`
    /// without the one-to-one constraint.
    Plain { threshold: f64 },
    /// A descriptor-only matcher; every match gets weight 1.
    Baseline { mode: BaselineMode, threshold: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub k: usize,
    pub ratio: f64,
    pub top_r: usize,
    pub expand_m: usize,
    pub ransac: RansacConfig,
    pub early_stop_inliers: usize,
    /// Upper bound on processed scenes; `None` processes all of them.
    pub max_scenes: Option<usize>,
    pub strategy: MatchStrategy,
    /// Record wall-clock stage timings. Off by default so results are
    /// bit-identical across runs.
    pub timings: bool,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            ratio: DEFAULT_RATIO,
            top_r: DEFAULT_TOP_R,
            expand_m: DEFAULT_EXPAND_M,
            ransac: RansacConfig::default(),
            early_stop_inliers: 50,
            max_scenes: None,
            strategy: MatchStrategy::Gam,
            timings: false,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.ransac.validate()?;
        if self.k == 0 || self.top_r == 0 || self.expand_m == 0 || self.max_scenes == Some(0) {
            return Err(Error::invalid("K, R, m and max scenes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::invalid("ratio must lie in [0, 1]"));
        }
        if self.early_stop_inliers < self.ransac.min_inliers {
            return Err(Error::invalid("early-stop inliers must be at least min_inliers"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub retrieval: f64,
    pub matching: f64,
    pub bmnet: f64,
    pub ransac: f64,
    pub refine: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// A match that reached the pose solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMatch {
    pub keypoint_index: usize,
    pub point_id: PointId,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    pub status: Status,
    pub pose: Option<CameraPose>,
    pub inlier_count: usize,
    /// Index into the expanded-scene list of the scene whose result is
    /// reported (also set on failure when some scene produced matches).
    pub scene_index_used: Option<usize>,
    pub scenes_processed: usize,
    pub timings_ms: StageTimings,
    /// Matches selected in the reported scene, with their weights.
    pub matches: Vec<SceneMatch>,
    pub reason: Option<String>,
}

impl LocalizationResult {
    fn failed(reason: impl Into<String>) -> Self {
        Self {
            status: Status::Failed,
            pose: None,
            inlier_count: 0,
            scene_index_used: None,
            scenes_processed: 0,
            timings_ms: StageTimings::default(),
            matches: Vec::new(),
            reason: Some(reason.into()),
        }
    }
}

struct SceneOutcome {
    pose: Option<CameraPose>,
    inlier_count: usize,
    matches: Vec<SceneMatch>,
}

struct Stopwatch(Option<Instant>);

impl Stopwatch {
    fn start(enabled: bool) -> Self {
        Stopwatch(enabled.then(Instant::now))
    }

    fn add_to(&self, slot: &mut f64) {
        if let Some(t) = self.0 {
            *slot += t.elapsed().as_secs_f64() * 1e3;
        }
    }
}

/// A model prepared for repeated localization: full-track point
/// descriptors are computed once.
pub struct Localizer<'a> {
    model: &'a SfmModel,
    params: &'a BmnetParams,
    config: LocalizeConfig,
    descriptors: BTreeMap<PointId, Vec<f64>>,
}

impl<'a> Localizer<'a> {
    pub fn new(model: &'a SfmModel, params: &'a BmnetParams, config: LocalizeConfig) -> Result<Self> {
        config.validate()?;
        let mut descriptors = BTreeMap::new();
        for &id in model.points().keys() {
            match model.point_descriptor(id, None) {
                Ok(d) => {
                    descriptors.insert(id, d);
                }
                Err(Error::Degenerate(msg)) => log::debug!("skipping {id}: {msg}"),
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            model,
            params,
            config,
            descriptors,
        })
    }

    pub fn config(&self) -> &LocalizeConfig {
        &self.config
    }

    /// Localizes one query. Invalid input is an error; failing to find a
    /// pose is a `Failed` result.
    pub fn localize(&self, query: &Query) -> Result<LocalizationResult> {
        let camera = self.model.camera(query.camera_id)?;
        if query.keypoints.len() < 4 {
            return Err(Error::invalid("query needs at least 4 keypoints"));
        }
        for (i, kp) in query.keypoints.iter().enumerate() {
            if kp.descriptor.len() != self.model.descriptor_dim() || !is_unit(&kp.descriptor) {
                return Err(Error::invalid(format!("query keypoint {i} has an invalid descriptor")));
            }
        }
        let mut timings = StageTimings::default();

        let clock = Stopwatch::start(self.config.timings);
        let retrieved = retrieve_images(self.model, &query.global_descriptor, self.config.top_r)?;
        let mut scenes = expand_scenes(self.model, &retrieved, self.config.expand_m)?;
        clock.add_to(&mut timings.retrieval);
        if let Some(max) = self.config.max_scenes {
            scenes.truncate(max);
        }
        if scenes.is_empty() {
            return Ok(LocalizationResult::failed("retrieval returned no scenes"));
        }

        let mut best: Option<(usize, SceneOutcome)> = None;
        let mut processed = 0;
        for (index, scene) in scenes.iter().enumerate() {
            processed += 1;
            let outcome = match self.localize_in_scene(query, camera, scene, index, &mut timings) {
                Ok(o) => o,
                Err(e) => {
                    log::debug!("scene {index} skipped: {e}");
                    continue;
                }
            };
            let early = outcome.pose.is_some() && outcome.inlier_count >= self.config.early_stop_inliers;
            let better = match &best {
                None => true,
                Some((_, b)) => outcome.inlier_count > b.inlier_count,
            };
            if better {
                best = Some((index, outcome));
            }
            if early {
                break;
            }
        }

        let Some((index, outcome)) = best else {
            let mut result = LocalizationResult::failed("no scene produced candidate matches");
            result.scenes_processed = processed;
            result.timings_ms = timings;
            return Ok(result);
        };
        let ok = outcome.pose.is_some() && outcome.inlier_count >= self.config.ransac.min_inliers;
        Ok(LocalizationResult {
            status: if ok { Status::Ok } else { Status::Failed },
            pose: if ok { outcome.pose } else { None },
            inlier_count: outcome.inlier_count,
            scene_index_used: Some(index),
            scenes_processed: processed,
            timings_ms: timings,
            matches: outcome.matches,
            reason: (!ok).then(|| "no scene reached the minimum inlier count".to_string()),
        })
    }

    fn localize_in_scene(
        &self,
        query: &Query,
        camera: &Camera,
        scene: &ExpandedScene,
        index: usize,
        timings: &mut StageTimings,
    ) -> Result<SceneOutcome> {
        let clock = Stopwatch::start(self.config.timings);
        let ids: Vec<PointId> = scene
            .point_ids
            .iter()
            .copied()
            .filter(|id| self.descriptors.contains_key(id))
            .collect();
        let point_desc: Vec<Vec<f64>> = ids.iter().map(|id| self.descriptors[id].clone()).collect();
        let query_desc: Vec<Vec<f64>> = query.keypoints.iter().map(|k| k.descriptor.clone()).collect();
        let distances = descriptor_distances(&query_desc, &point_desc)?;

        let (edges, weights): (Vec<CandidateEdge>, Vec<f64>) = match self.config.strategy {
            MatchStrategy::Baseline { mode, threshold } => {
                let edges = baseline_from_distances(&distances, mode, threshold)?;
                clock.add_to(&mut timings.matching);
                let n = edges.len();
                (edges, vec![1.0; n])
            }
            MatchStrategy::Gam | MatchStrategy::Plain { .. } => {
                let candidates = knn_ratio_from_distances(&distances, self.config.k, self.config.ratio)?;
                let positions: Vec<Vector2<f64>> = query.keypoints.iter().map(|k| k.position).collect();
                let points: Vec<(PointId, Vector3<f64>)> = ids
                    .iter()
                    .map(|id| (*id, self.model.points()[id].position))
                    .collect();
                let graph = build_graph(&positions, &points, &candidates)?.with_intrinsics(camera.intrinsics);
                clock.add_to(&mut timings.matching);

                let clock = Stopwatch::start(self.config.timings);
                let (w, _) = forward(self.params, &graph)?;
                let keep = match self.config.strategy {
                    MatchStrategy::Plain { threshold } => w.iter().map(|&x| x > threshold).collect(),
                    _ => hungarian_pooling(&graph, &w),
                };
                clock.add_to(&mut timings.bmnet);
                // Selected edges expressed in the original keypoint/point indexing.
                let mut edges = Vec::new();
                let mut weights = Vec::new();
                for (k, e) in graph.edges.iter().enumerate().filter(|(k, _)| keep[*k]) {
                    let (kp, pid) = graph.endpoints(k);
                    let v = ids.binary_search(&pid).expect("graph point comes from the scene");
                    edges.push(CandidateEdge { u_index: kp, v_index: v, ..*e });
                    weights.push(w[k]);
                }
                (edges, weights)
            }
        };

        let matches: Vec<SceneMatch> = edges
            .iter()
            .zip(&weights)
            .map(|(e, &weight)| SceneMatch {
                keypoint_index: e.u_index,
                point_id: ids[e.v_index],
                weight,
            })
            .collect();
        let correspondences: Vec<Correspondence> = edges
            .iter()
            .map(|e| Correspondence {
                pixel: query.keypoints[e.u_index].position,
                point: self.model.points()[&ids[e.v_index]].position,
            })
            .collect();
        if correspondences.len() < 4 {
            return Ok(SceneOutcome {
                pose: None,
                inlier_count: 0,
                matches,
            });
        }

        let clock = Stopwatch::start(self.config.timings);
        let ransac_config = RansacConfig {
            seed: mix(self.config.ransac.seed, index as u64),
            ..self.config.ransac.clone()
        };
        let outcome = ransac_pnp(&correspondences, &weights, camera, &ransac_config)?;
        clock.add_to(&mut timings.ransac);
        let Some(pose) = outcome.pose else {
            return Ok(SceneOutcome {
                pose: None,
                inlier_count: outcome.inlier_count,
                matches,
            });
        };

        let clock = Stopwatch::start(self.config.timings);
        let inliers: Vec<Correspondence> = correspondences
            .iter()
            .zip(&outcome.inliers)
            .filter(|(_, &keep)| keep)
            .map(|(c, _)| *c)
            .collect();
        let refined = match refine_pose(&pose, &inliers, camera) {
            Ok(r) if !r.degenerate => r.pose,
            _ => pose,
        };
        let threshold2 = self.config.ransac.inlier_threshold_px.powi(2);
        let mask = inlier_mask(&refined, &correspondences, camera, threshold2);
        let count = mask.iter().filter(|&&m| m).count();
        clock.add_to(&mut timings.refine);
        // Keep whichever of the RANSAC and refined poses explains more matches.
        let (pose, inlier_count) = if count >= outcome.inlier_count {
            (refined, count)
        } else {
            (pose, outcome.inlier_count)
        };
        Ok(SceneOutcome {
            pose: Some(pose),
            inlier_count,
            matches,
        })
    }
}

pub fn localize(model: &SfmModel, params: &BmnetParams, query: &Query, config: &LocalizeConfig) -> Result<LocalizationResult> {
    Localizer::new(model, params, config.clone())?.localize(query)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchSummary {
    pub queries: usize,
    pub localized: usize,
    pub pose: PoseReport,
}

/// Localizes every sample independently. With ground truth available the
/// summary reports pose errors and recall at the default thresholds.
pub fn localize_batch(
    model: &SfmModel,
    params: &BmnetParams,
    samples: &[QuerySample],
    config: &LocalizeConfig,
) -> Result<(Vec<LocalizationResult>, BatchSummary)> {
    if samples.is_empty() {
        return Err(Error::invalid("empty query batch"));
    }
    let localizer = Localizer::new(model, params, config.clone())?;
    let results = samples
        .iter()
        .map(|s| localizer.localize(&s.query))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(samples, &results);
    Ok((results, summary))
}

pub fn summarize(samples: &[QuerySample], results: &[LocalizationResult]) -> BatchSummary {
    let errors: Vec<Option<(f64, f64)>> = samples
        .iter()
        .zip(results)
        .map(|(s, r)| r.pose.as_ref().map(|p| pose_error(p, &s.gt_pose)))
        .collect();
    BatchSummary {
        queries: results.len(),
        localized: results.iter().filter(|r| r.status == Status::Ok).count(),
        pose: pose_report(&errors, &DEFAULT_THRESHOLDS),
    }
}
