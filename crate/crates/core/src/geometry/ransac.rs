//! Prior-guided RANSAC around the P3P minimal solver.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{p3p, project_camera_point, Camera, CameraPose};
use crate::error::{Error, Result};

/// One 2D-3D correspondence: observed pixel and world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    /// Target probability of having drawn one all-inlier sample; drives the
    /// adaptive iteration bound.
    pub confidence: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            inlier_threshold_px: 8.0,
            confidence: 0.999,
            min_inliers: 12,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold_px > 0.0) || !self.inlier_threshold_px.is_finite() {
            return Err(Error::invalid("inlier threshold must be positive"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::invalid("confidence must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacOutcome {
    /// Best hypothesis, present only when it reached `min_inliers`.
    pub pose: Option<CameraPose>,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Iterations actually run.
    pub iterations: usize,
    /// Zero-based iteration at which some hypothesis first reached
    /// `min_inliers`.
    pub first_success_iteration: Option<usize>,
    /// Zero-based iteration that produced the returned hypothesis.
    pub best_iteration: Option<usize>,
}

impl RansacOutcome {
    pub fn succeeded(&self) -> bool {
        self.pose.is_some()
    }
}

/// Robust absolute pose. Minimal samples of three distinct correspondences
/// are drawn with probability proportional to `weights` (uniformly when all
/// weights are equal or zero). The returned mask marks correspondences whose
/// reprojection error is below the threshold under the best hypothesis; the
/// earliest iteration wins ties.
pub fn ransac_pnp(
    correspondences: &[Correspondence],
    weights: &[f64],
    camera: &Camera,
    config: &RansacConfig,
) -> Result<RansacOutcome> {
    config.validate()?;
    let n = correspondences.len();
    if n < 4 {
        return Err(Error::invalid(format!(
            "RANSAC needs at least 4 correspondences, got {n}"
        )));
    }
    if weights.len() != n {
        return Err(Error::invalid("weights and correspondences differ in length"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("sampling weights must be finite and non-negative"));
    }

    let sampler = WeightedSampler::new(weights);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let threshold2 = config.inlier_threshold_px * config.inlier_threshold_px;

    let mut best: Option<(CameraPose, usize, usize)> = None;
    let mut first_success = None;
    let mut bound = config.max_iterations;
    let mut iteration = 0;
    while iteration < bound {
        let [a, b, c] = sampler.draw(&mut rng);
        let sample = [correspondences[a], correspondences[b], correspondences[c]];
        if let Ok(candidates) = p3p(&sample, camera) {
            for pose in candidates {
                let count = count_inliers(&pose, correspondences, camera, threshold2);
                if count >= config.min_inliers && first_success.is_none() {
                    first_success = Some(iteration);
                }
                if best.as_ref().is_none_or(|(_, best_count, _)| count > *best_count) {
                    best = Some((pose, count, iteration));
                    bound = bound.min(adaptive_bound(count, n, config.confidence).max(iteration + 1));
                }
            }
        }
        iteration += 1;
    }

    let (pose, inliers, inlier_count, best_iteration) = match best {
        Some((pose, count, at)) => {
            let mask = inlier_mask(&pose, correspondences, camera, threshold2);
            (Some(pose), mask, count, Some(at))
        }
        None => (None, vec![false; n], 0, None),
    };
    let success = inlier_count >= config.min_inliers;
    Ok(RansacOutcome {
        pose: if success { pose } else { None },
        inliers,
        inlier_count,
        iterations: iteration,
        first_success_iteration: first_success,
        best_iteration,
    })
}

pub(crate) fn inlier_mask(
    pose: &CameraPose,
    correspondences: &[Correspondence],
    camera: &Camera,
    threshold2: f64,
) -> Vec<bool> {
    correspondences
        .iter()
        .map(|c| is_inlier(pose, c, camera, threshold2))
        .collect()
}

fn count_inliers(
    pose: &CameraPose,
    correspondences: &[Correspondence],
    camera: &Camera,
    threshold2: f64,
) -> usize {
    correspondences
        .iter()
        .filter(|c| is_inlier(pose, c, camera, threshold2))
        .count()
}

fn is_inlier(pose: &CameraPose, c: &Correspondence, camera: &Camera, threshold2: f64) -> bool {
    project_camera_point(&pose.transform(&c.point), &camera.intrinsics)
        .map(|uv| (uv - c.pixel).norm_squared() < threshold2)
        .unwrap_or(false)
}

/// Number of iterations needed to draw an all-inlier triple with the
/// requested confidence, given the current inlier ratio.
fn adaptive_bound(inliers: usize, n: usize, confidence: f64) -> usize {
    let ratio = inliers as f64 / n as f64;
    let p_good = ratio.powi(3);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let needed = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if needed.is_finite() {
        needed.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Draws three distinct indices, each with probability proportional to its
/// weight among the indices not yet drawn.
struct WeightedSampler<'a> {
    weights: &'a [f64],
    uniform: bool,
}

impl<'a> WeightedSampler<'a> {
    fn new(weights: &'a [f64]) -> Self {
        let first = weights[0];
        let uniform = weights.iter().all(|&w| w == first) || weights.iter().all(|&w| w == 0.0);
        Self { weights, uniform }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> [usize; 3] {
        let n = self.weights.len();
        let mut chosen = [usize::MAX; 3];
        for slot in 0..3 {
            let taken = &chosen[..slot];
            let total: f64 = if self.uniform {
                0.0
            } else {
                (0..n)
                    .filter(|i| !taken.contains(i))
                    .map(|i| self.weights[i])
                    .sum()
            };
            chosen[slot] = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = None;
                let mut last_positive = None;
                for i in (0..n).filter(|i| !taken.contains(i)) {
                    let w = self.weights[i];
                    if w > 0.0 {
                        last_positive = Some(i);
                        acc += w;
                        if acc > target {
                            pick = Some(i);
                            break;
                        }
                    }
                }
                pick.or(last_positive).expect("positive total implies a positive weight")
            } else {
                let k = rng.random_range(0..n - slot);
                (0..n)
                    .filter(|i| !taken.contains(i))
                    .nth(k)
                    .expect("k indexes the remaining pool")
            };
        }
        chosen
    }
}
