//! Training-graph mining from SfM models and SGD training of the network.

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bmnet::{backward, forward, hungarian_pooling, Architecture, BmnetParams};
pub use crate::bmnet::loss;
use crate::error::{Error, Result};
use crate::eval::MatchReport;
use crate::matcher::{build_graph, knn_ratio_match, BipartiteGraph, CandidateEdge, DEFAULT_K, DEFAULT_RATIO};
use crate::sfm::{ImageId, PointId, SfmModel};
use crate::synth::mix;

/// How candidate (and hence negative) edges are produced for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// The kNN-ratio matcher used at inference.
    KnnRatio,
    /// `K` uniformly random 3D points per keypoint (ablation).
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n2d: usize,
    pub n3d: usize,
    pub k: usize,
    pub ratio: f64,
    pub seed: u64,
    /// Train through Hungarian pooling; when false every edge enters the
    /// loss (the plain-network ablation).
    pub hungarian: bool,
    pub mining: Mining,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 1,
            epochs: 140,
            n2d: 512,
            n3d: 512,
            k: DEFAULT_K,
            ratio: DEFAULT_RATIO,
            seed: 0,
            hungarian: true,
            mining: Mining::KnnRatio,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.n2d == 0 || self.n3d == 0 || self.k == 0 {
            return Err(Error::invalid("batch size, n2d, n3d and K must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::invalid("ratio must lie in [0, 1]"));
        }
        self.architecture.validate()
    }

    /// The edge selection this training mode is evaluated with.
    pub fn selection(&self) -> Selection {
        if self.hungarian {
            Selection::Hungarian
        } else {
            Selection::Threshold(0.5)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGraph {
    pub graph: BipartiteGraph,
    pub labels: Vec<bool>,
}

/// One training sample for `image`: a random subset of its keypoints
/// matched against a random subset of the points seen by its covisible
/// images, with 3D descriptors averaged without this image's observations.
///
/// `Ok(None)` signals a sample to skip (too few points or no edges).
pub fn make_training_graph(
    model: &SfmModel,
    image_id: ImageId,
    config: &TrainConfig,
    sample_seed: u64,
) -> Result<Option<LabeledGraph>> {
    let image = model.image(image_id)?;
    let mut pool = BTreeSet::new();
    let mut covisible = false;
    for &other in model.images().keys() {
        if other != image_id && model.covisibility(image_id, other)? > 0 {
            covisible = true;
            pool.extend(model.scene_point_ids(other)?.iter().copied());
        }
    }
    if !covisible {
        return Err(Error::invalid(format!("{image_id} has no covisible images")));
    }
    let mut available = Vec::with_capacity(pool.len());
    for id in pool {
        match model.point_descriptor(id, Some(image_id)) {
            Ok(d) => available.push((id, d)),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut picked_3d = index::sample(&mut rng, available.len(), config.n3d.min(available.len())).into_vec();
    picked_3d.sort_unstable();
    let kp_count = image.keypoints.len();
    let mut picked_2d = index::sample(&mut rng, kp_count, config.n2d.min(kp_count)).into_vec();
    picked_2d.sort_unstable();
    if picked_3d.len() < config.k || picked_2d.is_empty() {
        return Ok(None);
    }

    let points: Vec<(PointId, Vector3<f64>)> = picked_3d
        .iter()
        .map(|&i| (available[i].0, model.points()[&available[i].0].position))
        .collect();
    let keypoints: Vec<Vector2<f64>> = picked_2d.iter().map(|&k| image.keypoints[k].position).collect();
    let edges = match config.mining {
        Mining::KnnRatio => {
            let point_desc: Vec<Vec<f64>> = picked_3d.iter().map(|&i| available[i].1.clone()).collect();
            let query_desc: Vec<Vec<f64>> = picked_2d.iter().map(|&k| image.keypoints[k].descriptor.clone()).collect();
            knn_ratio_match(&query_desc, &point_desc, config.k, config.ratio)?
        }
        Mining::Random => {
            let mut edges = Vec::new();
            for u in 0..keypoints.len() {
                for (rank, v) in index::sample(&mut rng, points.len(), config.k).into_iter().enumerate() {
                    edges.push(CandidateEdge {
                        u_index: u,
                        v_index: v,
                        distance: 0.0,
                        nn_rank: rank + 1,
                    });
                }
            }
            edges
        }
    };
    if edges.is_empty() {
        return Ok(None);
    }
    let mut graph = build_graph(&keypoints, &points, &edges)?;
    // Back-references must name keypoints of the image, not of the subset.
    for k in &mut graph.keypoint_indices {
        *k = picked_2d[*k];
    }
    let camera = model.camera(image.camera_id)?;
    let graph = graph.with_intrinsics(camera.intrinsics);
    let labels = (0..graph.t())
        .map(|k| {
            let (kp, pid) = graph.endpoints(k);
            model.keypoint_owner(image_id, kp) == Some(pid)
        })
        .collect();
    Ok(Some(LabeledGraph { graph, labels }))
}

/// Which edges count as selected matches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    Hungarian,
    Threshold(f64),
}

impl Selection {
    pub fn apply(&self, graph: &BipartiteGraph, w: &[f64]) -> Vec<bool> {
        match *self {
            Selection::Hungarian => hungarian_pooling(graph, w),
            Selection::Threshold(t) => w.iter().map(|&x| x > t).collect(),
        }
    }
}

fn graph_counts(graph: &LabeledGraph, selected: &[bool]) -> (usize, usize, usize) {
    let true_selected = selected.iter().zip(&graph.labels).filter(|(&s, &t)| s && t).count();
    let chosen = selected.iter().filter(|&&s| s).count();
    let with_truth: BTreeSet<usize> = graph
        .graph
        .edges
        .iter()
        .zip(&graph.labels)
        .filter(|(_, &t)| t)
        .map(|(e, _)| e.u_index)
        .collect();
    (true_selected, chosen, with_truth.len())
}

/// Precision and recall of the selected edges, pooled over the set. The
/// recall denominator counts keypoints with a true edge among candidates.
pub fn evaluate_matcher(params: &BmnetParams, eval_set: &[LabeledGraph], selection: Selection) -> Result<MatchReport> {
    if eval_set.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let (mut ts, mut s, mut ta) = (0, 0, 0);
    for g in eval_set {
        let (w, _) = forward(params, &g.graph)?;
        let (a, b, c) = graph_counts(g, &selection.apply(&g.graph, &w));
        ts += a;
        s += b;
        ta += c;
    }
    Ok(MatchReport::from_counts(ts, s, ta))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub graphs: usize,
    pub skipped: usize,
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,precision,recall\n");
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.mean_loss, e.precision, e.recall));
    }
    out
}

/// Images that can produce training graphs, as `(model index, image)`.
fn training_images(models: &[SfmModel]) -> Result<Vec<(usize, ImageId)>> {
    let mut out = Vec::new();
    for (m, model) in models.iter().enumerate() {
        for &id in model.images().keys() {
            let covisible = model
                .images()
                .keys()
                .any(|&other| other != id && model.covisibility(id, other).is_ok_and(|b| b > 0));
            if covisible {
                out.push((m, id));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no image has a covisible neighbour"));
    }
    Ok(out)
}

/// Trains from freshly initialized parameters; see [`train_from`].
pub fn train(models: &[SfmModel], config: &TrainConfig) -> Result<(BmnetParams, Vec<EpochLog>)> {
    let init = BmnetParams::init(config.architecture, mix(config.seed, 0x5eed))?;
    train_from(init, models, config, |_| {})
}

/// SGD over per-image graphs, resampled on every visit, epoch order
/// shuffled per seed. `on_epoch` sees each epoch's log record.
pub fn train_from(
    mut params: BmnetParams,
    models: &[SfmModel],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(BmnetParams, Vec<EpochLog>)> {
    config.validate()?;
    params.validate()?;
    let mut order = training_images(models)?;
    let selection = config.selection();
    let mut log = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x0de7));
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut graphs, mut skipped) = (0.0, 0, 0);
        let (mut ts, mut sel, mut ta) = (0, 0, 0);
        let mut grad = params.zeros_like();
        let mut pending = 0;
        for &(m, image) in &order {
            let sample_seed = rng.random::<u64>();
            let Some(sample) = make_training_graph(&models[m], image, config, sample_seed)? else {
                skipped += 1;
                continue;
            };
            let (w, cache) = forward(&params, &sample.graph)?;
            let s = if config.hungarian {
                hungarian_pooling(&sample.graph, &w)
            } else {
                vec![true; w.len()]
            };
            let value = loss(&w, &s, &sample.labels)?;
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss {value} at epoch {epoch}, step {step}")));
            }
            let g = backward(&params, &cache, &sample.graph, &s, &sample.labels)?;
            grad.add_scaled(1.0, &g);
            pending += 1;
            step += 1;
            if pending == config.batch_size {
                params.add_scaled(-config.learning_rate / pending as f64, &grad);
                grad = params.zeros_like();
                pending = 0;
            }

            let (a, b, c) = graph_counts(&sample, &selection.apply(&sample.graph, &w));
            ts += a;
            sel += b;
            ta += c;
            loss_sum += value;
            graphs += 1;
        }
        if pending > 0 {
            params.add_scaled(-config.learning_rate / pending as f64, &grad);
        }
        if !params.is_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }
        let report = MatchReport::from_counts(ts, sel, ta);
        let record = EpochLog {
            epoch,
            mean_loss: if graphs > 0 { loss_sum / graphs as f64 } else { 0.0 },
            precision: report.precision,
            recall: report.recall,
            graphs,
            skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} precision {:.3} recall {:.3} ({graphs} graphs)",
            record.mean_loss,
            record.precision,
            record.recall
        );
        on_epoch(&record);
        log.push(record);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneConfig};

    fn small_config() -> TrainConfig {
        TrainConfig {
            n2d: 64,
            n3d: 128,
            epochs: 1,
            architecture: Architecture {
                width: 8,
                point_blocks: 2,
                edge_blocks: 3,
            },
            ..TrainConfig::default()
        }
    }

    fn scene(noise: f64) -> SfmModel {
        generate_scene(&SceneConfig {
            n_points: 120,
            n_images: 10,
            inlier_descriptor_noise: noise,
            keypoint_noise_px: 0.0,
            seed: 2,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn noiseless_labels_sit_on_row_minimum() {
        let model = scene(0.0);
        let config = TrainConfig {
            k: 1,
            ratio: 0.0,
            ..small_config()
        };
        let mut positives = 0;
        for &id in model.images().keys() {
            let g = make_training_graph(&model, id, &config, 7).unwrap().unwrap();
            for (k, &t) in g.labels.iter().enumerate() {
                if t {
                    positives += 1;
                    assert_eq!(g.graph.edges[k].nn_rank, 1);
                    assert!(g.graph.edges[k].distance < 1e-6);
                }
            }
        }
        assert!(positives > 0);
    }

    #[test]
    fn labels_follow_tracks() {
        let model = scene(0.05);
        let config = small_config();
        let id = *model.images().keys().next().unwrap();
        let g = make_training_graph(&model, id, &config, 1).unwrap().unwrap();
        let mut per_keypoint = std::collections::BTreeMap::new();
        for (k, &t) in g.labels.iter().enumerate() {
            let (kp, pid) = g.graph.endpoints(k);
            assert_eq!(t, model.keypoint_owner(id, kp) == Some(pid));
            *per_keypoint.entry(kp).or_insert(0) += t as usize;
        }
        assert!(per_keypoint.values().all(|&c| c <= 1));
        assert!(g.graph.m() <= 64 && g.graph.n() <= 128);
        assert_eq!(g, make_training_graph(&model, id, &config, 1).unwrap().unwrap());
    }

    #[test]
    fn points_seen_only_by_the_image_are_excluded() {
        let model = crate::sfm::fixtures::small_model();
        let config = TrainConfig { k: 1, ..small_config() };
        // Image 3 sees only point 9, which nobody else observes.
        assert!(make_training_graph(&model, ImageId(3), &config, 0).is_err());
        let g = make_training_graph(&model, ImageId(1), &config, 0).unwrap().unwrap();
        assert!(g.graph.point_ids.iter().all(|p| *p != PointId(9)));
    }

    #[test]
    fn matcher_metric_examples() {
        let model = scene(0.0);
        let config = TrainConfig { k: 1, ratio: 0.0, ..small_config() };
        let id = *model.images().keys().next().unwrap();
        let g = make_training_graph(&model, id, &config, 3).unwrap().unwrap();
        let (ts, s, ta) = graph_counts(&g, &g.labels);
        assert_eq!((ts, s), (ta, ta));
        let (ts, s, _) = graph_counts(&g, &vec![false; g.labels.len()]);
        assert_eq!((ts, s), (0, 0));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let model = scene(0.05);
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..small_config()
        };
        let init = BmnetParams::init(config.architecture, 1).unwrap();
        let (trained, log) = train_from(init.clone(), std::slice::from_ref(&model), &config, |_| {}).unwrap();
        assert_eq!(trained, init);
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let model = scene(0.05);
        let config = TrainConfig {
            learning_rate: 0.01,
            ..small_config()
        };
        let a = train(std::slice::from_ref(&model), &config).unwrap();
        let b = train(std::slice::from_ref(&model), &config).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
