use gam_core::bmnet::{read_params, write_params, Architecture, BmnetParams};
use gam_core::pipeline::{localize_batch, LocalizeConfig, MatchStrategy, Status};
use gam_core::matcher::BaselineMode;
use gam_core::query::{parse_queries, write_queries};
use gam_core::sfm::{parse_model, write_model};
use gam_core::synth::{generate_query, generate_scene, SceneConfig};
use gam_core::trainer::{train, TrainConfig};

fn small_scene(seed: u64) -> SceneConfig {
    SceneConfig { n_points: 120, n_images: 10, seed, ..SceneConfig::default() }
}

#[test]
fn text_formats_round_trip_exactly() {
    let cfg = small_scene(5);
    let model = generate_scene(&cfg).unwrap();
    let text = write_model(&model).unwrap();
    let parsed = parse_model(&text).unwrap();
    assert_eq!(parsed, model);
    assert_eq!(write_model(&parsed).unwrap(), text);

    let queries: Vec<_> = (0..3).map(|q| generate_query(&model, &cfg, 7, q).unwrap()).collect();
    let text = write_queries(&queries).unwrap();
    let parsed = parse_queries(&text).unwrap();
    assert_eq!(write_queries(&parsed).unwrap(), text);
    assert_eq!(parsed.len(), 3);
}

#[test]
fn params_round_trip_bitwise() {
    let p = BmnetParams::init(Architecture { width: 8, point_blocks: 2, edge_blocks: 3 }, 11).unwrap();
    let bytes = write_params(&p).unwrap();
    let q = read_params(&bytes).unwrap();
    assert!(p.values().iter().zip(q.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(write_params(&q).unwrap(), bytes);
    assert!(read_params(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let models: Vec<_> = (0..6).map(|s| generate_scene(&small_scene(s)).unwrap()).collect();
    let config = TrainConfig {
        epochs: 4,
        learning_rate: 0.01,
        architecture: Architecture { width: 8, point_blocks: 2, edge_blocks: 4 },
        ..TrainConfig::default()
    };
    let (params, log) = train(&models, &config).unwrap();
    assert_eq!(log.len(), 4);
    assert!(log.last().unwrap().mean_loss < log[0].mean_loss, "{log:?}");
    let (again, _) = train(&models, &config).unwrap();
    assert_eq!(params.values(), again.values());
}

#[test]
fn baseline_localizes_clean_queries() {
    let cfg = SceneConfig { inlier_descriptor_noise: 0.02, keypoint_noise_px: 0.5, ..small_scene(9) };
    let model = generate_scene(&cfg).unwrap();
    let queries: Vec<_> = (0..5).map(|q| generate_query(&model, &cfg, 10, q).unwrap()).collect();
    let params = BmnetParams::init(Architecture { width: 4, point_blocks: 1, edge_blocks: 1 }, 0).unwrap();
    let config = LocalizeConfig {
        strategy: MatchStrategy::Baseline { mode: BaselineMode::Ratio, threshold: 0.8 },
        ..LocalizeConfig::default()
    };
    let (results, summary) = localize_batch(&model, &params, &queries, &config).unwrap();
    assert!(results.iter().all(|r| r.status == Status::Ok));
    assert!(summary.pose.median_translation < 0.05 * cfg.world_extent);
}
