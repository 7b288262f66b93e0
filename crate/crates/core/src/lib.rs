//! Geometry-aided matching (GAM) for visual localization.
//!
//! Candidate 2D-3D matches come from kNN-ratio search in descriptor space,
//! a bipartite matching network scores them from geometry alone, and a
//! Hungarian pooling layer keeps a one-to-one subset. The surviving matches
//! drive a prior-guided RANSAC PnP inside a retrieval-based hierarchical
//! localizer.
//!
//! Module map:
//! - [`sfm`]: SfM map model and the GAMM text format
//! - [`synth`]: seeded synthetic scenes and queries with ground truth
//! - [`matcher`]: descriptor distances, kNN-ratio and baseline matchers
//! - [`bmnet`]: the matching network, Hungarian pooling, BMN1 parameter files
//! - [`trainer`]: training-graph mining, loss, SGD training loop
//! - [`geometry`]: projection, P3P, RANSAC and pose refinement
//! - [`retrieval`]: global-descriptor retrieval and covisibility expansion
//! - [`pipeline`]: the hierarchical localizer
//! - [`eval`]: match and pose metrics, sweep reports

pub mod bmnet;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matcher;
pub mod pipeline;
pub mod query;
pub mod retrieval;
pub mod sfm;
pub mod synth;
pub mod trainer;

mod textio;

pub use error::{Error, Result};
