//! Coarse localization: rank registered images by global-descriptor
//! similarity, then grow each retrieved image's meta scene with its most
//! covisible neighbours.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sfm::{ImageId, PointId, SfmModel, UNIT_NORM_TOLERANCE};

pub const DEFAULT_TOP_R: usize = 20;
pub const DEFAULT_EXPAND_M: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    /// `(image, cosine similarity)`, best first.
    pub ranked_images: Vec<(ImageId, f64)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpandedScene {
    pub anchor_image: ImageId,
    /// Anchor first, then neighbours by decreasing covisibility.
    pub member_images: Vec<ImageId>,
    pub point_ids: BTreeSet<PointId>,
}

/// Top-`r` images by inner product with `query_global`, ties broken by
/// ascending image id.
pub fn retrieve_images(model: &SfmModel, query_global: &[f64], r: usize) -> Result<RetrievalResult> {
    if r == 0 {
        return Err(Error::invalid("R must be positive"));
    }
    if model.images().is_empty() {
        return Err(Error::invalid("model has no registered images"));
    }
    if query_global.len() != model.global_dim() {
        return Err(Error::invalid(format!(
            "query global descriptor has dimension {}, model uses {}",
            query_global.len(),
            model.global_dim()
        )));
    }
    let norm = query_global.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() >= UNIT_NORM_TOLERANCE {
        return Err(Error::invalid("query global descriptor is not unit norm"));
    }
    let mut ranked: Vec<(ImageId, f64)> = model
        .images()
        .values()
        .map(|img| {
            let score = img.global_descriptor.iter().zip(query_global).map(|(a, b)| a * b).sum();
            (img.id, score)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(r);
    Ok(RetrievalResult { ranked_images: ranked })
}

/// One expanded scene per retrieved image that no earlier scene already
/// contains, in retrieval order. Neighbours are likewise drawn only from
/// images no earlier scene has claimed.
pub fn expand_scenes(model: &SfmModel, retrieved: &RetrievalResult, m: usize) -> Result<Vec<ExpandedScene>> {
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let mut claimed = BTreeSet::new();
    let mut scenes = Vec::new();
    for &(anchor, _) in &retrieved.ranked_images {
        if claimed.contains(&anchor) {
            continue;
        }
        let mut neighbours = Vec::new();
        for &other in model.images().keys() {
            if other == anchor || claimed.contains(&other) {
                continue;
            }
            let beta = model.covisibility(anchor, other)?;
            if beta > 0 {
                neighbours.push((beta, other));
            }
        }
        neighbours.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut members = vec![anchor];
        members.extend(neighbours.iter().take(m - 1).map(|&(_, id)| id));
        let mut point_ids = BTreeSet::new();
        for &id in &members {
            point_ids.extend(model.scene_point_ids(id)?.iter().copied());
        }
        claimed.extend(members.iter().copied());
        scenes.push(ExpandedScene {
            anchor_image: anchor,
            member_images: members,
            point_ids,
        });
    }
    Ok(scenes)
}
