//! Candidate 2D-3D matches in descriptor space and the bipartite graph
//! handed to the matching network.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::sfm::{is_unit, PointId};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_RATIO: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEdge {
    pub u_index: usize,
    pub v_index: usize,
    pub distance: f64,
    /// 1-based rank of `v_index` among the neighbours of `u_index`.
    pub nn_rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    /// Lowe's ratio test on the two nearest neighbours.
    Ratio,
    /// Mutual nearest neighbours.
    Cross,
    /// Absolute distance threshold on the nearest neighbour.
    Distance,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(Self::Ratio),
            "cross" => Ok(Self::Cross),
            "distance" => Ok(Self::Distance),
            other => Err(Error::invalid(format!("unknown baseline matcher {other:?}"))),
        }
    }
}

fn check_rows(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::invalid(format!(
                "{what} descriptor {i} has dimension {}, expected {dim}",
                row.len()
            )));
        }
        if !is_unit(row) {
            return Err(Error::invalid(format!("{what} descriptor {i} is not unit norm")));
        }
    }
    Ok(())
}

fn to_matrix(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j])
}

/// All pairwise distances between two sets of unit descriptors.
pub fn descriptor_distances(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Array2<f64>> {
    let dim = a.first().or(b.first()).map_or(0, Vec::len);
    check_rows(a, dim, "query")?;
    check_rows(b, dim, "point")?;
    let gram = to_matrix(a, dim).dot(&to_matrix(b, dim).t());
    Ok(gram.mapv(|c| (2.0 - 2.0 * c).max(0.0).sqrt()))
}

/// Row `i` sorted by (distance, column index).
fn sorted_row(distances: &Array2<f64>, i: usize) -> Vec<(f64, usize)> {
    let mut row: Vec<(f64, usize)> = distances.row(i).iter().copied().zip(0..).collect();
    row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    row
}

/// kNN-ratio candidates: per query the nearest point always, and the k-th
/// nearest (k ≤ K) whenever `d1 / dk ≥ ratio`.
pub fn knn_ratio_match(query: &[Vec<f64>], points: &[Vec<f64>], k: usize, ratio: f64) -> Result<Vec<CandidateEdge>> {
    let distances = descriptor_distances(query, points)?;
    knn_ratio_from_distances(&distances, k, ratio)
}

pub fn knn_ratio_from_distances(distances: &Array2<f64>, k: usize, ratio: f64) -> Result<Vec<CandidateEdge>> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("ratio {ratio} outside [0, 1]")));
    }
    let n = distances.ncols();
    if n < k {
        return Err(Error::invalid(format!("{n} points cannot supply {k} neighbours")));
    }
    let mut edges = Vec::new();
    for i in 0..distances.nrows() {
        let row = sorted_row(distances, i);
        let d1 = row[0].0;
        for (rank, &(dk, j)) in row.iter().take(k).enumerate() {
            let quotient = if dk == 0.0 { 1.0 } else { d1 / dk };
            if rank == 0 || quotient >= ratio {
                edges.push(CandidateEdge {
                    u_index: i,
                    v_index: j,
                    distance: dk,
                    nn_rank: rank + 1,
                });
            }
        }
    }
    Ok(edges)
}

/// Plain nearest-neighbour matching (one edge per query).
pub fn nn_match(query: &[Vec<f64>], points: &[Vec<f64>]) -> Result<Vec<CandidateEdge>> {
    knn_ratio_match(query, points, 1, 0.0)
}

pub fn baseline_match(
    query: &[Vec<f64>],
    points: &[Vec<f64>],
    mode: BaselineMode,
    threshold: f64,
) -> Result<Vec<CandidateEdge>> {
    let distances = descriptor_distances(query, points)?;
    baseline_from_distances(&distances, mode, threshold)
}

pub fn baseline_from_distances(distances: &Array2<f64>, mode: BaselineMode, threshold: f64) -> Result<Vec<CandidateEdge>> {
    match mode {
        BaselineMode::Ratio if !(threshold > 0.0 && threshold <= 1.0) => {
            return Err(Error::invalid("ratio threshold must lie in (0, 1]"));
        }
        BaselineMode::Ratio if distances.ncols() < 2 => {
            return Err(Error::invalid("ratio test needs at least two points"));
        }
        BaselineMode::Distance if !(threshold > 0.0) => {
            return Err(Error::invalid("distance threshold must be positive"));
        }
        _ => {}
    }
    if distances.ncols() == 0 {
        return Err(Error::invalid("no points to match against"));
    }
    let nearest = knn_ratio_from_distances(distances, 1, 0.0)?;
    let kept = match mode {
        BaselineMode::Distance => nearest.into_iter().filter(|e| e.distance < threshold).collect(),
        BaselineMode::Ratio => nearest
            .into_iter()
            .filter(|e| {
                let d2 = sorted_row(distances, e.u_index)[1].0;
                let quotient = if d2 == 0.0 { 1.0 } else { e.distance / d2 };
                quotient < threshold
            })
            .collect(),
        BaselineMode::Cross => {
            let reverse = knn_ratio_from_distances(&distances.t().to_owned(), 1, 0.0)?;
            nearest
                .into_iter()
                .filter(|e| reverse[e.v_index].v_index == e.u_index)
                .collect()
        }
    };
    Ok(kept)
}

/// Candidate matches viewed as a bipartite graph over the touched 2D and
/// 3D points only. Edge indices refer to rows of `u` and `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    pub u: Vec<Vector2<f64>>,
    pub v: Vec<Vector3<f64>>,
    pub edges: Vec<CandidateEdge>,
    /// Original keypoint index of each row of `u`.
    pub keypoint_indices: Vec<usize>,
    /// Point id of each row of `v`.
    pub point_ids: Vec<PointId>,
    /// When set, 2D positions are pixels of this camera.
    pub intrinsics: Option<Intrinsics>,
}

impl BipartiteGraph {
    /// Graph over already-compact sets; back-references are the identity.
    pub fn new(u: Vec<Vector2<f64>>, v: Vec<Vector3<f64>>, edges: Vec<CandidateEdge>) -> Result<Self> {
        let graph = Self {
            keypoint_indices: (0..u.len()).collect(),
            point_ids: (0..v.len() as u32).map(PointId).collect(),
            u,
            v,
            edges,
            intrinsics: None,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn with_intrinsics(mut self, intrinsics: Intrinsics) -> Self {
        self.intrinsics = Some(intrinsics);
        self
    }

    pub fn m(&self) -> usize {
        self.u.len()
    }

    pub fn n(&self) -> usize {
        self.v.len()
    }

    pub fn t(&self) -> usize {
        self.edges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoint_indices.len() != self.u.len() || self.point_ids.len() != self.v.len() {
            return Err(Error::invalid("back-reference tables do not match the point sets"));
        }
        let mut seen = BTreeSet::new();
        for (k, e) in self.edges.iter().enumerate() {
            if e.u_index >= self.u.len() || e.v_index >= self.v.len() {
                return Err(Error::invalid(format!("edge {k} references a missing row")));
            }
            if !seen.insert((e.u_index, e.v_index)) {
                return Err(Error::invalid(format!(
                    "duplicate edge ({}, {})",
                    e.u_index, e.v_index
                )));
            }
        }
        Ok(())
    }

    /// `(keypoint index, point id)` of edge `k`.
    pub fn endpoints(&self, k: usize) -> (usize, PointId) {
        let e = &self.edges[k];
        (self.keypoint_indices[e.u_index], self.point_ids[e.v_index])
    }
}

/// Compacts candidate edges into a graph over the matched points only.
///
/// Edge `u_index`/`v_index` refer to `keypoints` and `points`; rows keep
/// the ascending order of their original indices.
pub fn build_graph(
    keypoints: &[Vector2<f64>],
    points: &[(PointId, Vector3<f64>)],
    edges: &[CandidateEdge],
) -> Result<BipartiteGraph> {
    if edges.is_empty() {
        return Err(Error::invalid("no candidate edges"));
    }
    let mut u_map = BTreeMap::new();
    let mut v_map = BTreeMap::new();
    for e in edges {
        if e.u_index >= keypoints.len() || e.v_index >= points.len() {
            return Err(Error::invalid("edge references a missing keypoint or point"));
        }
        u_map.insert(e.u_index, 0);
        v_map.insert(e.v_index, 0);
    }
    for (row, slot) in u_map.values_mut().enumerate() {
        *slot = row;
    }
    for (row, slot) in v_map.values_mut().enumerate() {
        *slot = row;
    }
    let graph = BipartiteGraph {
        u: u_map.keys().map(|&i| keypoints[i]).collect(),
        v: v_map.keys().map(|&j| points[j].1).collect(),
        keypoint_indices: u_map.keys().copied().collect(),
        point_ids: v_map.keys().map(|&j| points[j].0).collect(),
        edges: edges
            .iter()
            .map(|e| CandidateEdge {
                u_index: u_map[&e.u_index],
                v_index: v_map[&e.v_index],
                ..*e
            })
            .collect(),
        intrinsics: None,
    };
    graph.validate()?;
    Ok(graph)
}
