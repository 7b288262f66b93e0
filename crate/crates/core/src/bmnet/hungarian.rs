//! Hungarian pooling: maximum-weight one-to-one edge selection.

use crate::matcher::BipartiteGraph;

/// Reduced costs below this count as tight when breaking ties.
const TIGHT: f64 = 1e-12;

/// Selects a maximum-total-weight one-to-one subset of edges.
///
/// The weight matrix is padded to a square with zeros; assignments that
/// land on padding or on non-edge cells are dropped. Among optimal
/// matchings the one that includes the lowest-indexed edges is chosen
/// (lexicographic preference over edge order).
pub fn hungarian_pooling(graph: &BipartiteGraph, w: &[f64]) -> Vec<bool> {
    assert_eq!(w.len(), graph.t(), "one weight per edge");
    let n = graph.m().max(graph.n());
    if n == 0 {
        return Vec::new();
    }
    let mut weight = vec![0.0; n * n];
    for (e, &wk) in graph.edges.iter().zip(w) {
        weight[e.u_index * n + e.v_index] = wk;
    }
    let cost = |i: usize, j: usize| -weight[i * n + j];

    let (mut col_of_row, row_pot, col_pot) = solve(n, &cost);
    let optimum: f64 = (0..n).map(|i| weight[i * n + col_of_row[i]]).sum();
    let assignment = col_of_row.clone();
    let mut row_of_col = vec![0; n];
    for (i, &j) in col_of_row.iter().enumerate() {
        row_of_col[j] = i;
    }

    let tight = |i: usize, j: usize| cost(i, j) - row_pot[i] - col_pot[j] <= TIGHT;
    let mut locked_row = vec![false; n];
    let mut locked_col = vec![false; n];
    for e in &graph.edges {
        let (i, j) = (e.u_index, e.v_index);
        if col_of_row[i] == j {
            locked_row[i] = true;
            locked_col[j] = true;
            continue;
        }
        if locked_row[i] || locked_col[j] || !tight(i, j) {
            continue;
        }
        // Free row `start` must reach column `goal` along tight cells,
        // alternating through current assignments, to make room for (i, j).
        let start = row_of_col[j];
        let goal = col_of_row[i];
        let mut parent_col: Vec<Option<usize>> = vec![None; n];
        let mut visited = vec![false; n];
        let mut queue = std::collections::VecDeque::from([start]);
        let mut reached = None;
        'search: while let Some(r) = queue.pop_front() {
            for c in 0..n {
                if visited[c] || locked_col[c] || c == j || !tight(r, c) {
                    continue;
                }
                visited[c] = true;
                parent_col[c] = Some(r);
                if c == goal {
                    reached = Some(c);
                    break 'search;
                }
                queue.push_back(row_of_col[c]);
            }
        }
        let Some(mut c) = reached else { continue };
        loop {
            let r = parent_col[c].expect("on path");
            let next = col_of_row[r];
            col_of_row[r] = c;
            row_of_col[c] = r;
            if r == start {
                break;
            }
            c = next;
        }
        col_of_row[i] = j;
        row_of_col[j] = i;
        locked_row[i] = true;
        locked_col[j] = true;
    }

    let total: f64 = (0..n).map(|i| weight[i * n + col_of_row[i]]).sum();
    let chosen = if total + TIGHT * n as f64 >= optimum { &col_of_row } else { &assignment };
    graph.edges.iter().map(|e| chosen[e.u_index] == e.v_index).collect()
}

/// Total weight of the selected edges.
pub fn matching_weight(w: &[f64], s: &[bool]) -> f64 {
    w.iter().zip(s).filter(|(_, &s)| s).map(|(w, _)| w).sum()
}

/// Minimum-cost perfect assignment on an `n × n` cost matrix with row and
/// column potentials (shortest augmenting paths, O(n³)).
fn solve(n: usize, cost: &impl Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[p[j] - 1] = j - 1;
    }
    (col_of_row, u[1..].to_vec(), v[1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::CandidateEdge;
    use nalgebra::{Vector2, Vector3};
    use proptest::prelude::*;

    fn graph(m: usize, n: usize, pairs: &[(usize, usize)]) -> BipartiteGraph {
        let edges = pairs
            .iter()
            .map(|&(i, j)| CandidateEdge { u_index: i, v_index: j, distance: 0.0, nn_rank: 1 })
            .collect();
        BipartiteGraph::new(vec![Vector2::zeros(); m], vec![Vector3::zeros(); n], edges).unwrap()
    }

    /// Best selection by enumeration: maximum weight, then lexicographic
    /// preference for including lower-indexed edges.
    fn brute_force(g: &BipartiteGraph, w: &[f64]) -> (f64, Vec<bool>) {
        let t = g.t();
        let mut best = (f64::NEG_INFINITY, vec![false; t]);
        for mask in 0u32..(1 << t) {
            let s: Vec<bool> = (0..t).map(|k| mask >> k & 1 == 1).collect();
            let mut rows = std::collections::HashSet::new();
            let mut cols = std::collections::HashSet::new();
            let valid = g.edges.iter().zip(&s).filter(|(_, &s)| s).all(|(e, _)| rows.insert(e.u_index) && cols.insert(e.v_index));
            if !valid {
                continue;
            }
            let total = matching_weight(w, &s);
            let better = total > best.0 + 1e-12
                || ((total - best.0).abs() <= 1e-12 && s.iter().map(|&b| !b).lt(best.1.iter().map(|&b| !b)));
            if better {
                best = (total, s);
            }
        }
        best
    }

    fn one_to_one(g: &BipartiteGraph, s: &[bool]) -> bool {
        let mut rows = std::collections::HashSet::new();
        let mut cols = std::collections::HashSet::new();
        g.edges.iter().zip(s).filter(|(_, &s)| s).all(|(e, _)| rows.insert(e.u_index) && cols.insert(e.v_index))
    }

    #[test]
    fn examples() {
        assert_eq!(hungarian_pooling(&graph(1, 1, &[(0, 0)]), &[0.3]), vec![true]);
        assert_eq!(hungarian_pooling(&graph(1, 2, &[(0, 0), (0, 1)]), &[0.9, 0.4]), vec![true, false]);
        let full = graph(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let s = hungarian_pooling(&full, &[0.9, 0.8, 0.85, 0.1]);
        assert_eq!(s, vec![false, true, true, false]);
        assert!((matching_weight(&[0.9, 0.8, 0.85, 0.1], &s) - 1.65).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_edge_index() {
        let g = graph(1, 2, &[(0, 1), (0, 0)]);
        assert_eq!(hungarian_pooling(&g, &[0.5, 0.5]), vec![true, false]);
        let g = graph(2, 2, &[(1, 1), (0, 1), (1, 0), (0, 0)]);
        assert_eq!(hungarian_pooling(&g, &[0.5, 0.5, 0.5, 0.5]), vec![true, false, false, true]);
    }

    #[test]
    fn rectangular_graphs() {
        let g = graph(3, 1, &[(0, 0), (1, 0), (2, 0)]);
        assert_eq!(hungarian_pooling(&g, &[0.2, 0.7, 0.4]), vec![false, true, false]);
        let g = graph(1, 3, &[(0, 2), (0, 1)]);
        assert_eq!(hungarian_pooling(&g, &[0.2, 0.3]), vec![false, true]);
    }

    fn random_graph() -> impl Strategy<Value = (BipartiteGraph, Vec<f64>)> {
        (1usize..6, 1usize..6)
            .prop_flat_map(|(m, n)| {
                let cells = proptest::sample::subsequence((0..m * n).collect::<Vec<_>>(), 1..=(m * n).min(12));
                (Just((m, n)), cells)
            })
            .prop_flat_map(|((m, n), cells)| {
                let t = cells.len();
                (Just((m, n, cells)), proptest::collection::vec(0u8..4, t), proptest::collection::vec(0.0f64..1.0, t), any::<bool>())
            })
            .prop_map(|((m, n, mut cells), coarse, fine, discrete)| {
                // Reverse so edge order differs from cell order.
                cells.reverse();
                let pairs: Vec<_> = cells.iter().map(|&c| (c / n, c % n)).collect();
                let w = if discrete { coarse.iter().map(|&c| c as f64 * 0.25).collect() } else { fine };
                (graph(m, n, &pairs), w)
            })
    }

    proptest! {
        #[test]
        fn matches_brute_force((g, w) in random_graph()) {
            let s = hungarian_pooling(&g, &w);
            prop_assert!(one_to_one(&g, &s));
            let (best, best_s) = brute_force(&g, &w);
            prop_assert!((matching_weight(&w, &s) - best).abs() <= 1e-12);
            prop_assert_eq!(s, best_s);
        }
    }
}
