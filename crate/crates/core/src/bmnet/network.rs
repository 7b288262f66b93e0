//! Forward pass, loss, and exact backward pass of the matching network.

use nalgebra::{Vector2, Vector3};
use ndarray::{s, Array1, Array2, Axis, Zip};

use super::{BmnetParams, Layer, CONTEXT_NORM_EPSILON};
use crate::error::{Error, Result};
use crate::matcher::BipartiteGraph;

/// Weights are clamped to `[WEIGHT_CLAMP, 1 - WEIGHT_CLAMP]` inside the loss.
pub const WEIGHT_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
struct BlockCache {
    input: Array2<f64>,
    /// Context-normalized (or raw linear) activations before ReLU.
    pre: Array2<f64>,
    inv_std: Option<Array1<f64>>,
}

/// How E-net blocks are wired: block 0 widens the input, then blocks are
/// grouped in residual pairs, and an odd trailing block stays plain.
#[derive(Clone, Copy, Debug)]
enum Stage {
    Plain(usize),
    Residual(usize),
}

fn edge_stages(blocks: usize) -> Vec<Stage> {
    let mut stages = vec![Stage::Plain(0)];
    let mut b = 1;
    while b < blocks {
        if b + 1 < blocks {
            stages.push(Stage::Residual(b));
            b += 2;
        } else {
            stages.push(Stage::Plain(b));
            b += 1;
        }
    }
    stages
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    edges: Vec<(usize, usize)>,
    m: usize,
    n: usize,
    /// Mean and RMS radius used to standardize the 2D inputs.
    pub u_standardization: (Vec<f64>, f64),
    pub v_standardization: (Vec<f64>, f64),
    u_blocks: Vec<BlockCache>,
    v_blocks: Vec<BlockCache>,
    e_blocks: Vec<BlockCache>,
    head_input: Array2<f64>,
    weights: Vec<f64>,
}

impl ForwardCache {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn matches(&self, graph: &BipartiteGraph) -> bool {
        self.m == graph.m()
            && self.n == graph.n()
            && self.edges.len() == graph.t()
            && self.edges.iter().zip(&graph.edges).all(|(&(i, j), e)| i == e.u_index && j == e.v_index)
    }
}

fn column_stats(a: &Array2<f64>, epsilon: f64) -> (Array2<f64>, Array1<f64>) {
    let mean = a.mean_axis(Axis(0)).expect("non-empty set");
    let centered = a - &mean;
    let var = centered.mapv(|x| x * x).mean_axis(Axis(0)).expect("non-empty set");
    let inv_std = var.mapv(|v| 1.0 / (v + epsilon).sqrt());
    (centered * &inv_std, inv_std)
}

/// Per-channel zero mean / unit variance across the rows (population
/// variance, ε = 1e-6).
pub fn context_normalize(x: &Array2<f64>) -> Array2<f64> {
    if x.nrows() == 0 {
        return x.clone();
    }
    column_stats(x, CONTEXT_NORM_EPSILON).0
}

fn block_forward(layer: &Layer, input: Array2<f64>, epsilon: f64) -> (Array2<f64>, BlockCache) {
    let linear = input.dot(&layer.weight) + &layer.bias;
    let (pre, inv_std) = if layer.context_norm {
        let (xhat, inv_std) = column_stats(&linear, epsilon);
        (xhat, Some(inv_std))
    } else {
        (linear, None)
    };
    let output = pre.mapv(|x| x.max(0.0));
    (output, BlockCache { input, pre, inv_std })
}

/// Returns the gradient for the layer and, if requested, for its input.
fn block_backward(layer: &Layer, cache: &BlockCache, grad_out: &Array2<f64>, want_input: bool) -> (Layer, Option<Array2<f64>>) {
    let mut d_pre = grad_out.clone();
    Zip::from(&mut d_pre).and(&cache.pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    let d_linear = match &cache.inv_std {
        Some(inv_std) => {
            let rows = d_pre.nrows() as f64;
            let sum = d_pre.sum_axis(Axis(0));
            let dot = (&d_pre * &cache.pre).sum_axis(Axis(0));
            let mut d = d_pre * rows - &sum - &(&cache.pre * &dot);
            d *= &(inv_std / rows);
            d
        }
        None => d_pre,
    };
    let grad = Layer {
        weight: cache.input.t().dot(&d_linear),
        bias: d_linear.sum_axis(Axis(0)),
        context_norm: layer.context_norm,
    };
    let d_input = want_input.then(|| d_linear.dot(&layer.weight.t()));
    (grad, d_input)
}

fn chain_forward(layers: &[Layer], mut x: Array2<f64>, epsilon: f64) -> (Array2<f64>, Vec<BlockCache>) {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = block_forward(layer, x, epsilon);
        caches.push(cache);
        x = y;
    }
    (x, caches)
}

fn chain_backward(layers: &[Layer], caches: &[BlockCache], mut grad: Array2<f64>) -> Vec<Layer> {
    let mut grads = Vec::with_capacity(layers.len());
    for (b, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let (g, d_input) = block_backward(layer, cache, &grad, b > 0);
        grads.push(g);
        if let Some(d) = d_input {
            grad = d;
        }
    }
    grads.reverse();
    grads
}

/// Rows centred on their mean and divided by their RMS distance from it.
fn standardize<const D: usize>(rows: &[[f64; D]]) -> (Array2<f64>, (Vec<f64>, f64)) {
    let count = rows.len() as f64;
    let mut mean = [0.0; D];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / count;
        }
    }
    let spread = rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum::<f64>()
        / count;
    let rms = spread.sqrt();
    let scale = if rms > 1e-12 { rms } else { 1.0 };
    let out = Array2::from_shape_fn((rows.len(), D), |(i, c)| (rows[i][c] - mean[c]) / scale);
    (out, (mean.to_vec(), scale))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Edge weights `w ∈ [0, 1]^T` for a candidate graph.
///
/// 2D positions are first mapped to unit-focal coordinates when the graph
/// carries intrinsics; both point sets are then standardized per graph, so
/// the output is invariant to translating either set and to uniform scale.
pub fn forward(params: &BmnetParams, graph: &BipartiteGraph) -> Result<(Vec<f64>, ForwardCache)> {
    graph.validate()?;
    if graph.t() == 0 {
        return Err(Error::invalid("graph has no edges"));
    }
    if params.u_net.is_empty() || params.v_net.is_empty() || params.e_net.is_empty() {
        return Err(Error::invalid("network has an empty sub-network"));
    }
    let width = params.head.inputs();
    if params.e_net[0].inputs() != 2 * width
        || params.u_net[0].inputs() != 2
        || params.v_net[0].inputs() != 3
        || params.u_net.last().map(Layer::outputs) != Some(width)
        || params.v_net.last().map(Layer::outputs) != Some(width)
    {
        return Err(Error::invalid("parameter shapes do not chain"));
    }

    let planar: Vec<[f64; 2]> = graph
        .u
        .iter()
        .map(|p| {
            let q: Vector2<f64> = graph.intrinsics.map_or(*p, |k| k.normalize(p));
            [q.x, q.y]
        })
        .collect();
    let spatial: Vec<[f64; 3]> = graph.v.iter().map(|p: &Vector3<f64>| [p.x, p.y, p.z]).collect();
    let (u_in, u_standardization) = standardize(&planar);
    let (v_in, v_standardization) = standardize(&spatial);

    let eps = params.epsilon;
    let (x_u, u_blocks) = chain_forward(&params.u_net, u_in, eps);
    let (x_v, v_blocks) = chain_forward(&params.v_net, v_in, eps);

    let t = graph.t();
    let mut x_e = Array2::zeros((t, 2 * width));
    for (k, e) in graph.edges.iter().enumerate() {
        x_e.slice_mut(s![k, ..width]).assign(&x_u.row(e.u_index));
        x_e.slice_mut(s![k, width..]).assign(&x_v.row(e.v_index));
    }

    let mut e_blocks = Vec::with_capacity(params.e_net.len());
    let mut h = x_e;
    for stage in edge_stages(params.e_net.len()) {
        match stage {
            Stage::Plain(b) => {
                let (y, cache) = block_forward(&params.e_net[b], h, eps);
                e_blocks.push(cache);
                h = y;
            }
            Stage::Residual(b) => {
                let skip = h.clone();
                let (y1, c1) = block_forward(&params.e_net[b], h, eps);
                let (y2, c2) = block_forward(&params.e_net[b + 1], y1, eps);
                e_blocks.push(c1);
                e_blocks.push(c2);
                h = y2 + skip;
            }
        }
    }

    let logits = h.dot(&params.head.weight) + &params.head.bias;
    let weights: Vec<f64> = logits.column(0).iter().map(|&z| sigmoid(z)).collect();
    let cache = ForwardCache {
        edges: graph.edges.iter().map(|e| (e.u_index, e.v_index)).collect(),
        m: graph.m(),
        n: graph.n(),
        u_standardization,
        v_standardization,
        u_blocks,
        v_blocks,
        e_blocks,
        head_input: h,
        weights: weights.clone(),
    };
    Ok((weights, cache))
}

fn check_lengths(w: &[f64], s: &[bool], t: &[bool]) -> Result<()> {
    if w.len() != s.len() || w.len() != t.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} weights, {} assignments, {} labels",
            w.len(),
            s.len(),
            t.len()
        )));
    }
    Ok(())
}

/// Masked binary cross-entropy, averaged over all `T` edges:
/// `-(1/T) Σ s_k [t_k ln w_k + (1 - t_k) ln(1 - w_k)]`.
pub fn loss(w: &[f64], s: &[bool], t: &[bool]) -> Result<f64> {
    check_lengths(w, s, t)?;
    if w.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = w
        .iter()
        .zip(s)
        .zip(t)
        .filter(|((_, &s), _)| s)
        .map(|((&w, _), &t)| {
            let w = w.clamp(WEIGHT_CLAMP, 1.0 - WEIGHT_CLAMP);
            if t {
                -w.ln()
            } else {
                -(1.0 - w).ln()
            }
        })
        .sum();
    Ok(total / w.len() as f64)
}

/// `∂loss/∂w`. Zero for unselected edges and wherever the clamp is active.
pub fn loss_gradient(w: &[f64], s: &[bool], t: &[bool]) -> Result<Vec<f64>> {
    check_lengths(w, s, t)?;
    let scale = 1.0 / w.len() as f64;
    Ok(w.iter()
        .zip(s)
        .zip(t)
        .map(|((&w, &s), &t)| {
            if !s || !(WEIGHT_CLAMP..=1.0 - WEIGHT_CLAMP).contains(&w) {
                0.0
            } else if t {
                -scale / w
            } else {
                scale / (1.0 - w)
            }
        })
        .collect())
}

/// Gradient of [`loss`] with respect to every parameter, with the
/// assignment `s` acting as a fixed 0/1 gate on each edge.
pub fn backward(
    params: &BmnetParams,
    cache: &ForwardCache,
    graph: &BipartiteGraph,
    s: &[bool],
    t: &[bool],
) -> Result<BmnetParams> {
    if !cache.matches(graph) {
        return Err(Error::invalid("forward cache was produced by a different graph"));
    }
    let width = params.head.inputs();
    if cache.head_input.ncols() != width
        || cache.u_blocks.len() != params.u_net.len()
        || cache.v_blocks.len() != params.v_net.len()
        || cache.e_blocks.len() != params.e_net.len()
    {
        return Err(Error::invalid("forward cache was produced by different parameters"));
    }
    let w = &cache.weights;
    let d_w = loss_gradient(w, s, t)?;
    let mut grads = params.zeros_like();
    if d_w.iter().all(|&d| d == 0.0) {
        return Ok(grads);
    }

    let d_logit = Array2::from_shape_fn((w.len(), 1), |(k, _)| d_w[k] * w[k] * (1.0 - w[k]));
    grads.head.weight = cache.head_input.t().dot(&d_logit);
    grads.head.bias = d_logit.sum_axis(Axis(0));
    let mut d_h = d_logit.dot(&params.head.weight.t());

    for stage in edge_stages(params.e_net.len()).into_iter().rev() {
        match stage {
            Stage::Plain(b) => {
                let (g, d_in) = block_backward(&params.e_net[b], &cache.e_blocks[b], &d_h, true);
                grads.e_net[b] = g;
                d_h = d_in.expect("requested");
            }
            Stage::Residual(b) => {
                let (g2, d1) = block_backward(&params.e_net[b + 1], &cache.e_blocks[b + 1], &d_h, true);
                let (g1, d0) = block_backward(&params.e_net[b], &cache.e_blocks[b], &d1.expect("requested"), true);
                grads.e_net[b] = g1;
                grads.e_net[b + 1] = g2;
                d_h += &d0.expect("requested");
            }
        }
    }

    let mut d_u = Array2::zeros((cache.m, width));
    let mut d_v = Array2::zeros((cache.n, width));
    for (k, &(i, j)) in cache.edges.iter().enumerate() {
        let mut row = d_u.row_mut(i);
        row += &d_h.slice(s![k, ..width]);
        let mut row = d_v.row_mut(j);
        row += &d_h.slice(s![k, width..]);
    }
    grads.u_net = chain_backward(&params.u_net, &cache.u_blocks, d_u);
    grads.v_net = chain_backward(&params.v_net, &cache.v_blocks, d_v);
    Ok(grads)
}
