//! Bipartite matching network (BMNet).
//!
//! Three pointwise sub-networks: the U-net embeds 2D points, the V-net
//! embeds 3D points, and the E-net scores each edge from the concatenated
//! embeddings of its endpoints. Every block is linear → context
//! normalization → ReLU, so each set element sees the statistics of its
//! whole set. A sigmoid head yields edge weights `w`; Hungarian pooling then
//! keeps a maximum-weight one-to-one subset `s`, and training gradients flow
//! only through the kept edges.

mod hungarian;
mod network;
mod params;

pub use hungarian::{hungarian_pooling, matching_weight};
pub use network::{backward, context_normalize, forward, loss, loss_gradient, ForwardCache, WEIGHT_CLAMP};
pub use params::{load_params, read_params, save_params, write_params};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTEXT_NORM_EPSILON: f64 = 1e-6;

/// Layer widths and depths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Embedding width of every block (d1 = d2).
    pub width: usize,
    /// Blocks in each of the U-net and V-net.
    pub point_blocks: usize,
    /// Blocks in the E-net, not counting the output head.
    pub edge_blocks: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            width: 128,
            point_blocks: 5,
            edge_blocks: 18,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.point_blocks == 0 || self.edge_blocks == 0 {
            return Err(Error::invalid("network width and depths must be positive"));
        }
        Ok(())
    }
}

/// One pointwise perceptron: `x · weight + bias`, optionally followed by
/// context normalization. Blocks apply ReLU afterwards; the head does not.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `in × out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub context_norm: bool,
}

impl Layer {
    fn he(inputs: usize, outputs: usize, context_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive fan-in");
        Self {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || normal.sample(rng)),
            bias: Array1::zeros(outputs),
            context_norm,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            context_norm: self.context_norm,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// Network parameters. The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct BmnetParams {
    pub u_net: Vec<Layer>,
    pub v_net: Vec<Layer>,
    pub e_net: Vec<Layer>,
    pub head: Layer,
    pub epsilon: f64,
}

/// Default-architecture parameters with He-normal weights and zero biases.
pub fn init_params(seed: u64) -> BmnetParams {
    BmnetParams::init(Architecture::default(), seed).expect("default architecture is valid")
}

impl BmnetParams {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = arch.width;
        let point_net = |inputs: usize, rng: &mut ChaCha8Rng| -> Vec<Layer> {
            (0..arch.point_blocks)
                .map(|b| Layer::he(if b == 0 { inputs } else { w }, w, true, rng))
                .collect()
        };
        let u_net = point_net(2, &mut rng);
        let v_net = point_net(3, &mut rng);
        let e_net = (0..arch.edge_blocks)
            .map(|b| Layer::he(if b == 0 { 2 * w } else { w }, w, true, &mut rng))
            .collect();
        let head = Layer::he(w, 1, false, &mut rng);
        Ok(Self {
            u_net,
            v_net,
            e_net,
            head,
            epsilon: CONTEXT_NORM_EPSILON,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            width: self.head.inputs(),
            point_blocks: self.u_net.len(),
            edge_blocks: self.e_net.len(),
        }
    }

    /// Checks that layer shapes chain and every value is finite.
    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture();
        arch.validate()?;
        let w = arch.width;
        let chain = |layers: &[Layer], first: usize, name: &str| -> Result<()> {
            for (b, layer) in layers.iter().enumerate() {
                let inputs = if b == 0 { first } else { w };
                if layer.inputs() != inputs || layer.outputs() != w || layer.bias.len() != w || !layer.context_norm {
                    return Err(Error::invalid(format!("{name} block {b} has an unexpected shape")));
                }
            }
            Ok(())
        };
        if self.v_net.len() != self.u_net.len() {
            return Err(Error::invalid("U-net and V-net depths differ"));
        }
        chain(&self.u_net, 2, "U-net")?;
        chain(&self.v_net, 3, "V-net")?;
        chain(&self.e_net, 2 * w, "E-net")?;
        if self.head.outputs() != 1 || self.head.bias.len() != 1 || self.head.context_norm {
            return Err(Error::invalid("head must map to a single un-normalized channel"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("context-norm epsilon must be positive"));
        }
        if self.layers().any(|l| l.weight.iter().chain(&l.bias).any(|v| !v.is_finite())) {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(())
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.u_net.iter().chain(&self.v_net).chain(&self.e_net).chain(std::iter::once(&self.head))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.u_net
            .iter_mut()
            .chain(&mut self.v_net)
            .chain(&mut self.e_net)
            .chain(std::iter::once(&mut self.head))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            u_net: self.u_net.iter().map(Layer::zeros_like).collect(),
            v_net: self.v_net.iter().map(Layer::zeros_like).collect(),
            e_net: self.e_net.iter().map(Layer::zeros_like).collect(),
            head: self.head.zeros_like(),
            epsilon: self.epsilon,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All weights and biases, layer by layer (weight row-major, then bias).
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Mutable references in the order of [`values`](Self::values).
    pub fn values_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        for l in self.layers_mut() {
            out.extend(l.weight.iter_mut());
            out.extend(l.bias.iter_mut());
        }
        out
    }

    /// `self += alpha * other`; shapes must match.
    pub fn add_scaled(&mut self, alpha: f64, other: &BmnetParams) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(3);
        assert_eq!(a, init_params(3));
        assert_ne!(a.values(), init_params(4).values());
        a.validate().unwrap();
        assert_eq!(a.architecture(), Architecture::default());
    }

    #[test]
    fn default_shapes() {
        let p = init_params(0);
        assert_eq!(p.u_net.len(), 5);
        assert_eq!(p.e_net.len(), 18);
        assert_eq!(p.u_net[0].weight.dim(), (2, 128));
        assert_eq!(p.v_net[0].weight.dim(), (3, 128));
        assert_eq!(p.e_net[0].weight.dim(), (256, 128));
        assert_eq!(p.head.weight.dim(), (128, 1));
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut p = BmnetParams::init(Architecture { width: 4, point_blocks: 2, edge_blocks: 3 }, 0).unwrap();
        p.e_net[1].weight = Array2::zeros((5, 4));
        assert!(p.validate().is_err());
    }

    #[test]
    fn add_scaled_and_values_agree() {
        let arch = Architecture { width: 3, point_blocks: 1, edge_blocks: 2 };
        let mut p = BmnetParams::init(arch, 1).unwrap();
        let before = p.values();
        let g = BmnetParams::init(arch, 2).unwrap();
        p.add_scaled(-0.5, &g);
        for ((a, b), c) in p.values().iter().zip(&before).zip(g.values()) {
            assert_eq!(*a, b - 0.5 * c);
        }
        assert_eq!(p.values_mut().len(), p.parameter_count());
    }
}
