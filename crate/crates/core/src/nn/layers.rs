//! Network blocks: linear maps, MLPs, the LSTM history encoder, the
//! graph-transformer layer, the interaction-network layer and the VAE head.

use super::params::ParamStore;
use super::tape::{Mat, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, t: &Tape, x: Var) -> Var {
        match self {
            Activation::Relu => t.relu(x),
            Activation::LeakyRelu => t.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => t.tanh(x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, din: usize, dout: usize, zero: bool, rng: &mut R) -> Self {
        let w = if zero {
            s.add(&format!("{name}.w"), Mat::zeros(din, dout))
        } else {
            s.add_uniform(&format!("{name}.w"), din, dout, rng)
        };
        let b = s.add(&format!("{name}.b"), Mat::zeros(1, dout));
        Self { w, b }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Var {
        t.add_row(t.matmul(x, t.param(s, self.w)), t.param(s, self.b))
    }
}

/// Linear maps with an activation between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `dims = [din, hidden.., dout]`; `zero_last` zero-initializes the
    /// output layer.
    pub fn new<R: Rng + ?Sized>(
        s: &mut ParamStore,
        name: &str,
        dims: &[usize],
        act: Activation,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| Linear::new(s, &format!("{name}.{k}"), dims[k], dims[k + 1], zero_last && k + 1 == n, rng))
            .collect();
        Self { layers, act }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (k, l) in self.layers.iter().enumerate() {
            h = l.forward(t, s, h);
            if k + 1 < self.layers.len() {
                h = self.act.apply(t, h);
            }
        }
        h
    }
}

/// Layer normalization with learnable gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(s: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: s.add(&format!("{name}.gain"), Mat::full(1, d, 1.0)),
            bias: s.add(&format!("{name}.bias"), Mat::zeros(1, d)),
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Var {
        let y = t.layer_norm(x, LN_EPS);
        t.add_row(t.mul_row(y, t.param(s, self.gain)), t.param(s, self.bias))
    }
}

/// Lookup table; `ids` select rows.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: s.add_normal(&format!("{name}.table"), rows, dim, 0.02, rng),
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, ids: Rc<Vec<u32>>) -> Var {
        t.gather_rows(t.param(s, self.table), ids)
    }
}

/// Single-layer LSTM; gate order input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub wx: usize,
    pub wh: usize,
    pub b: usize,
    pub dim: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, din: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            wx: s.add_uniform(&format!("{name}.wx"), din, 4 * dim, rng),
            wh: s.add_uniform(&format!("{name}.wh"), dim, 4 * dim, rng),
            // forget-gate bias starts at one
            b: s.add(
                &format!("{name}.b"),
                Mat::row((0..4 * dim).map(|k| if (dim..2 * dim).contains(&k) { 1.0 } else { 0.0 }).collect()),
            ),
            dim,
        }
    }

    /// Final hidden state after running over `steps` (oldest first).
    pub fn forward(&self, t: &Tape, s: &ParamStore, steps: &[Var]) -> Var {
        let n = t.shape(steps[0]).0;
        let d = self.dim;
        let (wx, wh, b) = (t.param(s, self.wx), t.param(s, self.wh), t.param(s, self.b));
        let mut h = t.zeros(n, d);
        let mut c = t.zeros(n, d);
        for &x in steps {
            let z = t.add_row(t.add(t.matmul(x, wx), t.matmul(h, wh)), b);
            let i = t.sigmoid(t.slice_cols(z, 0, d));
            let f = t.sigmoid(t.slice_cols(z, d, d));
            let g = t.tanh(t.slice_cols(z, 2 * d, d));
            let o = t.sigmoid(t.slice_cols(z, 3 * d, d));
            c = t.add(t.mul(f, c), t.mul(i, g));
            h = t.mul(o, t.tanh(c));
        }
        h
    }
}

/// Directed edges split into target (aggregating) and source indices.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub dst: Rc<Vec<u32>>,
    pub src: Rc<Vec<u32>>,
    pub n_nodes: usize,
}

impl EdgeIndex {
    /// Edges `(i, j)` aggregate at `i` from `j`.
    pub fn new(edges: &[(u32, u32)], n_nodes: usize) -> Self {
        Self {
            dst: Rc::new(edges.iter().map(|e| e.0).collect()),
            src: Rc::new(edges.iter().map(|e| e.1).collect()),
            n_nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }
}

/// Multi-head softmax attention over graph neighbours with edge-biased
/// keys, followed by an MLP, a residual connection and layer norm.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub we: usize,
    pub mlp: Mlp,
    pub norm: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, dim: usize, edge_dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "hidden width must divide into heads");
        Self {
            wq: s.add_uniform(&format!("{name}.wq"), dim, dim, rng),
            wk: s.add_uniform(&format!("{name}.wk"), dim, dim, rng),
            wv: s.add_uniform(&format!("{name}.wv"), dim, dim, rng),
            we: s.add_uniform(&format!("{name}.we"), edge_dim, dim, rng),
            mlp: Mlp::new(s, &format!("{name}.mlp"), &[dim, dim, dim], Activation::Relu, false, rng),
            norm: LayerNorm::new(s, &format!("{name}.ln"), dim),
            heads,
            dim,
        }
    }

    /// Attention weights, `edges x heads`.
    pub fn attention(&self, t: &Tape, s: &ParamStore, h: Var, e: Var, idx: &EdgeIndex) -> Var {
        let dh = self.dim / self.heads;
        let q = t.gather_rows(t.matmul(h, t.param(s, self.wq)), idx.dst.clone());
        let k = t.gather_rows(t.matmul(h, t.param(s, self.wk)), idx.src.clone());
        let k = t.add(k, t.matmul(e, t.param(s, self.we)));
        let score = t.scale(t.col_group_sum(t.mul(q, k), dh), 1.0 / (dh as f64).sqrt());
        t.segment_softmax(score, idx.dst.clone(), idx.n_nodes)
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, h: Var, e: Var, idx: &EdgeIndex) -> Var {
        let dh = self.dim / self.heads;
        let agg = if idx.is_empty() {
            t.zeros(idx.n_nodes, self.dim)
        } else {
            let alpha = self.attention(t, s, h, e, idx);
            let v = t.gather_rows(t.matmul(h, t.param(s, self.wv)), idx.src.clone());
            let msg = t.mul(t.col_group_repeat(alpha, dh), v);
            t.scatter_add_rows(msg, idx.dst.clone(), idx.n_nodes)
        };
        self.norm.forward(t, s, t.add(h, self.mlp.forward(t, s, agg)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    Gated,
}

/// Interaction-network block with optional sigmoid gating. Returns updated
/// node and edge latents.
#[derive(Debug, Clone)]
pub struct InteractionLayer {
    pub edge_mlp: Mlp,
    pub node_mlp: Mlp,
    pub gate_w: usize,
    /// Gate vector split over the `[W h_i, W h_j, e_ij]` blocks.
    pub gate_a: [usize; 3],
    pub mode: Aggregation,
    pub dim: usize,
}

impl InteractionLayer {
    pub fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, dim: usize, mode: Aggregation, rng: &mut R) -> Self {
        let edge_mlp = Mlp::new(s, &format!("{name}.mlp_e"), &[3 * dim, dim, dim], Activation::Relu, false, rng);
        let node_mlp = Mlp::new(s, &format!("{name}.mlp_n"), &[2 * dim, dim, dim], Activation::Relu, false, rng);
        let gate_w = s.add_uniform(&format!("{name}.gate_w"), dim, dim, rng);
        let gate_a = [
            s.add_uniform(&format!("{name}.gate_a0"), dim, 1, rng),
            s.add_uniform(&format!("{name}.gate_a1"), dim, 1, rng),
            s.add_uniform(&format!("{name}.gate_a2"), dim, 1, rng),
        ];
        Self {
            edge_mlp,
            node_mlp,
            gate_w,
            gate_a,
            mode,
            dim,
        }
    }

    /// Gate values in (0, 1), `edges x 1`.
    pub fn gate(&self, t: &Tape, s: &ParamStore, h: Var, e: Var, idx: &EdgeIndex) -> Var {
        let wh = t.leaky_relu(t.matmul(h, t.param(s, self.gate_w)), LEAKY_SLOPE);
        let li = t.gather_rows(t.matmul(wh, t.param(s, self.gate_a[0])), idx.dst.clone());
        let lj = t.gather_rows(t.matmul(wh, t.param(s, self.gate_a[1])), idx.src.clone());
        let le = t.matmul(t.leaky_relu(e, LEAKY_SLOPE), t.param(s, self.gate_a[2]));
        t.sigmoid(t.add(t.add(li, lj), le))
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, h: Var, e: Var, idx: &EdgeIndex) -> (Var, Var) {
        if idx.is_empty() {
            let agg = t.zeros(idx.n_nodes, self.dim);
            let h2 = t.add(h, self.node_mlp.forward(t, s, t.concat_cols(&[h, agg])));
            return (h2, e);
        }
        let hi = t.gather_rows(h, idx.dst.clone());
        let hj = t.gather_rows(h, idx.src.clone());
        let m = self.edge_mlp.forward(t, s, t.concat_cols(&[hi, hj, e]));
        let weighted = match self.mode {
            Aggregation::Sum => m,
            Aggregation::Gated => t.mul_col(m, self.gate(t, s, h, e, idx)),
        };
        let agg = t.scatter_add_rows(weighted, idx.dst.clone(), idx.n_nodes);
        let h2 = t.add(h, self.node_mlp.forward(t, s, t.concat_cols(&[h, agg])));
        (h2, t.add(e, m))
    }
}

/// Mean and log-variance heads with reparametrized sampling.
#[derive(Debug, Clone)]
pub struct VaeHead {
    pub mu: Mlp,
    pub logvar: Mlp,
}

pub struct VaeOut {
    pub sample: Var,
    pub mu: Var,
    pub logvar: Var,
    pub kl: Var,
}

impl VaeHead {
    pub fn new<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, dim: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            mu: Mlp::new(s, &format!("{name}.mu"), &[dim, dim, dout], Activation::Relu, true, rng),
            logvar: Mlp::new(s, &format!("{name}.logvar"), &[dim, dim, dout], Activation::Relu, true, rng),
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, t: &Tape, s: &ParamStore, h: Var, rng: &mut R) -> VaeOut {
        let mu = self.mu.forward(t, s, h);
        let logvar = self.logvar.forward(t, s, h);
        let (r, c) = t.shape(mu);
        let xi = Mat::from_vec(r, c, (0..r * c).map(|_| StandardNormal.sample(rng)).collect());
        let sample = t.add(mu, t.mul(t.exp(t.scale(logvar, 0.5)), t.constant(xi)));
        let kl = kl_unit_normal(t, mu, logvar);
        VaeOut { sample, mu, logvar, kl }
    }
}

/// `1/2 sum(mu^2 + exp(logvar) - logvar - 1)`, averaged over rows.
pub fn kl_unit_normal(t: &Tape, mu: Var, logvar: Var) -> Var {
    let rows = t.shape(mu).0.max(1) as f64;
    let terms = t.sub(t.add(t.square(mu), t.exp(logvar)), t.add_scalar(logvar, 1.0));
    t.scale(t.sum(terms), 0.5 / rows)
}
