//! Loss components, normalization statistics and the four-stage training
//! curriculum.

use crate::archive::RolloutArchive;
use crate::consts::{DT, HISTORY, L_REF, U_REF};
use crate::coupling::IdwStencil;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::mesh::graph::{ChannelStats, EulerianGraph, N_STATE};
use crate::nn::model::{
    drag_factor, EulerianContext, LagFields, LagInput, ModelConfig, Normalizer, ParcelBatch, Variant, N_VEL_HIST,
};
use crate::nn::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
use crate::nn::{Mat, Model, Tape, Var};
use crate::projection::{divergence_tape, GraphOperators};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::rc::Rc;

/// Kinematic viscosity of air used by the momentum residual, m^2/s.
pub const NU_AIR: f64 = 1.5e-5;
/// SST constant.
pub const A1: f64 = 0.31;
/// Blending function value (taken as one).
pub const F2: f64 = 1.0;
/// Guard inside the strain square root.
const STRAIN_EPS: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub p: f64,
    pub c: f64,
    pub m: f64,
    pub t: f64,
    pub a: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            p: 1.0,
            c: 0.10,
            m: 0.05,
            t: 0.02,
            a: 0.001,
            kl: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.p, self.c, self.m, self.t, self.a, self.kl];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Optional scalar loss terms of one sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub p: Option<Var>,
    pub c: Option<Var>,
    pub m: Option<Var>,
    pub t: Option<Var>,
    pub a: Option<Var>,
    /// Present only with the VAE head.
    pub kl: Option<Var>,
}

/// Weighted sum of the present terms.
pub fn total_loss(t: &Tape, terms: &LossTerms, w: &LossWeights) -> Var {
    let mut acc = t.constant(Mat::scalar(0.0));
    for (v, k) in [
        (terms.p, w.p),
        (terms.c, w.c),
        (terms.m, w.m),
        (terms.t, w.t),
        (terms.a, w.a),
        (terms.kl, w.kl),
    ] {
        if let Some(v) = v {
            acc = t.add(acc, t.scale(v, k));
        }
    }
    acc
}

/// Masked mean over rows of `||pred - target||^2 / sigma_a2`.
pub fn loss_mse(t: &Tape, pred: Var, target: &Mat, mask: &[bool], sigma_a2: f64) -> Var {
    let keep: Vec<u32> = (0..mask.len()).filter(|&i| mask[i]).map(|i| i as u32).collect();
    if keep.is_empty() {
        log::warn!("acceleration loss over an empty mask");
        return t.constant(Mat::scalar(0.0));
    }
    let idx = Rc::new(keep);
    let p = t.gather_rows(pred, idx.clone());
    let y = t.gather_rows(t.constant(target.clone()), idx.clone());
    let se = t.row_sum(t.square(t.sub(p, y)));
    t.scale(t.sum(se), 1.0 / (sigma_a2 * idx.len() as f64))
}

/// Mean squared discrete divergence of an `n x 2` velocity block.
pub fn loss_continuity(t: &Tape, ops: &GraphOperators, u: Var) -> Var {
    t.mean(t.square(divergence_tape(t, ops, u)))
}

/// Per-cell residual of the discrete momentum equation between states
/// `q_t` and `q_t1` (`n x 5`), `n x 2`.
pub fn momentum_residual(t: &Tape, ops: &GraphOperators, q_t: Var, q_t1: Var, nu_t: Var) -> Var {
    let n = ops.n_cells;
    let u0 = t.slice_cols(q_t, 0, 2);
    let u1 = t.slice_cols(q_t1, 0, 2);
    let p1 = t.slice_cols(q_t1, 2, 1);
    let dudt = t.scale(t.sub(u1, u0), 1.0 / DT);
    let src = Rc::new(ops.edges.iter().map(|e| e.0).collect::<Vec<_>>());
    let dst = Rc::new(ops.edges.iter().map(|e| e.1).collect::<Vec<_>>());
    let uf = t.scale(t.add(t.gather_rows(u1, src.clone()), t.gather_rows(u1, dst)), 0.5);
    let s = t.constant(Mat::from_vec2(&ops.flux));
    let flux = t.row_sum(t.mul(uf, s));
    let inv_v = t.constant(Mat::col(ops.volumes.iter().map(|v| 1.0 / v).collect()));
    let conv = t.mul_col(t.scatter_add_rows(t.mul_col(uf, flux), src, n), inv_v);
    let lap = t.spmm(ops.laplacian.clone(), ops.laplacian_t.clone(), u1);
    let visc = t.mul_col(lap, t.add_scalar(nu_t, NU_AIR));
    let gp = t.reshape(t.spmm(ops.grad.clone(), ops.grad_t.clone(), p1), n, 2);
    t.add(t.sub(t.add(dudt, conv), visc), gp)
}

/// Volume-weighted mean squared momentum residual over `C_ref^2`.
pub fn loss_momentum(t: &Tape, ops: &GraphOperators, q_t: Var, q_t1: Var, nu_t: Var) -> Var {
    let r = momentum_residual(t, ops, q_t, q_t1, nu_t);
    let vol = t.constant(Mat::col(ops.volumes.clone()));
    let total: f64 = ops.volumes.iter().sum();
    let c_ref = U_REF / L_REF;
    t.scale(t.sum(t.mul(t.row_sum(t.square(r)), vol)), 1.0 / (total * c_ref * c_ref))
}

/// Strain-rate magnitude `sqrt(2 S:S)` per cell from graph gradients.
pub fn strain_magnitude(ops: &GraphOperators, u: &[Vec2]) -> Vec<f64> {
    let ux: Vec<f64> = u.iter().map(|v| v.x).collect();
    let uy: Vec<f64> = u.iter().map(|v| v.y).collect();
    let gx = ops.gradient(&ux);
    let gy = ops.gradient(&uy);
    gx.iter()
        .zip(&gy)
        .map(|(a, b)| {
            let sxy = 0.5 * (a.y + b.x);
            (2.0 * (a.x * a.x + b.y * b.y + 2.0 * sxy * sxy)).sqrt()
        })
        .collect()
}

/// Algebraic SST eddy viscosity `a1 k / max(a1 omega, S F2)`.
pub fn sst_nu_t(k: &[f64], omega: &[f64], s: &[f64]) -> Vec<f64> {
    k.iter()
        .zip(omega)
        .zip(s)
        .map(|((&k, &w), &s)| {
            let den = (A1 * w).max(s * F2).max(STRAIN_EPS);
            A1 * k / den
        })
        .collect()
}

/// Mean squared departure of `nu_t` (`n x 1`) from the SST relation.
pub fn loss_turbulence(t: &Tape, nu_t: Var, k: &[f64], omega: &[f64], s: &[f64]) -> Var {
    let target = t.constant(Mat::col(sst_nu_t(k, omega, s)));
    t.mean(t.square(t.sub(nu_t, target)))
}

/// Cloud-mean out-of-plane angular momentum about the centroid.
pub fn angular_momentum(t: &Tape, x: Var, v: Var) -> Var {
    let d = t.center_cols(x);
    let cross = t.sub(
        t.mul(t.slice_cols(d, 0, 1), t.slice_cols(v, 1, 1)),
        t.mul(t.slice_cols(d, 1, 1), t.slice_cols(v, 0, 1)),
    );
    t.mean(cross)
}

/// `(L_z(t1) - L_z(t))^2 / L_ref^4` over the given (alive) parcels.
pub fn loss_angular(t: &Tape, x0: Var, v0: Var, x1: Var, v1: Var) -> Var {
    if t.shape(x0).0 == 0 {
        return t.constant(Mat::scalar(0.0));
    }
    let d = t.sub(angular_momentum(t, x1, v1), angular_momentum(t, x0, v0));
    t.scale(t.square(d), 1.0 / L_REF.powi(4))
}

/// Training cases sharing one mesh.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: EulerianGraph,
    pub cases: Vec<RolloutArchive>,
}

impl Dataset {
    pub fn new(graph: EulerianGraph, cases: Vec<RolloutArchive>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Data("dataset has no cases".into()));
        }
        for (c, a) in cases.iter().enumerate() {
            a.validate()?;
            if a.frames.len() < HISTORY + 1 {
                return Err(Error::Data(format!("case {c} has only {} frames", a.frames.len())));
            }
            for f in &a.frames {
                match &f.eulerian {
                    Some(q) if q.len() == graph.n_cells() => {}
                    Some(q) => {
                        return Err(Error::Shape(format!(
                            "case {c}: carrier block has {} cells, mesh {}",
                            q.len(),
                            graph.n_cells()
                        )))
                    }
                    None => return Err(Error::Data(format!("case {c}: frame at t = {} lacks carrier state", f.time))),
                }
            }
        }
        Ok(Self { graph, cases })
    }

    /// Mesh graph file plus archive files.
    pub fn load(mesh: &Path, cases: &[PathBuf]) -> Result<Self> {
        let graph = crate::mesh::graph::load_graph(mesh)?;
        let cases = cases.iter().map(|p| RolloutArchive::load(p)).collect::<Result<Vec<_>>>()?;
        Self::new(graph, cases)
    }

    /// Synthetic vortex cases on the coarse room grid.
    pub fn toy(n_cases: usize) -> Result<Self> {
        use crate::refsim::{generate_case, CaseSpec};
        let graph = toy_graph()?;
        let cases = (0..n_cases)
            .map(|s| generate_case(&CaseSpec::toy(0.10, s as u64 + 1), &graph))
            .collect::<Result<Vec<_>>>()?;
        Self::with_initial_state(graph, cases)
    }

    /// Files named in `cfg`, or toy cases when it lists none. Without a mesh
    /// file the coarse room graph is used.
    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        if cfg.cases.is_empty() {
            return Self::toy(cfg.toy_cases);
        }
        let cases = cfg.cases.iter().map(|p| RolloutArchive::load(p)).collect::<Result<Vec<_>>>()?;
        match &cfg.mesh {
            Some(m) => Self::new(crate::mesh::graph::load_graph(m)?, cases),
            None => Self::with_initial_state(toy_graph()?, cases),
        }
    }

    /// Seeds the static graph state with the first carrier snapshot.
    fn with_initial_state(mut graph: EulerianGraph, cases: Vec<RolloutArchive>) -> Result<Self> {
        if let Some(q) = cases.first().and_then(|c| c.frames.first()).and_then(|f| f.eulerian.clone()) {
            if q.len() == graph.n_cells() {
                graph.state = q;
            }
        }
        Self::new(graph, cases)
    }

    fn q(&self, c: usize, t: usize) -> &[[f64; N_STATE]] {
        self.cases[c].frames[t].eulerian.as_deref().expect("carrier state")
    }
}

/// Graph of the coarse 20 x 15 room with a zero carrier state.
pub fn toy_graph() -> Result<EulerianGraph> {
    use crate::mesh::{build_eulerian_graph, build_room_mesh, RoomSpec};
    let mesh = build_room_mesh(&RoomSpec::toy())?;
    let n = mesh.n_cells();
    build_eulerian_graph(&mesh, vec![[0.0; N_STATE]; n], Vec2::new(0.0, -0.1))
}

/// A frame index `t` with `HISTORY - 1` earlier frames and at least one
/// later frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub case: usize,
    pub t: usize,
}

pub fn snapshots(data: &Dataset) -> Vec<Snapshot> {
    let mut out = Vec::new();
    for (c, a) in data.cases.iter().enumerate() {
        for t in HISTORY - 1..a.frames.len().saturating_sub(1) {
            out.push(Snapshot { case: c, t });
        }
    }
    out
}

/// Random split into (train, validation).
pub fn split(snaps: &[Snapshot], val_fraction: f64, seed: u64) -> (Vec<Snapshot>, Vec<Snapshot>) {
    let mut s = snaps.to_vec();
    s.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    let mut n_val = (val_fraction * s.len() as f64).round() as usize;
    if s.len() > 1 {
        n_val = n_val.clamp(1, s.len() - 1);
    } else {
        n_val = 0;
    }
    let val = s.split_off(s.len() - n_val);
    (s, val)
}

/// Parcel data of one snapshot over a window of `horizon` future frames.
#[derive(Debug, Clone)]
pub struct LagSample {
    pub batch: ParcelBatch,
    /// Positions at `t - 1`.
    pub x_prev: Vec<Vec2>,
    /// Positions at `t + 1 ..= t + horizon`.
    pub future: Vec<Vec<Vec2>>,
    /// Normalized second-difference accelerations at `t`.
    pub target: Mat,
}

pub fn lag_sample(a: &RolloutArchive, t: usize, horizon: usize, sigma_a: f64) -> LagSample {
    let f = &a.frames;
    let lo = t + 1 - HISTORY;
    let hi = (t + horizon).min(f.len() - 1);
    let idx: Vec<usize> = (0..f[t].len())
        .filter(|&i| (lo..=hi).all(|k| f[k].alive[i] && f[k].position[i].is_finite()))
        .collect();
    let pos = |k: usize| -> Vec<Vec2> { idx.iter().map(|&i| f[k].position[i]).collect() };
    let vel_hist = (0..N_VEL_HIST)
        .map(|j| {
            let (a0, a1) = (pos(lo + j), pos(lo + j + 1));
            a0.iter().zip(&a1).map(|(p, q)| (*q - *p) / DT).collect()
        })
        .collect();
    let x = pos(t);
    let x_prev = pos(t - 1);
    let future: Vec<Vec<Vec2>> = (t + 1..=hi).map(pos).collect();
    let target: Vec<Vec2> = x
        .iter()
        .zip(&x_prev)
        .zip(&future[0])
        .map(|((&x, &xp), &xn)| (xn - x * 2.0 + xp) / (DT * DT * sigma_a))
        .collect();
    let diameter: Vec<f64> = idx.iter().map(|&i| f[t].diameter[i]).collect();
    LagSample {
        batch: ParcelBatch {
            type_id: diameter.iter().map(|&d| crate::nn::model::size_class(d)).collect(),
            x,
            vel_hist,
            diameter,
        },
        x_prev,
        future,
        target: Mat::from_vec2(&target),
    }
}

fn floor(v: f64, lo: f64) -> f64 {
    if v.is_finite() && v > lo {
        v
    } else {
        1.0
    }
}

/// Normalization statistics over the training snapshots.
pub fn compute_normalizer(data: &Dataset, train: &[Snapshot], variant: Variant) -> Normalizer {
    let ops = GraphOperators::new(&data.graph);
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut drows: Vec<Vec<f64>> = Vec::new();
    let mut nu_sum = 0.0;
    let mut k_sum = 0.0;
    let mut n_cells = 0usize;
    let mut seen = std::collections::BTreeSet::new();
    for s in train {
        let q = data.q(s.case, s.t);
        let q1 = data.q(s.case, s.t + 1);
        if seen.insert((s.case, s.t)) {
            rows.extend(q.iter().map(|r| r.as_slice()));
            let u: Vec<Vec2> = q.iter().map(|r| Vec2::new(r[0], r[1])).collect();
            let sm = strain_magnitude(&ops, &u);
            let k: Vec<f64> = q.iter().map(|r| r[3]).collect();
            let w: Vec<f64> = q.iter().map(|r| r[4]).collect();
            nu_sum += sst_nu_t(&k, &w, &sm).iter().sum::<f64>();
            k_sum += k.iter().sum::<f64>();
            n_cells += q.len();
        }
        drows.extend(q.iter().zip(q1).map(|(a, b)| (0..N_STATE).map(|c| b[c] - a[c]).collect::<Vec<_>>()));
    }
    let state = ChannelStats::from_rows(rows, N_STATE);
    let dq = ChannelStats::from_rows(drows.iter().map(|r| r.as_slice()), N_STATE);
    let dq_std = dq.std.iter().zip(&state.std).map(|(&d, &s)| if d > 1e-9 * s { d } else { 1.0 }).collect();

    let mut acc = Vec::new();
    let mut v2 = 0.0;
    let mut nv = 0usize;
    let mut drag = Vec::new();
    let grid = crate::spatial::PointGrid::new(data.graph.centroids.clone());
    for s in train {
        let ls = lag_sample(&data.cases[s.case], s.t, 1, 1.0);
        acc.extend(ls.target.data.iter().copied());
        for v in ls.batch.vel_hist.last().expect("history") {
            v2 += v.norm_sq();
            nv += 1;
        }
        if variant == Variant::Elgin && !ls.batch.is_empty() {
            let q = data.q(s.case, s.t);
            let u: Vec<Vec2> = q.iter().map(|r| Vec2::new(r[0], r[1])).collect();
            let up = IdwStencil::build(&grid, &ls.batch.x).interpolate_vec(&u);
            let vnow = ls.batch.vel_hist.last().expect("history");
            for k in 0..up.len() {
                let d = (up[k] - vnow[k]) * drag_factor(ls.batch.diameter[k]);
                drag.push(vec![d.x, d.y]);
            }
        }
    }
    let n_acc = acc.len().max(1) as f64;
    let mean_a = acc.iter().sum::<f64>() / n_acc;
    let sigma_a = (acc.iter().map(|a| (a - mean_a).powi(2)).sum::<f64>() / n_acc).sqrt();
    Normalizer {
        state,
        dq_std,
        vel_scale: floor((v2 / nv.max(1) as f64).sqrt(), 1e-9),
        drag: if drag.is_empty() {
            ChannelStats::identity(2)
        } else {
            ChannelStats::from_rows(drag.iter().map(|r| r.as_slice()), 2)
        },
        k_scale: floor(k_sum / n_cells.max(1) as f64, 1e-12),
        sigma_a: floor(sigma_a, 1e-12),
        nu_scale: floor(nu_sum / n_cells.max(1) as f64, 1e-15),
    }
}

/// Per-stage schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub epochs: [usize; 4],
    pub lr: [f64; 4],
    /// Cosine floor as a fraction of the initial rate.
    pub lr_floor: f64,
    pub batch: usize,
    pub sigma_n: f64,
    pub sigma_n_stage4: f64,
    /// Position noise per unrolled step, m.
    pub sigma_roll: f64,
    pub w_bptt: f64,
    pub n_unroll: usize,
    pub pcg_iters: [usize; 4],
    pub clip: f64,
}

impl StagePlan {
    pub fn elgin() -> Self {
        Self {
            epochs: [60, 60, 120, 60],
            lr: [5e-4, 5e-4, 1e-4, 5e-5],
            lr_floor: 0.01,
            batch: 8,
            sigma_n: 3e-4,
            sigma_n_stage4: 6e-4,
            sigma_roll: 0.01,
            w_bptt: 0.7,
            n_unroll: 5,
            pcg_iters: [20, 20, 50, 50],
            clip: 1.0,
        }
    }

    pub fn m0() -> Self {
        Self {
            epochs: [0, 75, 150, 75],
            ..Self::elgin()
        }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::M0 => Self::m0(),
            Variant::Elgin => Self::elgin(),
        }
    }

    /// Epoch counts divided by ten, with a doubled stage-2 rate.
    pub fn toy(v: Variant) -> Self {
        let mut p = Self::for_variant(v);
        p.epochs = match v {
            Variant::Elgin => [6, 6, 12, 6],
            Variant::M0 => [0, 8, 15, 7],
        };
        p.lr[1] = 1e-3;
        p
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().sum()
    }

    pub fn validate(&self, v: Variant) -> Result<()> {
        if v == Variant::M0 && self.epochs[0] != 0 {
            return Err(Error::Config("the M0 variant has no Eulerian stage; set stage-1 epochs to 0".into()));
        }
        if self.batch == 0 || self.n_unroll == 0 {
            return Err(Error::Config("batch and n_unroll must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.w_bptt) {
            return Err(Error::Config("w_bptt must lie in [0, 1]".into()));
        }
        if self.lr.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        for s in [self.sigma_n, self.sigma_n_stage4, self.sigma_roll] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config("noise levels must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::elgin()
    }
}

/// Where the training cases come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Mesh graph file.
    pub mesh: Option<PathBuf>,
    pub cases: Vec<PathBuf>,
    /// Number of generated toy cases when no files are given.
    pub toy_cases: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mesh: None,
            cases: Vec::new(),
            toy_cases: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Hidden width override.
    pub d_h: Option<usize>,
    /// Message-passing depth override (both branches).
    pub depth: Option<usize>,
    pub vae: bool,
    pub stages: StagePlan,
    pub weights: LossWeights,
    /// Weight of the eddy-viscosity regularizer in Stage 1.
    pub sst_weight: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Elgin,
            d_h: None,
            depth: None,
            vae: false,
            stages: StagePlan::elgin(),
            weights: LossWeights::default(),
            sst_weight: 0.02,
            val_fraction: 0.15,
            seed: 0,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced model and epoch counts for the synthetic toy set.
    pub fn toy(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            d_h: Some(32),
            depth: Some(2),
            stages: StagePlan::toy(variant),
            seed,
            ..Self::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::for_variant(self.variant);
        if self.d_h.is_some() || self.depth.is_some() {
            let depth = self.depth.unwrap_or(c.k_l);
            let d_h = self.d_h.unwrap_or(c.d_h);
            c = c.scaled(d_h, depth);
        }
        c.vae = self.vae;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate(self.variant)?;
        self.weights.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !(self.sst_weight.is_finite() && self.sst_weight >= 0.0) {
            return Err(Error::Config("sst_weight must be nonnegative".into()));
        }
        self.model_config().validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub stage: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn log_to_csv(log: &[LogEntry]) -> String {
    let mut s = String::from("epoch,stage,train_loss,val_loss,lr\n");
    for e in log {
        s.push_str(&format!("{},{},{:e},{:e},{:e}\n", e.epoch, e.stage, e.train_loss, e.val_loss, e.lr));
    }
    s
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogEntry>,
}

/// Loss of a single snapshot and the gradients of all parameters.
pub struct SampleLoss {
    pub loss: f64,
    pub grads: Vec<Option<Mat>>,
}

/// Training state shared by the stages.
pub struct Trainer<'a> {
    pub model: Model,
    pub data: &'a Dataset,
    pub ctx: Option<EulerianContext>,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
}

fn state_mat(q: &[[f64; N_STATE]]) -> Mat {
    Mat::from_vec(q.len(), N_STATE, q.iter().flatten().copied().collect())
}

fn split_state(q: &[[f64; N_STATE]]) -> (Vec<Vec2>, Vec<f64>, Vec<f64>) {
    (
        q.iter().map(|r| Vec2::new(r[0], r[1])).collect(),
        q.iter().map(|r| r[3]).collect(),
        q.iter().map(|r| r[4]).collect(),
    )
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, data: &'a Dataset, cfg: TrainConfig) -> Self {
        let ctx = model.cfg.has_eulerian().then(|| EulerianContext::new(&data.graph));
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xA11CE));
        Self { model, data, ctx, cfg, rng }
    }

    fn ctx(&self) -> Result<&EulerianContext> {
        self.ctx
            .as_ref()
            .ok_or_else(|| Error::Variant("the M0 variant has no Eulerian branch".into()))
    }

    /// Eulerian terms of one step `q_a -> q_b`. Returns the predicted state
    /// and the weighted loss.
    fn eulerian_terms(&self, t: &Tape, qa: &[[f64; N_STATE]], qb: &[[f64; N_STATE]], stage: usize) -> Result<(Var, Var)> {
        let ctx = self.ctx()?;
        let ops = &ctx.ops;
        let qv = t.constant(state_mat(qa));
        let out = self.model.eulerian_forward(t, ctx, qv, self.cfg.stages.pcg_iters[stage - 1])?;
        let dq: Vec<f64> = qa
            .iter()
            .zip(qb)
            .flat_map(|(a, b)| (0..N_STATE).map(move |c| b[c] - a[c]))
            .collect();
        let dq_n = Mat::from_vec(qa.len(), N_STATE, dq).zip(
            &Mat::from_vec(
                qa.len(),
                N_STATE,
                (0..qa.len()).flat_map(|_| self.model.norm.dq_std.iter().copied()).collect(),
            ),
            |d, s| d / s,
        );
        let l_dq = t.mean(t.square(t.sub(out.dq_norm, t.constant(dq_n))));
        let cont = loss_continuity(t, ops, t.slice_cols(out.q_next, 0, 2));
        let (u, k, w) = split_state(qb);
        let s = strain_magnitude(ops, &u);
        let turb = loss_turbulence(t, out.nu_t, &k, &w, &s);
        let wts = &self.cfg.weights;
        let loss = if stage == 1 {
            t.add(t.add(l_dq, t.scale(cont, wts.c)), t.scale(turb, self.cfg.sst_weight))
        } else {
            let mom = loss_momentum(t, ops, qv, out.q_next, out.nu_t);
            let terms = LossTerms {
                c: Some(cont),
                m: Some(mom),
                t: Some(turb),
                ..LossTerms::default()
            };
            t.add(l_dq, total_loss(t, &terms, wts))
        };
        Ok((out.q_next, loss))
    }

    fn noisy_input(&mut self, t: &Tape, b: &ParcelBatch, sigma_n: f64) -> Result<LagInput> {
        let mut b = b.clone();
        if sigma_n > 0.0 {
            let nd = Normal::new(0.0, sigma_n).map_err(|e| Error::Config(e.to_string()))?;
            for h in &mut b.vel_hist {
                for v in h.iter_mut() {
                    *v += Vec2::new(nd.sample(&mut self.rng), nd.sample(&mut self.rng));
                }
            }
        }
        b.to_input(t, self.model.cfg.r_c, self.data.graph.bbox)
    }

    /// Loss of one snapshot in `stage` (1..=4); `train` switches on noise.
    pub fn sample_loss(&mut self, snap: Snapshot, stage: usize, train: bool) -> Result<SampleLoss> {
        let t = Tape::new();
        let loss = self.build_loss(&t, snap, stage, train)?;
        let loss_v = t.scalar(loss);
        let grads = if train && loss_v.is_finite() {
            t.backward(loss).param_grads(self.model.params.len())
        } else {
            Vec::new()
        };
        Ok(SampleLoss { loss: loss_v, grads })
    }

    pub fn build_loss(&mut self, t: &Tape, snap: Snapshot, stage: usize, train: bool) -> Result<Var> {
        let data = self.data;
        let case = &data.cases[snap.case];
        let sigma_a = self.model.norm.sigma_a;
        let plan = self.cfg.stages.clone();
        match stage {
            1 => {
                let (_, loss) = self.eulerian_terms(t, data.q(snap.case, snap.t), data.q(snap.case, snap.t + 1), 1)?;
                Ok(loss)
            }
            2 | 3 => {
                let ls = lag_sample(case, snap.t, 1, sigma_a);
                let sigma_n = if train { plan.sigma_n } else { 0.0 };
                let inp = self.noisy_input(t, &ls.batch, sigma_n)?;
                let (fields, eul_loss) = match (&self.ctx, stage) {
                    (None, _) => (None, None),
                    (Some(ctx), 2) => (Some(LagFields::constant(t, ctx, data.q(snap.case, snap.t))), None),
                    (Some(_), _) => {
                        let (q_hat, l) =
                            self.eulerian_terms(t, data.q(snap.case, snap.t - 1), data.q(snap.case, snap.t), 3)?;
                        (Some(LagFields::from_state(t, self.ctx()?, q_hat)), Some(l))
                    }
                };
                let out = self
                    .model
                    .lagrangian_forward(t, &inp, self.ctx.as_ref(), fields.as_ref(), &mut self.rng)?;
                let mask = vec![true; ls.batch.len()];
                let mse = loss_mse(t, out.accel, &ls.target, &mask, 1.0);
                let mut terms = LossTerms {
                    p: Some(mse),
                    kl: out.kl,
                    ..LossTerms::default()
                };
                if stage == 3 {
                    let x0 = t.constant(Mat::from_vec2(&ls.batch.x));
                    let xp = t.constant(Mat::from_vec2(&ls.x_prev));
                    let v0 = t.scale(t.sub(x0, xp), 1.0 / DT);
                    let x1 = t.add(t.sub(t.scale(x0, 2.0), xp), t.scale(out.accel, DT * DT * sigma_a));
                    let v1 = t.scale(t.sub(x1, x0), 1.0 / DT);
                    terms.a = Some(loss_angular(t, x0, v0, x1, v1));
                }
                let mut loss = total_loss(t, &terms, &self.cfg.weights);
                if let Some(l) = eul_loss {
                    loss = t.add(loss, l);
                }
                Ok(loss)
            }
            4 => {
                let sigma_n = if train { plan.sigma_n_stage4 } else { 0.0 };
                let sigma_roll = if train { plan.sigma_roll } else { 0.0 };
                self.bptt_loss(t, snap, plan.n_unroll, plan.w_bptt, sigma_n, sigma_roll)
            }
            _ => Err(Error::Config(format!("no stage {stage}"))),
        }
    }

    /// Position-form unroll of `n_unroll` steps from `snap`, mixed with the
    /// one-step acceleration loss.
    pub fn bptt_loss(&mut self, t: &Tape, snap: Snapshot, n_unroll: usize, w: f64, sigma_n: f64, sigma_roll: f64) -> Result<Var> {
        let data = self.data;
        let case = &data.cases[snap.case];
        let n_unroll = n_unroll.min(case.frames.len() - 1 - snap.t).max(1);
        let sigma_a = self.model.norm.sigma_a;
        let ls = lag_sample(case, snap.t, n_unroll, sigma_a);
        if ls.batch.is_empty() {
            return Ok(t.constant(Mat::scalar(0.0)));
        }
        let noise = Normal::new(0.0, sigma_roll.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let vnoise = Normal::new(0.0, sigma_n.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        // positions x_{t-4} .. x_t
        let mut xs: Vec<Var> = Vec::with_capacity(HISTORY + n_unroll);
        let x0 = t.constant(Mat::from_vec2(&ls.batch.x));
        let mut p = vec![x0];
        for v in ls.batch.vel_hist.iter().rev() {
            let prev = t.sub(*p.last().expect("nonempty"), t.scale(t.constant(Mat::from_vec2(v)), DT));
            p.push(prev);
        }
        p.reverse();
        xs.extend(p);
        let types = Rc::new(ls.batch.type_id.clone());
        let mut one_step = None;
        let mut roll = t.constant(Mat::scalar(0.0));
        for k in 0..n_unroll {
            let m = xs.len();
            let x_cur = xs[m - 1];
            let x_prev = xs[m - 2];
            let mut hist = Vec::with_capacity(N_VEL_HIST);
            for j in 0..N_VEL_HIST {
                let v = t.scale(t.sub(xs[m - N_VEL_HIST + j], xs[m - N_VEL_HIST + j - 1]), 1.0 / DT);
                let v = if sigma_n > 0.0 {
                    let nm = Mat::from_vec2(
                        &(0..ls.batch.len())
                            .map(|_| Vec2::new(vnoise.sample(&mut self.rng), vnoise.sample(&mut self.rng)))
                            .collect::<Vec<_>>(),
                    );
                    t.add(v, t.constant(nm))
                } else {
                    v
                };
                hist.push(v);
            }
            let inp = LagInput::build(
                t,
                x_cur,
                hist,
                ls.batch.diameter.clone(),
                types.clone(),
                self.model.cfg.r_c,
                data.graph.bbox,
            )?;
            let fields = self
                .ctx
                .as_ref()
                .map(|c| LagFields::constant(t, c, data.q(snap.case, snap.t + k)));
            let out = self
                .model
                .lagrangian_forward(t, &inp, self.ctx.as_ref(), fields.as_ref(), &mut self.rng)?;
            if k == 0 {
                let mask = vec![true; ls.batch.len()];
                one_step = Some(loss_mse(t, out.accel, &ls.target, &mask, 1.0));
            }
            let x_next = t.add(t.sub(t.scale(x_cur, 2.0), x_prev), t.scale(out.accel, DT * DT * sigma_a));
            let truth = t.constant(Mat::from_vec2(&ls.future[k]));
            let err = t.mean(t.row_sum(t.square(t.sub(x_next, truth))));
            roll = t.add(roll, t.scale(err, 1.0 / (L_REF * L_REF)));
            let fed = if sigma_roll > 0.0 {
                let nm = Mat::from_vec2(
                    &(0..ls.batch.len())
                        .map(|_| Vec2::new(noise.sample(&mut self.rng), noise.sample(&mut self.rng)))
                        .collect::<Vec<_>>(),
                );
                t.add(x_next, t.constant(nm))
            } else {
                x_next
            };
            xs.push(fed);
        }
        let roll = t.scale(roll, 1.0 / n_unroll as f64);
        let one = one_step.expect("at least one step");
        Ok(t.add(t.scale(one, 1.0 - w), t.scale(roll, w)))
    }

    fn set_stage_trainable(&mut self, stage: usize) {
        let (eul, lag) = match stage {
            1 => (true, false),
            2 => (false, true),
            3 => (true, true),
            _ => (false, true),
        };
        self.model.params.set_trainable("eul.", eul);
        self.model.params.set_trainable("lag.", lag);
    }

    fn mean_loss(&mut self, snaps: &[Snapshot], stage: usize) -> Result<f64> {
        if snaps.is_empty() {
            return Ok(f64::NAN);
        }
        let mut s = 0.0;
        for &sn in snaps {
            s += self.sample_loss(sn, stage, false)?.loss;
        }
        Ok(s / snaps.len() as f64)
    }

    /// One stage of `epochs` epochs, appending to `log`.
    pub fn run_stage(
        &mut self,
        stage: usize,
        train: &[Snapshot],
        val: &[Snapshot],
        first_epoch: usize,
        log: &mut Vec<LogEntry>,
    ) -> Result<()> {
        let plan = self.cfg.stages.clone();
        let epochs = plan.epochs[stage - 1];
        if epochs == 0 {
            return Ok(());
        }
        self.set_stage_trainable(stage);
        if train.is_empty() {
            return Err(Error::Data("no training snapshots".into()));
        }
        let mut batch = plan.batch;
        if train.len() < batch {
            log::warn!("{} training snapshots, reducing batch from {batch}", train.len());
            batch = train.len();
        }
        let mut opt = AdamW::new(AdamWConfig::default(), self.model.params.len());
        let mut lr_factor = 1.0;
        let mut order = train.to_vec();
        let mut checkpoint = self.model.params.values();
        for e in 0..epochs {
            let lr = lr_factor * cosine_lr(plan.lr[stage - 1], plan.lr_floor, e, epochs);
            order.shuffle(&mut self.rng);
            let mut sum = 0.0;
            let mut count = 0usize;
            for chunk in order.chunks(batch) {
                let mut acc: Vec<Option<Mat>> = vec![None; self.model.params.len()];
                let mut bl = 0.0;
                for &sn in chunk {
                    let sl = self.sample_loss(sn, stage, true)?;
                    bl += sl.loss;
                    for (a, g) in acc.iter_mut().zip(sl.grads) {
                        if let Some(g) = g {
                            match a {
                                Some(a) => a.add_assign(&g),
                                None => *a = Some(g),
                            }
                        }
                    }
                }
                let inv = 1.0 / chunk.len() as f64;
                let finite = bl.is_finite() && acc.iter().flatten().all(|g| g.is_finite());
                if !finite {
                    lr_factor *= 0.5;
                    log::warn!("non-finite loss in stage {stage}; restoring checkpoint, lr factor {lr_factor}");
                    self.model.params.restore(checkpoint.clone());
                    opt = AdamW::new(AdamWConfig::default(), self.model.params.len());
                    if lr_factor < 1e-6 {
                        return Err(Error::Aborted(format!("stage {stage} keeps diverging")));
                    }
                    continue;
                }
                for g in acc.iter_mut().flatten() {
                    for v in &mut g.data {
                        *v *= inv;
                    }
                }
                if stage == 4 {
                    clip_grad_norm(&mut acc, plan.clip);
                }
                let lr_now = lr_factor * cosine_lr(plan.lr[stage - 1], plan.lr_floor, e, epochs);
                opt.step(&mut self.model.params, &acc, lr_now);
                sum += bl;
                count += chunk.len();
            }
            let train_loss = if count > 0 { sum / count as f64 } else { f64::NAN };
            let val_loss = self.mean_loss(val, stage)?;
            if train_loss.is_finite() {
                checkpoint = self.model.params.values();
            }
            log::info!("stage {stage} epoch {} train {train_loss:.4e} val {val_loss:.4e} lr {lr:.2e}", first_epoch + e);
            log.push(LogEntry {
                epoch: first_epoch + e,
                stage,
                train_loss,
                val_loss,
                lr,
            });
        }
        Ok(())
    }
}

/// Full curriculum: statistics, model construction and the four stages.
pub fn run_curriculum(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let all = snapshots(data);
    let (train, val) = split(&all, cfg.val_fraction, cfg.seed);
    let norm = compute_normalizer(data, &train, cfg.variant);
    let model = Model::new(cfg.model_config(), norm, cfg.seed)?;
    let mut tr = Trainer::new(model, data, cfg.clone());
    let mut log = Vec::with_capacity(cfg.stages.total_epochs());
    let mut epoch = 1;
    for stage in 1..=4 {
        if stage == 1 && !tr.model.cfg.has_eulerian() {
            continue;
        }
        tr.run_stage(stage, &train, &val, epoch, &mut log)?;
        epoch += cfg.stages.epochs[stage - 1];
    }
    tr.model.params.set_trainable("", true);
    Ok(TrainOutcome { model: tr.model, log })
}

/// Gaussian sample helper for tests and synthetic fixtures.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
}
