//! The dual-branch surrogate: a graph-transformer Eulerian branch with
//! pressure projection and an interaction-network Lagrangian branch.

use super::layers::{Activation, Aggregation, EdgeIndex, Embedding, InteractionLayer, LayerNorm, Mlp, TransformerLayer, VaeHead};
use super::params::{read_checkpoint, write_checkpoint, ParamStore};
use super::tape::{Mat, Tape, Var};
use crate::consts::{DT, HISTORY, L_REF, U_REF};
use crate::error::{Error, Result};
use crate::geom::{Rect, Vec2};
use crate::mesh::boundary::BC_ID_RANGE;
use crate::mesh::graph::{ChannelStats, EulerianGraph, EDGE_GEOM, N_FACE_TYPES, N_STATE};
use crate::physics::{drag_relaxation_time, AirProperties, CcConvention, DropletProperties};
use crate::projection::{project_velocity_tape, GraphOperators};
use crate::spatial::PointGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::rc::Rc;

/// Velocity differences fed to the history encoder.
pub const N_VEL_HIST: usize = HISTORY - 1;
pub const BC_EMBED: usize = 8;
pub const FACE_EMBED: usize = 4;
pub const TYPE_EMBED: usize = 4;
pub const N_TYPES: usize = 4;
/// Eulerian node input: z-scored state, bbox distances, inlet vector, bc
/// embedding.
pub const EUL_NODE_IN: usize = N_STATE + 4 + 2 + BC_EMBED;
pub const EUL_EDGE_IN: usize = EDGE_GEOM + FACE_EMBED;
/// Lagrangian edge input: local frame (3) plus source drag (2).
pub const LAG_EDGE_IN: usize = 5;
pub const M0_EDGE_IN: usize = 3;
/// Reference diameter for the log-diameter feature (m).
pub const D_REF: f64 = 20e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    M0,
    #[serde(rename = "ELGIN", alias = "elgin")]
    Elgin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Verlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_h: usize,
    pub k_e: usize,
    pub k_l: usize,
    pub heads: usize,
    pub d_lstm: usize,
    pub r_c: f64,
    pub aggregation: Aggregation,
    pub integrator: Integrator,
    #[serde(default)]
    pub vae: bool,
}

impl ModelConfig {
    pub fn elgin() -> Self {
        Self {
            variant: Variant::Elgin,
            d_h: 64,
            k_e: 4,
            k_l: 4,
            heads: 4,
            d_lstm: 32,
            r_c: 0.10,
            aggregation: Aggregation::Gated,
            integrator: Integrator::Verlet,
            vae: false,
        }
    }

    pub fn m0() -> Self {
        Self {
            variant: Variant::M0,
            r_c: 0.30,
            aggregation: Aggregation::Sum,
            integrator: Integrator::Euler,
            ..Self::elgin()
        }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::M0 => Self::m0(),
            Variant::Elgin => Self::elgin(),
        }
    }

    /// Same architecture with a smaller width and depth.
    pub fn scaled(mut self, d_h: usize, depth: usize) -> Self {
        self.d_h = d_h;
        self.k_e = depth;
        self.k_l = depth;
        self
    }

    pub fn has_eulerian(&self) -> bool {
        self.variant == Variant::Elgin
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.heads == 0 || self.d_h % self.heads != 0 {
            return Err(Error::Config(format!("d_h {} must be a positive multiple of heads {}", self.d_h, self.heads)));
        }
        if !(self.r_c > 0.0) {
            return Err(Error::Config("r_c must be positive".into()));
        }
        let ok = match self.variant {
            Variant::M0 => self.aggregation == Aggregation::Sum && self.integrator == Integrator::Euler,
            Variant::Elgin => self.aggregation == Aggregation::Gated && self.integrator == Integrator::Verlet,
        };
        if !ok {
            return Err(Error::Config(format!("{:?} requires its own aggregation and integrator", self.variant)));
        }
        Ok(())
    }
}

/// Normalization constants stored with the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Per-channel statistics of the carrier state.
    pub state: ChannelStats,
    /// Per-channel scale of one-step state increments.
    pub dq_std: Vec<f64>,
    /// Scale of parcel velocities (m/s).
    pub vel_scale: f64,
    /// Per-component statistics of the drag feature (m/s^2).
    pub drag: ChannelStats,
    /// Scale of turbulent kinetic energy (m^2/s^2).
    pub k_scale: f64,
    /// Acceleration scale (m/s^2).
    pub sigma_a: f64,
    /// Eddy-viscosity scale (m^2/s).
    pub nu_scale: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            state: ChannelStats::identity(N_STATE),
            dq_std: vec![1.0; N_STATE],
            vel_scale: 1.0,
            drag: ChannelStats::identity(2),
            k_scale: 1.0,
            sigma_a: 1.0,
            nu_scale: 1.0,
        }
    }
}

/// `(1 - exp(-dt/tau))/dt` with `tau` the slip-corrected Stokes time: the
/// mean drag acceleration per unit slip over one model step.
pub fn drag_factor(d_p: f64) -> f64 {
    let air = AirProperties::default();
    let drop = DropletProperties::default();
    let tau = drag_relaxation_time(d_p.max(1e-9), 0.0, &air, &drop, CcConvention::Physical, false)
        .unwrap_or(f64::INFINITY);
    -(-DT / tau).exp_m1() / DT
}

/// Mesh-dependent constants shared by every Eulerian step.
#[derive(Debug, Clone)]
pub struct EulerianContext {
    pub ops: GraphOperators,
    pub idx: EdgeIndex,
    pub bc: Rc<Vec<u32>>,
    pub face: Rc<Vec<u32>>,
    /// Per cell: bbox distances over L_ref (4), inlet vector over U_ref (2).
    pub static_feats: Mat,
    pub edge_geom: Mat,
    pub centroids: Rc<Vec<Vec2>>,
    pub grid: PointGrid,
    pub d_wall: Mat,
    pub wall_normal: Mat,
    pub bbox: Rect,
}

impl EulerianContext {
    pub fn new(g: &EulerianGraph) -> Self {
        let n = g.n_cells();
        let vin = g.inlet_velocity / U_REF;
        let mut sf = Vec::with_capacity(n * 6);
        for c in &g.centroids {
            for d in g.bbox.signed_distances(*c) {
                sf.push(d / L_REF);
            }
            sf.push(vin.x);
            sf.push(vin.y);
        }
        let geom: Vec<f64> = g.edge_geom.iter().flatten().copied().collect();
        // Cells without a reachable wall get the room scale.
        let dw: Vec<f64> = g.d_wall.iter().map(|&d| if d.is_finite() { d } else { L_REF }).collect();
        Self {
            ops: GraphOperators::new(g),
            idx: EdgeIndex::new(&g.edges, n),
            bc: Rc::new(g.bc_id.iter().map(|&b| b as u32).collect()),
            face: Rc::new(g.face_type.iter().map(|&f| f as u32).collect()),
            static_feats: Mat::from_vec(n, 6, sf),
            edge_geom: Mat::from_vec(g.n_edges(), EDGE_GEOM, geom),
            centroids: Rc::new(g.centroids.clone()),
            grid: PointGrid::new(g.centroids.clone()),
            d_wall: Mat::col(dw),
            wall_normal: Mat::from_vec2(&g.wall_normal),
            bbox: g.bbox,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.ops.n_cells
    }
}

/// Carrier fields the Lagrangian branch samples at parcel positions.
#[derive(Debug, Clone, Copy)]
pub struct LagFields {
    /// `cells x 2` velocity (m/s).
    pub u: Var,
    /// `cells x 1` turbulent kinetic energy (m^2/s^2).
    pub k: Var,
    /// `cells x 1` wall distance (m).
    pub d_wall: Var,
    /// `cells x 2` wall normal.
    pub wall_normal: Var,
}

impl LagFields {
    /// Constant fields taken from a state array and the mesh.
    pub fn constant(t: &Tape, ctx: &EulerianContext, state: &[[f64; N_STATE]]) -> Self {
        let u = Mat::from_vec2(&state.iter().map(|q| Vec2::new(q[0], q[1])).collect::<Vec<_>>());
        let k = Mat::col(state.iter().map(|q| q[3]).collect());
        Self {
            u: t.constant(u),
            k: t.constant(k),
            d_wall: t.constant(ctx.d_wall.clone()),
            wall_normal: t.constant(ctx.wall_normal.clone()),
        }
    }

    /// Fields from a predicted `cells x 5` state.
    pub fn from_state(t: &Tape, ctx: &EulerianContext, q: Var) -> Self {
        Self {
            u: t.slice_cols(q, 0, 2),
            k: t.slice_cols(q, 3, 1),
            d_wall: t.constant(ctx.d_wall.clone()),
            wall_normal: t.constant(ctx.wall_normal.clone()),
        }
    }
}

/// Per-step inputs of the Lagrangian branch over a compacted set of alive
/// parcels.
#[derive(Debug, Clone)]
pub struct LagInput {
    /// `n x 2` positions (m).
    pub x: Var,
    /// `N_VEL_HIST` velocity blocks `n x 2` (m/s), oldest first; the last is
    /// the current velocity.
    pub vel_hist: Vec<Var>,
    pub edges: Rc<Vec<(u32, u32)>>,
    pub type_id: Rc<Vec<u32>>,
    pub diameter: Vec<f64>,
    pub bbox: Rect,
}

impl LagInput {
    /// Inputs from tape positions and history velocities; the radius graph
    /// is rebuilt from the current position values.
    pub fn build(
        t: &Tape,
        x: Var,
        vel_hist: Vec<Var>,
        diameter: Vec<f64>,
        type_id: Rc<Vec<u32>>,
        r_c: f64,
        bbox: Rect,
    ) -> Result<Self> {
        let xs = t.value(x).to_vec2();
        let alive = vec![true; xs.len()];
        let graph = crate::parcel::build_radius_graph(&xs, &alive, r_c)?;
        Ok(Self {
            x,
            vel_hist,
            edges: Rc::new(graph.edges),
            type_id,
            diameter,
            bbox,
        })
    }
}

/// Plain-array parcel inputs for a compacted set of parcels.
#[derive(Debug, Clone, PartialEq)]
pub struct ParcelBatch {
    pub x: Vec<Vec2>,
    /// `N_VEL_HIST` blocks of per-parcel velocities, oldest first.
    pub vel_hist: Vec<Vec<Vec2>>,
    pub diameter: Vec<f64>,
    pub type_id: Vec<u32>,
}

impl ParcelBatch {
    /// Batch of the cloud parcels listed in `idx`, velocities from the
    /// position history.
    pub fn from_cloud(cloud: &crate::parcel::ParcelCloud, idx: &[usize], dt: f64) -> Self {
        let hv: Vec<Vec<Vec2>> = idx.iter().map(|&i| cloud.history_velocities(i, dt)).collect();
        Self {
            x: idx.iter().map(|&i| cloud.position[i]).collect(),
            vel_hist: (0..N_VEL_HIST).map(|k| hv.iter().map(|h| h[k]).collect()).collect(),
            diameter: idx.iter().map(|&i| cloud.diameter[i]).collect(),
            type_id: idx.iter().map(|&i| size_class(cloud.diameter[i])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn to_input(&self, t: &Tape, r_c: f64, bbox: Rect) -> Result<LagInput> {
        let x = t.constant(Mat::from_vec2(&self.x));
        let vh = self.vel_hist.iter().map(|v| t.constant(Mat::from_vec2(v))).collect();
        LagInput::build(t, x, vh, self.diameter.clone(), Rc::new(self.type_id.clone()), r_c, bbox)
    }
}

/// Particle type from the diameter: four size classes split at 2.5, 5 and
/// 10 micrometres.
pub fn size_class(d: f64) -> u32 {
    match d {
        d if d < 2.5e-6 => 0,
        d if d < 5e-6 => 1,
        d if d < 10e-6 => 2,
        _ => 3,
    }
}

pub struct EulerOut {
    /// Projected next state, `cells x 5` (SI).
    pub q_next: Var,
    /// Decoder output in normalized increment units, `cells x 5`.
    pub dq_norm: Var,
    /// Velocity before projection, `cells x 2`.
    pub u_pre: Var,
    /// Eddy viscosity head, `cells x 1` (m^2/s).
    pub nu_t: Var,
}

pub struct LagOut {
    /// Normalized accelerations, `n x 2`.
    pub accel: Var,
    /// Normalized drag feature, `n x 2` (zero-width for M0).
    pub drag: Option<Var>,
    pub kl: Option<Var>,
}

#[derive(Debug, Clone)]
struct EulerianNet {
    bc_embed: Embedding,
    face_embed: Embedding,
    node_enc: Mlp,
    edge_enc: Mlp,
    blocks: Vec<TransformerLayer>,
    decoder: Mlp,
    nu_head: Mlp,
    proj_scale: usize,
}

#[derive(Debug, Clone)]
struct LagrangianNet {
    lstm: Option<super::layers::Lstm>,
    type_embed: Option<Embedding>,
    node_enc: Mlp,
    edge_enc: Mlp,
    node_ln: LayerNorm,
    edge_ln: LayerNorm,
    blocks: Vec<InteractionLayer>,
    decoder: Option<Mlp>,
    vae: Option<VaeHead>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub norm: Normalizer,
    eul: Option<EulerianNet>,
    lag: LagrangianNet,
}

fn mlp<R: Rng>(s: &mut ParamStore, name: &str, din: usize, d: usize, dout: usize, zero: bool, rng: &mut R) -> Mlp {
    Mlp::new(s, name, &[din, d, d, dout], Activation::Relu, zero, rng)
}

impl Model {
    pub fn new(cfg: ModelConfig, norm: Normalizer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d_h;
        let eul = if cfg.has_eulerian() {
            let bc_embed = Embedding::new(&mut s, "eul.bc_embed", BC_ID_RANGE, BC_EMBED, &mut rng);
            let face_embed = Embedding::new(&mut s, "eul.face_embed", N_FACE_TYPES, FACE_EMBED, &mut rng);
            let node_enc = mlp(&mut s, "eul.node_enc", EUL_NODE_IN, d, d, false, &mut rng);
            let edge_enc = mlp(&mut s, "eul.edge_enc", EUL_EDGE_IN, d, d, false, &mut rng);
            let blocks = (0..cfg.k_e)
                .map(|b| TransformerLayer::new(&mut s, &format!("eul.block{b}"), d, d, cfg.heads, &mut rng))
                .collect();
            let decoder = mlp(&mut s, "eul.decoder", d, d, N_STATE, true, &mut rng);
            let nu_head = mlp(&mut s, "eul.nu_head", d, d, 1, false, &mut rng);
            let proj_scale = s.add("eul.proj_scale", Mat::scalar(1.0));
            Some(EulerianNet {
                bc_embed,
                face_embed,
                node_enc,
                edge_enc,
                blocks,
                decoder,
                nu_head,
                proj_scale,
            })
        } else {
            None
        };
        let lag = match cfg.variant {
            Variant::Elgin => {
                let lstm = super::layers::Lstm::new(&mut s, "lag.lstm", 4, cfg.d_lstm, &mut rng);
                let type_embed = Embedding::new(&mut s, "lag.type_embed", N_TYPES, TYPE_EMBED, &mut rng);
                let din = Self::lag_node_width(&cfg);
                let node_enc = mlp(&mut s, "lag.node_enc", din, d, d, false, &mut rng);
                let edge_enc = mlp(&mut s, "lag.edge_enc", LAG_EDGE_IN, d, d, false, &mut rng);
                let blocks = (0..cfg.k_l)
                    .map(|b| InteractionLayer::new(&mut s, &format!("lag.block{b}"), d, cfg.aggregation, &mut rng))
                    .collect();
                let (decoder, vae) = if cfg.vae {
                    (None, Some(VaeHead::new(&mut s, "lag.vae", d, 2, &mut rng)))
                } else {
                    (Some(mlp(&mut s, "lag.decoder", d, d, 2, true, &mut rng)), None)
                };
                LagrangianNet {
                    lstm: Some(lstm),
                    type_embed: Some(type_embed),
                    node_enc,
                    edge_enc,
                    node_ln: LayerNorm::new(&mut s, "lag.node_ln", d),
                    edge_ln: LayerNorm::new(&mut s, "lag.edge_ln", d),
                    blocks,
                    decoder,
                    vae,
                }
            }
            Variant::M0 => {
                let din = Self::lag_node_width(&cfg);
                let node_enc = mlp(&mut s, "lag.node_enc", din, d, d, false, &mut rng);
                let edge_enc = mlp(&mut s, "lag.edge_enc", M0_EDGE_IN, d, d, false, &mut rng);
                let blocks = (0..cfg.k_l)
                    .map(|b| InteractionLayer::new(&mut s, &format!("lag.block{b}"), d, cfg.aggregation, &mut rng))
                    .collect();
                let (decoder, vae) = if cfg.vae {
                    (None, Some(VaeHead::new(&mut s, "lag.vae", d, 2, &mut rng)))
                } else {
                    (Some(mlp(&mut s, "lag.decoder", d, d, 2, true, &mut rng)), None)
                };
                LagrangianNet {
                    lstm: None,
                    type_embed: None,
                    node_enc,
                    edge_enc,
                    node_ln: LayerNorm::new(&mut s, "lag.node_ln", d),
                    edge_ln: LayerNorm::new(&mut s, "lag.edge_ln", d),
                    blocks,
                    decoder,
                    vae,
                }
            }
        };
        Ok(Self {
            cfg,
            params: s,
            norm,
            eul,
            lag,
        })
    }

    /// Width of the Lagrangian node input.
    pub fn lag_node_width(cfg: &ModelConfig) -> usize {
        match cfg.variant {
            // lstm, bbox, type, drag, log d, k, d_w, n_w
            Variant::Elgin => cfg.d_lstm + 4 + TYPE_EMBED + 2 + 1 + 1 + 1 + 2,
            Variant::M0 => 4 * N_VEL_HIST + 4,
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.params.n_scalars()
    }

    /// One Eulerian step from `q` (`cells x 5`, SI units).
    pub fn eulerian_forward(&self, t: &Tape, ctx: &EulerianContext, q: Var, pcg_iters: usize) -> Result<EulerOut> {
        let net = self
            .eul
            .as_ref()
            .ok_or_else(|| Error::Variant("the M0 variant has no Eulerian branch".into()))?;
        let s = &self.params;
        let n = ctx.n_cells();
        if t.shape(q) != (n, N_STATE) {
            return Err(Error::Shape(format!("state is {:?}, expected ({n}, {N_STATE})", t.shape(q))));
        }
        let st = &self.norm.state;
        let neg_mean = t.constant(Mat::row(st.mean.iter().map(|m| -m).collect()));
        let inv_std = t.constant(Mat::row(st.std.iter().map(|s| 1.0 / s).collect()));
        let z = t.mul_row(t.add_row(q, neg_mean), inv_std);
        let bc = net.bc_embed.forward(t, s, ctx.bc.clone());
        let x = t.concat_cols(&[z, t.constant(ctx.static_feats.clone()), bc]);
        let mut h = net.node_enc.forward(t, s, x);
        let face = net.face_embed.forward(t, s, ctx.face.clone());
        let e = net.edge_enc.forward(t, s, t.concat_cols(&[t.constant(ctx.edge_geom.clone()), face]));
        for b in &net.blocks {
            h = b.forward(t, s, h, e, &ctx.idx);
        }
        let dq_norm = net.decoder.forward(t, s, h);
        let dq = t.mul_row(dq_norm, t.constant(Mat::row(self.norm.dq_std.clone())));
        let raw = t.add(q, dq);
        let u_pre = t.slice_cols(raw, 0, 2);
        let scale = t.param(s, net.proj_scale);
        let u = project_velocity_tape(t, &ctx.ops, u_pre, pcg_iters, scale);
        let q_next = t.concat_cols(&[u, t.slice_cols(raw, 2, N_STATE - 2)]);
        let nu_t = t.scale(net.nu_head.forward(t, s, h), self.norm.nu_scale);
        Ok(EulerOut {
            q_next,
            dq_norm,
            u_pre,
            nu_t,
        })
    }

    /// Decoded normalized accelerations for the parcels in `inp`. `fields`
    /// is required for ELGIN and ignored by M0.
    pub fn lagrangian_forward<R: Rng + ?Sized>(
        &self,
        t: &Tape,
        inp: &LagInput,
        ctx: Option<&EulerianContext>,
        fields: Option<&LagFields>,
        rng: &mut R,
    ) -> Result<LagOut> {
        let s = &self.params;
        let net = &self.lag;
        let (n, _) = t.shape(inp.x);
        if inp.vel_hist.len() != N_VEL_HIST {
            return Err(Error::Shape(format!("expected {N_VEL_HIST} history velocities")));
        }
        let inv_v = 1.0 / self.norm.vel_scale;
        let inv_dv = 1.0 / (DT * self.norm.sigma_a);
        // each history step: scaled velocity and its scaled change
        let hist: Vec<Var> = inp
            .vel_hist
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let dv = if k == 0 {
                    t.zeros(n, 2)
                } else {
                    t.scale(t.sub(v, inp.vel_hist[k - 1]), inv_dv)
                };
                t.concat_cols(&[t.scale(v, inv_v), dv])
            })
            .collect();
        let bbox = bbox_features(t, inp.x, &inp.bbox);
        let idx = EdgeIndex::new(&inp.edges, n);
        let (node_in, edge_in, drag) = match self.cfg.variant {
            Variant::M0 => {
                let node = t.concat_cols(&[t.concat_cols(&hist), bbox]);
                let dst = t.gather_rows(inp.x, idx.dst.clone());
                let src = t.gather_rows(inp.x, idx.src.clone());
                let rel = t.scale(t.sub(src, dst), 1.0 / self.cfg.r_c);
                let dist = t.sqrt(t.row_sum(t.square(rel)));
                (node, t.concat_cols(&[rel, dist]), None)
            }
            Variant::Elgin => {
                let ctx = ctx.ok_or_else(|| Error::Variant("ELGIN needs the Eulerian context".into()))?;
                let f = fields.ok_or_else(|| Error::Variant("ELGIN needs carrier fields".into()))?;
                let xs = t.value(inp.x).to_vec2();
                let stencil = crate::coupling::IdwStencil::build(&ctx.grid, &xs);
                let cells = Rc::new(stencil.cells);
                let k = stencil.k;
                let interp = |field: Var| t.idw(inp.x, field, cells.clone(), k, ctx.centroids.clone(), stencil.eps);
                let u_p = interp(f.u);
                let k_p = t.scale(interp(f.k), 1.0 / self.norm.k_scale);
                let dw_p = t.scale(interp(f.d_wall), 1.0 / L_REF);
                let nw_p = interp(f.wall_normal);
                let v_now = *inp.vel_hist.last().expect("history");
                let factor = t.constant(Mat::col(inp.diameter.iter().map(|&d| drag_factor(d)).collect()));
                let drag_raw = t.mul_col(t.sub(u_p, v_now), factor);
                let dn = &self.norm.drag;
                let drag = t.mul_row(
                    t.add_row(drag_raw, t.constant(Mat::row(dn.mean.iter().map(|m| -m).collect()))),
                    t.constant(Mat::row(dn.std.iter().map(|s| 1.0 / s).collect())),
                );
                let log_d = t.constant(Mat::col(inp.diameter.iter().map(|&d| (d.max(1e-9) / D_REF).ln()).collect()));
                let lstm = net.lstm.as_ref().expect("lstm").forward(t, s, &hist);
                let ty = net.type_embed.as_ref().expect("type embedding").forward(t, s, inp.type_id.clone());
                let node = t.concat_cols(&[lstm, bbox, ty, drag, log_d, k_p, dw_p, nw_p]);
                let frame = t.local_frame_edges(inp.x, v_now, inp.edges.clone(), self.cfg.r_c);
                let edge = t.concat_cols(&[frame, t.gather_rows(drag, idx.dst.clone())]);
                (node, edge, Some(drag))
            }
        };
        let mut h = net.node_ln.forward(t, s, net.node_enc.forward(t, s, node_in));
        let mut e = net.edge_ln.forward(t, s, net.edge_enc.forward(t, s, edge_in));
        for b in &net.blocks {
            let (h2, e2) = b.forward(t, s, h, e, &idx);
            h = h2;
            e = e2;
        }
        if let Some(vae) = &net.vae {
            let out = vae.forward(t, s, h, rng);
            Ok(LagOut {
                accel: out.sample,
                drag,
                kl: Some(out.kl),
            })
        } else {
            Ok(LagOut {
                accel: net.decoder.as_ref().expect("decoder").forward(t, s, h),
                drag,
                kl: None,
            })
        }
    }

    fn header(&self) -> serde_json::Value {
        serde_json::json!({ "config": self.cfg, "norm": self.norm })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.header(), &self.params)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, store) = read_checkpoint(&mut &bytes[..])?;
        let cfg: ModelConfig = serde_json::from_value(header["config"].clone())?;
        let norm: Normalizer = serde_json::from_value(header["norm"].clone())?;
        let mut m = Self::new(cfg, norm, 0)?;
        if store.names() != m.params.names() {
            return Err(Error::Format("checkpoint parameters do not match the configuration".into()));
        }
        for id in 0..store.len() {
            let v = store.value(id);
            if !v.same_shape(m.params.value(id)) {
                return Err(Error::Format(format!("parameter '{}' has the wrong shape", store.name(id))));
            }
            *m.params.value_mut(id) = v.clone();
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let b = self.to_bytes()?;
        std::fs::write(path, b).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&b)
    }
}

/// Signed distances to the four bbox walls over L_ref, `n x 4`, linear in
/// the positions.
pub fn bbox_features(t: &Tape, x: Var, bbox: &Rect) -> Var {
    let m = Mat::from_vec(2, 4, vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
    let c = Mat::row(vec![-bbox.min.x, bbox.max.x, -bbox.min.y, bbox.max.y]);
    t.scale(t.add_row(t.matmul(x, t.constant(m)), t.constant(c)), 1.0 / L_REF)
}
