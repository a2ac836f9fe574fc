//! Autoregressive rollout of a trained model: integrators, deposition,
//! bounds clipping and archival.

use crate::archive::{ArchiveMeta, RolloutArchive};
use crate::consts::{DT, HISTORY};
use crate::error::{Error, Result};
use crate::geom::{Rect, Vec2};
use crate::mesh::graph::{EulerianGraph, N_STATE};
use crate::nn::model::{EulerianContext, Integrator, LagFields, Model, ParcelBatch};
use crate::nn::{Mat, Tape};
use crate::parcel::ParcelCloud;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub n_steps: usize,
    /// Adhesion threshold (m).
    pub delta_dep: f64,
    /// Inset of the clipping box (m).
    pub clip_inset: f64,
    /// Keep the carrier state at its initial snapshot.
    pub frozen_field: bool,
    pub pcg_iters: usize,
    /// Abort when more than this fraction of parcels is non-finite.
    pub max_nan_fraction: f64,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n_steps: 260,
            delta_dep: 0.01,
            clip_inset: 1e-6,
            frozen_field: false,
            pcg_iters: 50,
            max_nan_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Kick-drift-kick step. `accel` returns normalized accelerations at the
/// drifted positions; returns `(x', v', a')` with `a'` reusable as the next
/// step's `a_t`.
pub fn verlet_step(
    x: &[Vec2],
    v: &[Vec2],
    a_t: &[Vec2],
    mut accel: impl FnMut(&[Vec2]) -> Result<Vec<Vec2>>,
    dt: f64,
    sigma_a: f64,
) -> Result<(Vec<Vec2>, Vec<Vec2>, Vec<Vec2>)> {
    let half: Vec<Vec2> = v.iter().zip(a_t).map(|(&v, &a)| v + a * (0.5 * dt * sigma_a)).collect();
    let x1: Vec<Vec2> = x.iter().zip(&half).map(|(&x, &h)| x + h * dt).collect();
    let a1 = accel(&x1)?;
    let v1 = half.iter().zip(&a1).map(|(&h, &a)| h + a * (0.5 * dt * sigma_a)).collect();
    Ok((x1, v1, a1))
}

/// First-order explicit step `x' = x + dt v`, `v' = v + dt sigma_a a`.
pub fn euler_step(x: &[Vec2], v: &[Vec2], a: &[Vec2], dt: f64, sigma_a: f64) -> (Vec<Vec2>, Vec<Vec2>) {
    let x1 = x.iter().zip(v).map(|(&x, &v)| x + v * dt).collect();
    let v1 = v.iter().zip(a).map(|(&v, &a)| v + a * (dt * sigma_a)).collect();
    (x1, v1)
}

/// Adhesion rule on the interpolated wall distance and the box distance.
pub fn deposition_check(pos: Vec2, d_wall_interp: f64, bbox: &Rect, delta_dep: f64) -> bool {
    d_wall_interp.min(bbox.inner_distance(pos)) < delta_dep
}

/// Rollout result; `diagnostic` is set when the run stopped early.
#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub archive: RolloutArchive,
    pub diagnostic: Option<String>,
}

struct Engine<'a> {
    model: &'a Model,
    ctx: Option<EulerianContext>,
    bbox: Rect,
    rng: ChaCha8Rng,
}

impl Engine<'_> {
    /// Normalized accelerations of the parcels in `batch` under carrier
    /// state `q`.
    fn accel(&mut self, batch: &ParcelBatch, q: &[[f64; N_STATE]]) -> Result<Vec<Vec2>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let t = Tape::new();
        let inp = batch.to_input(&t, self.model.cfg.r_c, self.bbox)?;
        let fields = self.ctx.as_ref().map(|c| LagFields::constant(&t, c, q));
        let out = self
            .model
            .lagrangian_forward(&t, &inp, self.ctx.as_ref(), fields.as_ref(), &mut self.rng)?;
        Ok(t.value(out.accel).to_vec2())
    }

    fn advance_field(&self, q: &[[f64; N_STATE]], iters: usize) -> Result<Vec<[f64; N_STATE]>> {
        let ctx = self.ctx.as_ref().expect("Eulerian context");
        let t = Tape::new();
        let qv = t.constant(Mat::from_vec(q.len(), N_STATE, q.iter().flatten().copied().collect()));
        let out = self.model.eulerian_forward(&t, ctx, qv, iters)?;
        let m = t.value(out.q_next);
        Ok((0..q.len())
            .map(|i| {
                let r = m.row_slice(i);
                [r[0], r[1], r[2], r[3], r[4]]
            })
            .collect())
    }
}

fn interp_wall_distance(ctx: Option<&EulerianContext>, graph: &EulerianGraph, pos: &[Vec2]) -> Vec<f64> {
    match ctx {
        Some(c) => {
            let st = crate::coupling::IdwStencil::build(&c.grid, pos);
            st.interpolate(&c.d_wall.data)
        }
        None => {
            let grid = crate::spatial::PointGrid::new(graph.centroids.clone());
            let st = crate::coupling::IdwStencil::build(&grid, pos);
            let dw: Vec<f64> = graph.d_wall.iter().map(|&d| if d.is_finite() { d } else { f64::INFINITY }).collect();
            st.interpolate(&dw)
        }
    }
}

/// Roll the model forward from the first `HISTORY` frames of `reference`.
pub fn rollout(model: &Model, graph: &EulerianGraph, reference: &RolloutArchive, cfg: &RolloutConfig) -> Result<RolloutOutcome> {
    if reference.frames.len() < HISTORY {
        return Err(Error::Data(format!("need {HISTORY} priming frames, archive has {}", reference.frames.len())));
    }
    let prime = &reference.frames[..HISTORY];
    let mut cloud = ParcelCloud::from_frames(prime)?;
    for i in 0..cloud.len() {
        cloud.type_id[i] = crate::nn::model::size_class(cloud.diameter[i]) as u8;
    }
    let ctx = model.cfg.has_eulerian().then(|| EulerianContext::new(graph));
    let mut eng = Engine {
        model,
        ctx,
        bbox: graph.bbox,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let sigma_a = model.norm.sigma_a;
    let mut q: Vec<[f64; N_STATE]> = prime[0].eulerian.clone().unwrap_or_else(|| graph.state.clone());
    if q.len() != graph.n_cells() {
        return Err(Error::Shape(format!("carrier snapshot has {} cells, mesh {}", q.len(), graph.n_cells())));
    }
    if eng.ctx.is_some() && !cfg.frozen_field {
        for _ in 1..HISTORY {
            q = eng.advance_field(&q, cfg.pcg_iters)?;
        }
    }
    let active = |c: &ParcelCloud| -> Vec<usize> { (0..c.len()).filter(|&i| c.alive[i] && !c.deposited[i]).collect() };

    // Initial velocities and cached accelerations at the last priming frame.
    let idx = active(&cloud);
    let batch = ParcelBatch::from_cloud(&cloud, &idx, DT);
    let a0 = eng.accel(&batch, &q)?;
    let mut acc = vec![Vec2::ZERO; cloud.len()];
    for (k, &i) in idx.iter().enumerate() {
        let vb = batch.vel_hist[batch.vel_hist.len() - 1][k];
        acc[i] = a0[k];
        cloud.velocity[i] = match model.cfg.integrator {
            Integrator::Verlet => vb + a0[k] * (0.5 * DT * sigma_a),
            Integrator::Euler => vb,
        };
    }

    let t0 = prime[HISTORY - 1].time;
    let mut meta = ArchiveMeta {
        variant: format!("{:?}", model.cfg.variant).to_uppercase(),
        ..reference.meta.clone()
    };
    meta.extra = serde_json::json!({
        "priming_frames": HISTORY,
        "priming_end": t0,
        "rollout": cfg,
        "reference_variant": reference.meta.variant,
    });
    let mut out = RolloutArchive::new(meta);
    let n = cloud.len();
    let mut diagnostic = None;

    for step in 1..=cfg.n_steps {
        if eng.ctx.is_some() && !cfg.frozen_field {
            q = eng.advance_field(&q, cfg.pcg_iters)?;
        }
        let idx = active(&cloud);
        let xs: Vec<Vec2> = idx.iter().map(|&i| cloud.position[i]).collect();
        let vs: Vec<Vec2> = idx.iter().map(|&i| cloud.velocity[i]).collect();
        let a_t: Vec<Vec2> = idx.iter().map(|&i| acc[i]).collect();
        let clip = |p: Vec2| if p.is_finite() { eng_clip(p, &graph.bbox, cfg.clip_inset) } else { p };
        let (x1, v1, a1) = match model.cfg.integrator {
            Integrator::Verlet => {
                let mut cl = cloud.clone();
                let (x1, v1, a1) = verlet_step(
                    &xs,
                    &vs,
                    &a_t,
                    |xd| {
                        for (k, &i) in idx.iter().enumerate() {
                            cl.position[i] = clip(xd[k]);
                        }
                        cl.push_history();
                        let b = ParcelBatch::from_cloud(&cl, &idx, DT);
                        eng.accel(&b, &q)
                    },
                    DT,
                    sigma_a,
                )?;
                (x1, v1, a1)
            }
            Integrator::Euler => {
                let (x1, v1) = euler_step(&xs, &vs, &a_t, DT, sigma_a);
                (x1, v1, Vec::new())
            }
        };
        for (k, &i) in idx.iter().enumerate() {
            cloud.position[i] = clip(x1[k]);
            cloud.velocity[i] = v1[k];
            if !a1.is_empty() {
                acc[i] = a1[k];
            }
        }
        for i in 0..n {
            if cloud.alive[i] && cloud.deposited[i] {
                cloud.velocity[i] = Vec2::ZERO;
            }
        }
        cloud.push_history();
        if model.cfg.integrator == Integrator::Euler {
            let idx = active(&cloud);
            let b = ParcelBatch::from_cloud(&cloud, &idx, DT);
            let a = eng.accel(&b, &q)?;
            for (k, &i) in idx.iter().enumerate() {
                acc[i] = a[k];
            }
        }
        // mask non-finite parcels
        let mut n_bad = 0;
        for i in 0..n {
            if cloud.alive[i] && !(cloud.position[i].is_finite() && cloud.velocity[i].is_finite() && acc[i].is_finite()) {
                cloud.kill(i);
                cloud.position[i] = Vec2::new(f64::NAN, f64::NAN);
                n_bad += 1;
            } else if !cloud.alive[i] && !cloud.position[i].is_finite() {
                n_bad += 1;
            }
        }
        let idx = active(&cloud);
        let pos: Vec<Vec2> = idx.iter().map(|&i| cloud.position[i]).collect();
        let dw = interp_wall_distance(eng.ctx.as_ref(), graph, &pos);
        for (k, &i) in idx.iter().enumerate() {
            if deposition_check(pos[k], dw[k], &graph.bbox, cfg.delta_dep) {
                cloud.deposited[i] = true;
                cloud.velocity[i] = Vec2::ZERO;
            }
        }
        let mut frame = cloud.to_frame(t0 + step as f64 * DT);
        if eng.ctx.is_some() {
            frame.eulerian = Some(q.clone());
        }
        out.frames.push(frame);
        if n > 0 && n_bad as f64 > cfg.max_nan_fraction * n as f64 {
            diagnostic = Some(format!(
                "aborted after {step} steps: {n_bad} of {n} parcels non-finite"
            ));
            break;
        }
    }
    Ok(RolloutOutcome { archive: out, diagnostic })
}

fn eng_clip(p: Vec2, bbox: &Rect, inset: f64) -> Vec2 {
    bbox.clamp_inset(p, inset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn energy(x: f64, v: f64, w: f64) -> f64 {
        0.5 * v * v + 0.5 * w * w * x * x
    }

    #[test]
    fn free_particle_step() {
        let (x, v, a) = verlet_step(&[Vec2::new(1.0, 2.0)], &[Vec2::new(0.5, -1.0)], &[Vec2::ZERO], |x| Ok(vec![Vec2::ZERO; x.len()]), 0.1, 3.0).unwrap();
        assert_eq!(x[0], Vec2::new(1.05, 1.9));
        assert_eq!(v[0], Vec2::new(0.5, -1.0));
        assert_eq!(a[0], Vec2::ZERO);
    }

    #[test]
    fn oscillator_energy_bounded_euler_grows() {
        let w = 1.0;
        let dt = 0.1;
        let mut x = vec![Vec2::new(1.0, 0.0)];
        let mut v = vec![Vec2::ZERO];
        let mut a = vec![Vec2::new(-w * w, 0.0)];
        let e0 = energy(1.0, 0.0, w);
        let mut max_err: f64 = 0.0;
        for _ in 0..10_000 {
            let (x1, v1, a1) = verlet_step(&x, &v, &a, |x| Ok(x.iter().map(|p| *p * (-w * w)).collect()), dt, 1.0).unwrap();
            x = x1;
            v = v1;
            a = a1;
            max_err = max_err.max((energy(x[0].x, v[0].x, w) - e0).abs() / e0);
        }
        assert!(max_err < 3e-3);
        let (mut xe, mut ve) = (vec![Vec2::new(1.0, 0.0)], vec![Vec2::ZERO]);
        let mut prev = e0;
        for _ in 0..100 {
            let ae: Vec<Vec2> = xe.iter().map(|p| *p * (-w * w)).collect();
            let (x1, v1) = euler_step(&xe, &ve, &ae, dt, 1.0);
            xe = x1;
            ve = v1;
            let e = energy(xe[0].x, ve[0].x, w);
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn deposition_rule() {
        let bbox = Rect::new(Vec2::ZERO, Vec2::new(4.0, 3.0));
        assert!(!deposition_check(Vec2::new(2.0, 1.5), 1.5, &bbox, 0.01));
        assert!(deposition_check(Vec2::new(2.0, 0.001), 0.001, &bbox, 0.01));
    }
}
