//! Reference simulator: an analytic stream-function room flow and a
//! fine-step parcel integrator producing archives in the extraction layout.

use crate::archive::{ArchiveMeta, RolloutArchive};
use crate::error::{Error, Result};
use crate::geom::{Rect, Vec2};
use crate::mesh::graph::{EulerianGraph, N_STATE};
use crate::mesh::boundary::{classify_patch, BoundaryClass};
use crate::mesh::fields::write_field;
use crate::mesh::polymesh::write_polymesh;
use crate::mesh::room::{build_room_mesh, in_obstacle, RoomSpec, INLET_X, NOZZLE, OUTLET_Y};
use crate::parcel::Frame;
use crate::physics::{
    cunningham, drag_relaxation_time, drw_correlation_time, drw_sample, inlet_turbulence, saffman_lift, tau_p,
    wells_evaporate, wells_k, AirProperties, CcConvention, DropletProperties, RosinRammler,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Speed above which a sub-step is treated as unstable (m/s).
pub const MAX_PARCEL_SPEED: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vortex {
    pub center: Vec2,
    pub radius: f64,
    /// Stream-function amplitude (m^2/s); positive is counter-clockwise.
    pub strength: f64,
}

/// Analytic carrier flow `u = (d psi/dy, -d psi/dx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFlow {
    pub v_in: f64,
    pub bbox: Rect,
    /// Ceiling jet centre (m), half width (m) and decay length (m).
    pub jet_x: f64,
    pub jet_width: f64,
    pub jet_decay: f64,
    pub vortices: Vec<Vortex>,
    /// Relative amplitude and period (s) of the vortex-strength oscillation.
    pub modulation: f64,
    pub period: f64,
    pub sink: Vec2,
    pub sink_strength: f64,
    pub sink_core: f64,
    pub k0: f64,
    pub omega0: f64,
    pub obstacles: bool,
    /// Upper bound on the carrier speed (m/s).
    pub cap: f64,
}

impl SyntheticFlow {
    /// Flow for an inlet speed; `variation` in `[0, 1)` perturbs the vortex
    /// strengths so different cases have distinct recirculation.
    pub fn for_case(v_in: f64, bbox: Rect, variation: f64, obstacles: bool) -> Self {
        let (k0, omega0) = inlet_turbulence(v_in);
        let f = 0.8 + 0.4 * variation;
        let w = bbox.width();
        let h = bbox.height();
        let mut flow = Self {
            v_in,
            bbox,
            jet_x: 0.5 * (INLET_X.0 + INLET_X.1) * w / 4.0,
            jet_width: 0.5 * (INLET_X.1 - INLET_X.0),
            jet_decay: 0.8,
            vortices: vec![
                // recirculation over the patient, wrapping the spray region
                Vortex {
                    center: Vec2::new(0.475 * w, 0.37 * h),
                    radius: 0.125 * w,
                    strength: 0.5 * f * v_in,
                },
                Vortex {
                    center: Vec2::new(0.75 * w, 0.6 * h),
                    radius: 0.15 * w,
                    strength: -0.4 * (2.0 - f) * v_in,
                },
            ],
            modulation: 0.2,
            period: 8.0,
            sink: Vec2::new(bbox.max.x, 0.5 * (OUTLET_Y.0 + OUTLET_Y.1) * h / 3.0),
            sink_strength: 0.05 * v_in,
            sink_core: 0.1,
            k0,
            omega0,
            obstacles,
            cap: 0.0,
        };
        flow.cap = flow.speed_bound();
        flow
    }

    /// Quiescent air.
    pub fn still(bbox: Rect) -> Self {
        let mut f = Self::for_case(0.0, bbox, 0.0, false);
        f.vortices.clear();
        f
    }

    /// Analytic upper bound of `|u|` summed over the terms.
    pub fn speed_bound(&self) -> f64 {
        let jet = self.v_in * (1.0 + (self.jet_width / self.jet_decay).powi(2)).sqrt();
        let vort: f64 = self
            .vortices
            .iter()
            .map(|v| v.strength.abs() * (1.0 + self.modulation) * 2f64.sqrt() / v.radius * (-0.5f64).exp())
            .sum();
        // tangential (1-e^{-s})/r <= 0.639/r0, radial (pi/2) 2r/r0^2 e^{-s} <= 1.348/r0
        let sink = self.sink_strength.abs() * (0.639 + 1.348) / self.sink_core;
        jet + vort + sink
    }

    fn vortex_factor(&self, t: f64) -> f64 {
        1.0 + self.modulation * (std::f64::consts::TAU * t / self.period).sin()
    }

    /// Stream function (m^2/s).
    pub fn stream(&self, p: Vec2, t: f64) -> f64 {
        let p = self.clamp(p);
        let top = self.bbox.max.y;
        let mut psi = self.v_in * self.jet_width * ((p.x - self.jet_x) / self.jet_width).tanh() * (-(top - p.y) / self.jet_decay).exp();
        let vf = self.vortex_factor(t);
        for v in &self.vortices {
            psi += vf * v.strength * (-(p - v.center).norm_sq() / (v.radius * v.radius)).exp();
        }
        let d = p - self.sink;
        let theta = (-d.y).atan2(-d.x);
        psi += self.sink_strength * theta * (1.0 - (-d.norm_sq() / (self.sink_core * self.sink_core)).exp());
        psi
    }

    fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(p.x.clamp(self.bbox.min.x, self.bbox.max.x), p.y.clamp(self.bbox.min.y, self.bbox.max.y))
    }

    /// Carrier velocity; points outside the room take the boundary value.
    pub fn velocity(&self, p: Vec2, t: f64) -> Vec2 {
        let p = self.clamp(p);
        let top = self.bbox.max.y;
        let s = (p.x - self.jet_x) / self.jet_width;
        let decay = (-(top - p.y) / self.jet_decay).exp();
        let th = s.tanh();
        // jet
        let mut dpdx = self.v_in * (1.0 - th * th) * decay;
        let mut dpdy = self.v_in * self.jet_width * th * decay / self.jet_decay;
        // vortices
        let vf = self.vortex_factor(t);
        for v in &self.vortices {
            let d = p - v.center;
            let r2 = v.radius * v.radius;
            let g = vf * v.strength * (-d.norm_sq() / r2).exp() * (-2.0 / r2);
            dpdx += g * d.x;
            dpdy += g * d.y;
        }
        // regularized sink
        let d = p - self.sink;
        let rr = d.norm_sq();
        if rr > 0.0 {
            let c2 = self.sink_core * self.sink_core;
            let e = (-rr / c2).exp();
            let theta = (-d.y).atan2(-d.x);
            // grad theta = (-dy, dx)/r^2 for this branch
            let gt = Vec2::new(-d.y, d.x) / rr;
            let gr = d * (2.0 * e / c2);
            dpdx += self.sink_strength * (gt.x * (1.0 - e) + theta * gr.x);
            dpdy += self.sink_strength * (gt.y * (1.0 - e) + theta * gr.y);
        }
        Vec2::new(dpdy, -dpdx)
    }

    /// Velocity gradient by central differences, `[[du/dx, du/dy], [dv/dx, dv/dy]]`.
    pub fn velocity_gradient(&self, p: Vec2, t: f64) -> [[f64; 2]; 2] {
        let h = 1e-5;
        let ux = (self.velocity(p + Vec2::new(h, 0.0), t) - self.velocity(p - Vec2::new(h, 0.0), t)) / (2.0 * h);
        let uy = (self.velocity(p + Vec2::new(0.0, h), t) - self.velocity(p - Vec2::new(0.0, h), t)) / (2.0 * h);
        [[ux.x, uy.x], [ux.y, uy.y]]
    }

    /// Turbulent kinetic energy: inlet level decaying away from the jet and
    /// damped towards the walls.
    pub fn k(&self, p: Vec2) -> f64 {
        let p = self.clamp(p);
        let src = Vec2::new(self.jet_x, self.bbox.max.y);
        let d_w = if self.obstacles {
            crate::mesh::room::analytic_wall_distance(p, &self.bbox)
        } else {
            self.bbox.inner_distance(p).max(0.0)
        };
        self.k0 * (0.3 + 0.7 * (-(p - src).norm() / 0.8).exp()) * (1.0 - (-d_w / 0.05).exp())
    }

    /// `(Ux, Uy, p, k, omega)` with the kinematic pressure `-|u|^2/2`.
    pub fn state(&self, p: Vec2, t: f64) -> [f64; N_STATE] {
        let u = self.velocity(p, t);
        [u.x, u.y, -0.5 * u.norm_sq(), self.k(p), self.omega0]
    }

    pub fn cell_state(&self, centroids: &[Vec2], t: f64) -> Vec<[f64; N_STATE]> {
        centroids.iter().map(|&c| self.state(c, t)).collect()
    }

    pub fn is_solid(&self, p: Vec2) -> bool {
        !self.bbox.contains(p) || (self.obstacles && in_obstacle(p))
    }
}

/// Forces and models switched on in the parcel integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub gravity: bool,
    pub drw: bool,
    pub brownian: bool,
    pub saffman: bool,
    pub evaporation: bool,
    pub finite_re: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            gravity: true,
            drw: true,
            brownian: false,
            saffman: false,
            evaporation: true,
            finite_re: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseSpec {
    pub name: String,
    pub v_in: f64,
    pub u_mag: f64,
    /// Cone half-angle (deg).
    pub theta: f64,
    pub seed: u64,
    pub duration: f64,
    pub save_interval: f64,
    pub t_start: f64,
    pub n_frames: usize,
    /// Parcels per second.
    pub injection_rate: f64,
    /// Liquid flow rate (m^3/s), recorded only.
    pub flow_rate: f64,
    /// Number of first-injected parcels simulated and archived.
    pub n_tracked: usize,
    pub substep: f64,
    pub options: SimOptions,
    pub obstacles: bool,
    /// Vortex-strength perturbation in `[0, 1)`.
    pub variation: f64,
    pub store_eulerian: bool,
    /// Parcels start uniformly inside a disc of this radius around the
    /// nozzle (m); zero releases every parcel at the nozzle.
    pub release_radius: f64,
    pub size: RosinRammler,
}

impl Default for CaseSpec {
    fn default() -> Self {
        Self {
            name: "case".into(),
            v_in: 0.10,
            u_mag: 30.0,
            theta: 20.0,
            seed: 0,
            duration: 30.0,
            save_interval: 0.1,
            t_start: 2.0,
            n_frames: 261,
            injection_rate: 5000.0,
            flow_rate: 5e-9,
            n_tracked: 1000,
            substep: 1e-3,
            options: SimOptions::default(),
            obstacles: true,
            variation: 0.5,
            store_eulerian: true,
            release_radius: 0.0,
            size: RosinRammler::default(),
        }
    }
}

impl CaseSpec {
    /// Small deterministic vortex case: 200 parcels, 60 frames, no
    /// turbulent fluctuations.
    pub fn toy(v_in: f64, seed: u64) -> Self {
        Self {
            options: SimOptions {
                drw: false,
                ..SimOptions::default()
            },
            name: format!("toy_{seed}"),
            v_in,
            seed,
            n_tracked: 200,
            n_frames: 60,
            duration: 8.0,
            variation: ((seed as f64) * 0.618_033_988_75).fract(),
            release_radius: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if !(self.save_interval > 0.0 && self.substep > 0.0) {
            return Err(Error::Config("save interval and sub-step must be positive".into()));
        }
        let ratio = self.save_interval / self.substep;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config("save interval must be a multiple of the sub-step".into()));
        }
        let t_end = self.t_start + (self.n_frames.max(1) - 1) as f64 * self.save_interval;
        if t_end > self.duration + 1e-9 {
            return Err(Error::Config(format!("last frame at {t_end} s exceeds duration {} s", self.duration)));
        }
        if !(self.release_radius >= 0.0 && self.release_radius.is_finite()) {
            return Err(Error::Config("release radius must be nonnegative".into()));
        }
        if self.injection_rate < 0.0 {
            return Err(Error::Config("injection rate must be nonnegative".into()));
        }
        if self.injection_rate > 0.0 && self.n_tracked as f64 / self.injection_rate > self.t_start + 1e-12 {
            return Err(Error::Config("tracked parcels must all be injected before the first frame".into()));
        }
        Ok(())
    }

    pub fn n_parcels(&self) -> usize {
        if self.injection_rate > 0.0 {
            self.n_tracked
        } else {
            0
        }
    }

    pub fn flow(&self, bbox: Rect) -> SyntheticFlow {
        SyntheticFlow::for_case(self.v_in, bbox, self.variation, self.obstacles)
    }

    /// Frame timestamps `t_start + i * save_interval`.
    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.n_frames).map(|i| self.t_start + i as f64 * self.save_interval).collect()
    }
}

/// Writes `room` with the case flow at `t_start` as an OpenFOAM case:
/// `constant/polyMesh` and `0/{U,p,k,omega}` under `dir`.
pub fn write_foam_case(spec: &CaseSpec, room: &RoomSpec, dir: &Path) -> Result<()> {
    let mesh = build_room_mesh(room)?;
    let mesh_dir = dir.join("constant").join("polyMesh");
    write_polymesh(&mesh, &mesh_dir)?;
    let fields_dir = dir.join("0");
    std::fs::create_dir_all(&fields_dir).map_err(|e| Error::io(&fields_dir, e))?;
    let flow = spec.flow(room.bbox());
    let state: Vec<[f64; N_STATE]> = mesh
        .geometry()
        .cell_centroids
        .iter()
        .map(|c| flow.state(Vec2::new(c[0], c[1]), spec.t_start))
        .collect();
    let patches = |inlet: Option<Vec<f64>>| -> Vec<(String, String, Option<Vec<f64>>)> {
        mesh.patches
            .iter()
            .map(|p| match classify_patch(&p.name, &p.kind) {
                BoundaryClass::SymmetryEmpty => (p.name.clone(), "empty".into(), None),
                BoundaryClass::Inlet => match &inlet {
                    Some(v) => (p.name.clone(), "fixedValue".into(), Some(v.clone())),
                    None => (p.name.clone(), "zeroGradient".into(), None),
                },
                _ => (p.name.clone(), "zeroGradient".into(), None),
            })
            .collect()
    };
    let col = |j: usize| -> Vec<Vec<f64>> { state.iter().map(|q| vec![q[j]]).collect() };
    let u: Vec<Vec<f64>> = state.iter().map(|q| vec![q[0], q[1], 0.0]).collect();
    write_field(&fields_dir.join("U"), "U", "[0 1 -1 0 0 0 0]", &u, &patches(Some(vec![0.0, -spec.v_in, 0.0])))?;
    write_field(&fields_dir.join("p"), "p", "[0 2 -2 0 0 0 0]", &col(2), &patches(None))?;
    write_field(&fields_dir.join("k"), "k", "[0 2 -2 0 0 0 0]", &col(3), &patches(None))?;
    write_field(&fields_dir.join("omega"), "omega", "[0 0 -1 0 0 0 0]", &col(4), &patches(None))
}

/// Inlet speeds of the sweep grid (m/s).
pub const SWEEP_V_IN: [f64; 4] = [0.10, 0.20, 0.35, 0.50];
/// Nozzle speeds of the sweep grid (m/s).
pub const SWEEP_U_MAG: [f64; 5] = [10.0, 20.0, 30.0, 40.0, 50.0];
/// Cone half-angle shared by the sweep cases (deg).
pub const SWEEP_THETA: f64 = 20.0;

/// The twenty sweep cases, V_in major, named `Sweep_Case_01` onwards.
pub fn sweep_specs(seed: u64) -> Vec<CaseSpec> {
    let mut out = Vec::with_capacity(SWEEP_V_IN.len() * SWEEP_U_MAG.len());
    for &v_in in &SWEEP_V_IN {
        for &u_mag in &SWEEP_U_MAG {
            let k = out.len();
            out.push(CaseSpec {
                name: format!("Sweep_Case_{:02}", k + 1),
                v_in,
                u_mag,
                theta: SWEEP_THETA,
                seed: seed + k as u64,
                ..CaseSpec::default()
            });
        }
    }
    out
}

/// Parcel state during integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParcelState {
    pub x: Vec2,
    pub v: Vec2,
    pub d: f64,
    pub alive: bool,
}

struct Integrator<'a> {
    flow: &'a SyntheticFlow,
    opts: SimOptions,
    air: AirProperties,
    drop: DropletProperties,
    k_evap: f64,
    h: f64,
}

impl Integrator<'_> {
    /// Advance one sub-step with the carrier velocity, fluctuation and extra
    /// accelerations frozen over the step (exact for constant forcing).
    fn step<R: Rng>(&self, s: &mut ParcelState, t: f64, u_fl: Vec2, rng: &mut R) -> Result<()> {
        let u = self.flow.velocity(s.x, t) + u_fl;
        let slip = u - s.v;
        let tau = drag_relaxation_time(s.d, slip.norm(), &self.air, &self.drop, CcConvention::Physical, self.opts.finite_re)?;
        let mut acc = Vec2::ZERO;
        if self.opts.gravity {
            acc.y -= self.air.g;
        }
        if self.opts.saffman {
            let grad = self.flow.velocity_gradient(s.x, t);
            let mass = self.drop.rho_p * std::f64::consts::PI * s.d.powi(3) / 6.0;
            acc += saffman_lift(s.d, slip, grad[0][1], &self.air)? / mass;
        }
        let target = u + acc * tau;
        let e = (-self.h / tau).exp();
        let one_m = -(-self.h / tau).exp_m1();
        let x = s.x + target * self.h + (s.v - target) * (tau * one_m);
        let mut v = target + (s.v - target) * e;
        let mut x = x;
        if self.opts.brownian {
            let sigma = crate::physics::brownian_sigma(s.d, self.h, &self.air)?;
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            x += Vec2::new(a, b) * sigma;
        }
        if !(v.norm() <= MAX_PARCEL_SPEED) || !x.is_finite() {
            return Err(Error::Aborted(format!(
                "unstable sub-step at t = {t:.4} s: |v| = {:.3e} m/s, d = {:.2e} m",
                v.norm(),
                s.d
            )));
        }
        if self.flow.is_solid(x) {
            s.alive = false;
            v = Vec2::ZERO;
            x = s.x;
        }
        s.x = x;
        s.v = v;
        Ok(())
    }
}

/// Integrate one parcel from `t0` to `t1` with no fluctuations, returning
/// its final state. Used for closed-form checks.
pub fn integrate_parcel(flow: &SyntheticFlow, opts: SimOptions, mut s: ParcelState, t0: f64, t1: f64, h: f64) -> Result<ParcelState> {
    let integ = Integrator {
        flow,
        opts: SimOptions { drw: false, ..opts },
        air: AirProperties::default(),
        drop: DropletProperties::default(),
        k_evap: wells_k(&AirProperties::default(), &DropletProperties::for_evaporation()),
        h,
    };
    let n = ((t1 - t0) / h).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d0 = s.d;
    for i in 0..n {
        if !s.alive {
            break;
        }
        let t = t0 + i as f64 * h;
        if opts.evaporation {
            s.d = wells_evaporate(d0, t - t0, integ.k_evap);
        }
        integ.step(&mut s, t, Vec2::ZERO, &mut rng)?;
    }
    Ok(s)
}

/// Closed-form position and velocity in still air under gravity and linear
/// drag from `(x0, v0)` after `t` seconds.
pub fn still_air_solution(x0: Vec2, v0: Vec2, d: f64, t: f64) -> (Vec2, Vec2) {
    let air = AirProperties::default();
    let drop = DropletProperties::default();
    let tau = tau_p(d, &air, &drop) * cunningham(d, &air).expect("positive diameter");
    let vt = Vec2::new(0.0, -air.g * tau);
    let e = (-t / tau).exp();
    let v = vt + (v0 - vt) * e;
    let x = x0 + vt * t + (v0 - vt) * (tau * (1.0 - e));
    (x, v)
}

/// Run a case on a mesh graph and build its archive.
pub fn generate_case(spec: &CaseSpec, mesh: &EulerianGraph) -> Result<RolloutArchive> {
    spec.validate()?;
    let flow = spec.flow(mesh.bbox);
    let air = AirProperties::default();
    let drop = DropletProperties::default();
    let integ = Integrator {
        flow: &flow,
        opts: spec.options,
        air,
        drop,
        k_evap: wells_k(&air, &DropletProperties::for_evaporation()),
        h: spec.substep,
    };
    let times = spec.frame_times();
    let frame_steps: Vec<usize> = times.iter().map(|t| (t / spec.substep).round() as usize).collect();
    let n = spec.n_parcels();
    let mut traj: Vec<Vec<ParcelState>> = Vec::with_capacity(n);
    let mut diam0 = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let d0 = spec.size.sample(&mut rng);
        let phi = (rng.random::<f64>() * 2.0 - 1.0) * spec.theta.to_radians();
        let dir = Vec2::new(-phi.cos(), phi.sin());
        let s_inj = ((i as f64 / spec.injection_rate) / spec.substep).round() as usize;
        let mut x0 = NOZZLE;
        if spec.release_radius > 0.0 {
            for _ in 0..64 {
                let r = spec.release_radius * rng.random::<f64>().sqrt();
                let a = rng.random::<f64>() * std::f64::consts::TAU;
                let p = NOZZLE + Vec2::new(a.cos(), a.sin()) * r;
                if !flow.is_solid(p) && mesh.bbox.inner_distance(p) > 0.02 {
                    x0 = p;
                    break;
                }
            }
        }
        let mut s = ParcelState {
            x: x0,
            v: dir * spec.u_mag,
            d: d0,
            alive: true,
        };
        let mut u_fl = Vec2::ZERO;
        let mut eddy_left = 0.0;
        let mut out = Vec::with_capacity(times.len());
        let mut fi = 0;
        let last = *frame_steps.last().unwrap_or(&0);
        let mut step = s_inj;
        while fi < frame_steps.len() && frame_steps[fi] < step {
            // frames before injection cannot occur (validated), kept defensive
            out.push(s);
            fi += 1;
        }
        while step <= last {
            while fi < frame_steps.len() && frame_steps[fi] == step {
                out.push(s);
                fi += 1;
            }
            if step == last || !s.alive {
                if !s.alive {
                    while fi < frame_steps.len() {
                        out.push(s);
                        fi += 1;
                    }
                }
                break;
            }
            let t = step as f64 * spec.substep;
            if spec.options.evaporation {
                s.d = wells_evaporate(d0, t - s_inj as f64 * spec.substep, integ.k_evap);
            }
            if spec.options.drw {
                if eddy_left <= 0.0 {
                    u_fl = drw_sample(flow.k(s.x), &mut rng);
                    eddy_left = drw_correlation_time(flow.omega0);
                }
                eddy_left -= spec.substep;
            }
            integ.step(&mut s, t, u_fl, &mut rng)?;
            step += 1;
        }
        traj.push(out);
        diam0.push(d0);
    }
    let mut frames = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        frames.push(Frame {
            time: t,
            orig_id: (0..n as u32).collect(),
            position: traj.iter().map(|tr| tr[k].x).collect(),
            velocity: traj.iter().map(|tr| tr[k].v).collect(),
            diameter: traj.iter().map(|tr| tr[k].d).collect(),
            alive: traj.iter().map(|tr| tr[k].alive).collect(),
            eulerian: spec.store_eulerian.then(|| flow.cell_state(&mesh.centroids, t)),
        });
    }
    let meta = ArchiveMeta {
        v_in: spec.v_in,
        u_mag: spec.u_mag,
        theta: spec.theta,
        seed: spec.seed,
        variant: "reference".into(),
        tracked: n as u32,
        extra: serde_json::json!({ "case": spec, "flow": flow }),
    };
    let a = RolloutArchive { meta, frames };
    a.validate()?;
    Ok(a)
}
