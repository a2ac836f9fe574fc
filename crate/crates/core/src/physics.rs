//! Closed-form particle physics: drag with slip correction, shear lift,
//! Brownian and turbulent fluctuations, evaporation, size sampling and the
//! non-dimensional groups of the room.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const K_BOLTZMANN: f64 = 1.380649e-23;
pub const C_MU: f64 = 0.09;
pub const SC_T: f64 = 0.7;
pub const MIXING_LENGTH: f64 = 0.014;
pub const TURB_INTENSITY: f64 = 0.05;
/// Schiller-Naumann validity limit.
pub const RE_P_MAX: f64 = 800.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirProperties {
    pub mu: f64,
    pub rho: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub k_b: f64,
    pub g: f64,
}

impl Default for AirProperties {
    fn default() -> Self {
        Self {
            mu: 1.81e-5,
            rho: 1.225,
            lambda: 68e-9,
            temperature: 293.0,
            k_b: K_BOLTZMANN,
            g: 9.81,
        }
    }
}

impl AirProperties {
    pub fn nu(&self) -> f64 {
        self.mu / self.rho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropletProperties {
    pub rho_p: f64,
    pub d_v: f64,
    pub b_m: f64,
}

impl Default for DropletProperties {
    fn default() -> Self {
        Self {
            rho_p: 997.0,
            d_v: 2.6e-5,
            b_m: 0.0263,
        }
    }
}

impl DropletProperties {
    /// Properties used for the evaporation constant (unit-density water).
    pub fn for_evaporation() -> Self {
        Self {
            rho_p: 1000.0,
            ..Self::default()
        }
    }
}

/// Where the slip correction enters the drag law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcConvention {
    /// Drag divided by `C_c` (relaxation time `tau_p * C_c`).
    #[default]
    Physical,
    /// Drag multiplied by `C_c` (relaxation time `tau_p / C_c`).
    AsPrinted,
}

pub fn cunningham(d_p: f64, air: &AirProperties) -> Result<f64> {
    if !(d_p > 0.0) {
        return Err(Error::Domain(format!("diameter must be positive, got {d_p}")));
    }
    let kn = 2.0 * air.lambda / d_p;
    Ok(1.0 + kn * (1.257 + 0.400 * (-1.10 * d_p / (2.0 * air.lambda)).exp()))
}

/// Stokes relaxation time `rho_p d^2 / (18 mu)`.
pub fn tau_p(d_p: f64, air: &AirProperties, drop: &DropletProperties) -> f64 {
    drop.rho_p * d_p * d_p / (18.0 * air.mu)
}

pub fn particle_reynolds(d_p: f64, slip: f64, air: &AirProperties) -> f64 {
    air.rho * d_p * slip.abs() / air.mu
}

/// Schiller-Naumann factor `1 + 0.15 Re^0.687`, clamped at the validity
/// limit.
pub fn schiller_naumann(re_p: f64) -> f64 {
    let re = if re_p > RE_P_MAX {
        log::warn!("particle Reynolds number {re_p:.1} above {RE_P_MAX}; clamping");
        RE_P_MAX
    } else {
        re_p.max(0.0)
    };
    1.0 + 0.15 * re.powf(0.687)
}

/// Drag relaxation time including slip correction and, optionally, the
/// finite-Reynolds factor at the given slip speed.
pub fn drag_relaxation_time(
    d_p: f64,
    slip_speed: f64,
    air: &AirProperties,
    drop: &DropletProperties,
    conv: CcConvention,
    finite_re: bool,
) -> Result<f64> {
    let cc = cunningham(d_p, air)?;
    let tp = tau_p(d_p, air, drop);
    let base = match conv {
        CcConvention::Physical => tp * cc,
        CcConvention::AsPrinted => tp / cc,
    };
    let f = if finite_re {
        schiller_naumann(particle_reynolds(d_p, slip_speed, air))
    } else {
        1.0
    };
    Ok(base / f)
}

/// Drag acceleration for a given slip velocity `U - v`.
pub fn stokes_drag(
    d_p: f64,
    slip: Vec2,
    air: &AirProperties,
    drop: &DropletProperties,
    conv: CcConvention,
) -> Result<Vec2> {
    let tau = drag_relaxation_time(d_p, slip.norm(), air, drop, conv, true)?;
    Ok(slip / tau)
}

/// Saffman shear-lift force (N). In the plane the lift acts perpendicular
/// to the slip; the shear sign selects the side.
pub fn saffman_lift(d_p: f64, slip: Vec2, shear: f64, air: &AirProperties) -> Result<Vec2> {
    if !(d_p > 0.0) {
        return Err(Error::Domain(format!("diameter must be positive, got {d_p}")));
    }
    if shear == 0.0 {
        return Ok(Vec2::ZERO);
    }
    let re_g = d_p * d_p * shear.abs() / air.nu();
    let mag = 1.615 * air.mu * d_p * re_g.sqrt();
    Ok(slip.perp() * (mag * shear.signum()))
}

pub fn brownian_sigma(d_p: f64, dt: f64, air: &AirProperties) -> Result<f64> {
    let cc = cunningham(d_p, air)?;
    if dt <= 0.0 {
        return Ok(0.0);
    }
    let diff = 2.0 * air.k_b * air.temperature * cc / (3.0 * std::f64::consts::PI * air.mu * d_p);
    Ok((diff * dt).sqrt())
}

/// One discrete-random-walk fluctuation with variance `2k/3` per component.
pub fn drw_sample<R: Rng + ?Sized>(k: f64, rng: &mut R) -> Vec2 {
    if k <= 0.0 {
        return Vec2::ZERO;
    }
    let s = (2.0 * k / 3.0).sqrt();
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    Vec2::new(s * a, s * b)
}

/// Eddy lifetime `0.15 k / eps` with `eps = C_mu k omega`.
pub fn drw_correlation_time(omega: f64) -> f64 {
    if omega > 0.0 {
        0.15 / (C_MU * omega)
    } else {
        f64::INFINITY
    }
}

/// Evaporation constant of the D^2 law (m^2/s).
pub fn wells_k(air: &AirProperties, drop: &DropletProperties) -> f64 {
    8.0 * air.rho * drop.d_v * (1.0 + drop.b_m).ln() / drop.rho_p
}

/// Diameter after time `t`, floored at the nucleus `d0 / 2`.
pub fn wells_evaporate(d0: f64, t: f64, k: f64) -> f64 {
    if t <= 0.0 {
        return d0;
    }
    let nuc2 = 0.25 * d0 * d0;
    (d0 * d0 - k * t).max(nuc2).sqrt()
}

/// Time for `d0` to shrink to its nucleus.
pub fn wells_nucleus_time(d0: f64, k: f64) -> f64 {
    0.75 * d0 * d0 / k
}

/// Inverse CDF of the Rosin-Rammler law.
pub fn rosin_rammler_inverse(u: f64, d_bar: f64, n: f64) -> f64 {
    d_bar * (-(1.0 - u).ln()).powf(1.0 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RosinRammler {
    pub d_bar: f64,
    pub n: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for RosinRammler {
    fn default() -> Self {
        Self {
            d_bar: 20e-6,
            n: 2.0,
            d_min: 1e-6,
            d_max: 50e-6,
        }
    }
}

impl RosinRammler {
    pub fn sample_untruncated<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rosin_rammler_inverse(rng.random::<f64>(), self.d_bar, self.n)
    }

    /// Rejection sample within `[d_min, d_max]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let d = self.sample_untruncated(rng);
            if d >= self.d_min && d <= self.d_max {
                return d;
            }
        }
    }
}

/// Room geometry constants entering the non-dimensional groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomGeometry {
    pub height: f64,
    pub inlet_area: f64,
    pub volume: f64,
    pub nozzle_diameter: f64,
}

impl Default for RoomGeometry {
    fn default() -> Self {
        Self {
            height: 3.0,
            inlet_area: 2.0e-3,
            volume: 0.1156,
            nozzle_diameter: 3.0e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonDimGroups {
    pub st: f64,
    pub s_v: f64,
    /// Air changes per hour (1/h).
    pub ach: f64,
    pub re_jet: f64,
    pub pe_t: f64,
    pub k0: f64,
    pub omega0: f64,
    pub d_turb: f64,
}

/// Inlet turbulence `(k0, omega0)` at 5 % intensity.
pub fn inlet_turbulence(v_in: f64) -> (f64, f64) {
    let k0 = 1.5 * (TURB_INTENSITY * v_in).powi(2);
    let omega0 = k0.sqrt() / (C_MU.powf(0.25) * MIXING_LENGTH);
    (k0, omega0)
}

pub fn ach(v_in: f64, geo: &RoomGeometry) -> f64 {
    v_in * geo.inlet_area / geo.volume * 3600.0
}

pub fn nondim_groups(
    v_in: f64,
    u_mag: f64,
    d_bar: f64,
    geo: &RoomGeometry,
    air: &AirProperties,
    drop: &DropletProperties,
) -> NonDimGroups {
    let tp = tau_p(d_bar, air, drop);
    let (k0, omega0) = inlet_turbulence(v_in);
    let d_turb = C_MU * k0 / (SC_T * omega0);
    NonDimGroups {
        st: tp * v_in / geo.height,
        s_v: tp * air.g / v_in,
        ach: ach(v_in, geo),
        re_jet: air.rho * u_mag * geo.nozzle_diameter / air.mu,
        pe_t: v_in * geo.height / d_turb,
        k0,
        omega0,
        d_turb,
    }
}

/// One row of the force-per-mass table (N/kg = m/s^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceRow {
    pub d_p: f64,
    pub drag: f64,
    pub gravity: f64,
    pub saffman: f64,
    pub brownian: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeConditions {
    pub slip: f64,
    pub shear: f64,
    /// Time scale over which the Brownian displacement is converted into an
    /// equivalent acceleration `sigma / dt^2`.
    pub dt: f64,
}

impl Default for RegimeConditions {
    fn default() -> Self {
        Self {
            slip: 1.0,
            shear: 50.0,
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeMap {
    pub rows: Vec<ForceRow>,
    /// Diameter where drag first exceeds the Brownian term.
    pub brownian_drag_crossover: Option<f64>,
    /// Diameter where gravity first exceeds drag.
    pub gravity_drag_crossover: Option<f64>,
}

/// Per-mass force magnitudes over log-spaced diameters in `[d_min, d_max]`.
pub fn force_regime_map(
    d_min: f64,
    d_max: f64,
    n: usize,
    cond: &RegimeConditions,
    air: &AirProperties,
    drop: &DropletProperties,
) -> Result<RegimeMap> {
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let d = d_min * (d_max / d_min).powf(f);
        let m = std::f64::consts::PI / 6.0 * drop.rho_p * d * d * d;
        let drag = stokes_drag(d, Vec2::new(cond.slip, 0.0), air, drop, CcConvention::Physical)?.norm();
        let lift = saffman_lift(d, Vec2::new(cond.slip, 0.0), cond.shear, air)?.norm() / m;
        let br = brownian_sigma(d, cond.dt, air)? / (cond.dt * cond.dt);
        rows.push(ForceRow {
            d_p: d,
            drag,
            gravity: air.g,
            saffman: lift,
            brownian: br,
        });
    }
    let cross = |f: &dyn Fn(&ForceRow) -> f64| -> Option<f64> {
        rows.windows(2).find_map(|w| {
            let (a, b) = (f(&w[0]), f(&w[1]));
            if a.signum() != b.signum() {
                // Interpolate in log-diameter.
                let t = a / (a - b);
                Some((w[0].d_p.ln() + t * (w[1].d_p.ln() - w[0].d_p.ln())).exp())
            } else {
                None
            }
        })
    };
    let brownian_drag_crossover = cross(&|r| (r.brownian / r.drag).ln());
    let gravity_drag_crossover = cross(&|r| (r.drag / r.gravity).ln());
    Ok(RegimeMap {
        rows,
        brownian_drag_crossover,
        gravity_drag_crossover,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cunningham_limits() {
        let air = AirProperties::default();
        assert!((cunningham(1.0, &air).unwrap() - 1.0).abs() < 1e-6);
        assert!(cunningham(0.0, &air).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let d = 1e-8 * 1.05f64.powi(i);
            let c = cunningham(d, &air).unwrap();
            assert!(c < prev && c > 1.0);
            prev = c;
        }
    }

    #[test]
    fn drag_parallel_to_slip() {
        let air = AirProperties::default();
        let drop = DropletProperties::default();
        assert_eq!(stokes_drag(1e-5, Vec2::ZERO, &air, &drop, CcConvention::Physical).unwrap(), Vec2::ZERO);
        let a = stokes_drag(1e-5, Vec2::new(0.3, -0.4), &air, &drop, CcConvention::Physical).unwrap();
        assert!(a.cross(Vec2::new(0.3, -0.4)).abs() < 1e-12 * a.norm());
        assert!(a.dot(Vec2::new(0.3, -0.4)) > 0.0);
    }

    #[test]
    fn schiller_naumann_at_unit_reynolds() {
        assert_eq!(schiller_naumann(1.0), 1.15);
        assert_eq!(schiller_naumann(0.0), 1.0);
    }

    #[test]
    fn brownian_scaling() {
        let air = AirProperties::default();
        assert_eq!(brownian_sigma(3e-7, 0.0, &air).unwrap(), 0.0);
        let s1 = brownian_sigma(3e-7, 0.01, &air).unwrap();
        let s4 = brownian_sigma(3e-7, 0.04, &air).unwrap();
        assert!((s4 - 2.0 * s1).abs() < 1e-12 * s4);
    }

    #[test]
    fn drw_zero_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(drw_sample(0.0, &mut rng), Vec2::ZERO);
        let k = 0.002;
        let n = 200_000;
        let var: f64 = (0..n).map(|_| drw_sample(k, &mut rng).x.powi(2)).sum::<f64>() / n as f64;
        assert!((var / (2.0 * k / 3.0) - 1.0).abs() < 0.02);
    }

    #[test]
    fn wells_monotone_with_floor() {
        let k = wells_k(&AirProperties::default(), &DropletProperties::for_evaporation());
        assert_eq!(wells_evaporate(50e-6, 0.0, k), 50e-6);
        let mut prev = 50e-6;
        for i in 1..100 {
            let d = wells_evaporate(50e-6, i as f64 * 0.01, k);
            assert!(d <= prev && d >= 25e-6 - 1e-18);
            prev = d;
        }
        assert!((wells_evaporate(50e-6, 10.0, k) - 25e-6).abs() < 1e-18);
    }

    #[test]
    fn rosin_rammler_quantiles() {
        let rr = RosinRammler::default();
        let u = 1.0 - (-1.0f64).exp();
        assert!((rosin_rammler_inverse(u, rr.d_bar, rr.n) - 20e-6).abs() < 1e-18);
        let med = rosin_rammler_inverse(0.5, rr.d_bar, rr.n);
        assert!((med - 20e-6 * 2f64.ln().sqrt()).abs() < 1e-18);
    }

    #[test]
    fn lift_zero_without_shear() {
        let air = AirProperties::default();
        assert_eq!(saffman_lift(1e-5, Vec2::new(1.0, 0.0), 0.0, &air).unwrap(), Vec2::ZERO);
    }
}
