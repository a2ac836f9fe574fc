//! Parcel cloud with persistent identities, the Lagrangian radius graph and
//! its local-frame edge descriptors.

use crate::consts::HISTORY;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use std::collections::{HashMap, HashSet, VecDeque};

/// Parcel state at one archived instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub time: f64,
    pub orig_id: Vec<u32>,
    pub position: Vec<Vec2>,
    pub velocity: Vec<Vec2>,
    pub diameter: Vec<f64>,
    pub alive: Vec<bool>,
    /// Optional per-cell carrier state `(Ux, Uy, p, k, omega)`.
    pub eulerian: Option<Vec<[f64; 5]>>,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.orig_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orig_id.is_empty()
    }

    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParcelCloud {
    pub orig_id: Vec<u32>,
    pub position: Vec<Vec2>,
    pub velocity: Vec<Vec2>,
    pub diameter: Vec<f64>,
    pub type_id: Vec<u8>,
    pub alive: Vec<bool>,
    /// Parcels stuck by the deposition rule; alive but with zero velocity.
    pub deposited: Vec<bool>,
    /// Last positions, oldest first, at most [`HISTORY`] long.
    pub history: Vec<VecDeque<Vec2>>,
}

impl ParcelCloud {
    pub fn new(orig_id: Vec<u32>, position: Vec<Vec2>, velocity: Vec<Vec2>, diameter: Vec<f64>) -> Result<Self> {
        let n = orig_id.len();
        if position.len() != n || velocity.len() != n || diameter.len() != n {
            return Err(Error::Shape(format!(
                "parcel arrays differ in length: ids {n}, positions {}, velocities {}, diameters {}",
                position.len(),
                velocity.len(),
                diameter.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for &id in &orig_id {
            if !seen.insert(id) {
                return Err(Error::Data(format!("duplicate orig_id {id}")));
            }
        }
        let history = position.iter().map(|&p| VecDeque::from([p])).collect();
        Ok(Self {
            orig_id,
            position,
            velocity,
            diameter,
            type_id: vec![0; n],
            alive: vec![true; n],
            deposited: vec![false; n],
            history,
        })
    }

    pub fn len(&self) -> usize {
        self.orig_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orig_id.is_empty()
    }

    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Record the current positions in the history rings.
    pub fn push_history(&mut self) {
        for (h, &p) in self.history.iter_mut().zip(&self.position) {
            h.push_back(p);
            while h.len() > HISTORY {
                h.pop_front();
            }
        }
    }

    /// Remove a parcel from all further computation. Irreversible.
    pub fn kill(&mut self, i: usize) {
        self.alive[i] = false;
        self.velocity[i] = Vec2::ZERO;
    }

    /// Finite-difference velocities of the history, oldest first, padded at
    /// the front with zeros to `HISTORY - 1` entries.
    pub fn history_velocities(&self, i: usize, dt: f64) -> Vec<Vec2> {
        let h = &self.history[i];
        let mut out = vec![Vec2::ZERO; HISTORY - 1];
        let n = h.len().saturating_sub(1);
        for k in 0..n {
            out[HISTORY - 1 - n + k] = (h[k + 1] - h[k]) / dt;
        }
        out
    }

    /// Snapshot as an archive frame.
    pub fn to_frame(&self, time: f64) -> Frame {
        Frame {
            time,
            orig_id: self.orig_id.clone(),
            position: self.position.clone(),
            velocity: self.velocity.clone(),
            diameter: self.diameter.clone(),
            alive: self.alive.clone(),
            eulerian: None,
        }
    }

    /// Build a cloud from consecutive archived frames, the last one being the
    /// current state. Histories are filled from the frames.
    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let last = frames
            .last()
            .ok_or_else(|| Error::Data("no frames to prime the parcel cloud".into()))?;
        let mut cloud = Self::new(
            last.orig_id.clone(),
            last.position.clone(),
            last.velocity.clone(),
            last.diameter.clone(),
        )?;
        cloud.alive = last.alive.clone();
        let start = frames.len().saturating_sub(HISTORY);
        for (i, h) in cloud.history.iter_mut().enumerate() {
            h.clear();
            for f in &frames[start..] {
                if f.orig_id.get(i) != Some(&last.orig_id[i]) {
                    return Err(Error::Data("priming frames must share parcel order".into()));
                }
                h.push_back(f.position[i]);
            }
        }
        Ok(cloud)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianGraph {
    /// Directed edges `(i, j)`, sorted.
    pub edges: Vec<(u32, u32)>,
    pub r_c: f64,
}

impl LagrangianGraph {
    pub fn mean_degree(&self, n_alive: usize) -> f64 {
        if n_alive == 0 {
            0.0
        } else {
            self.edges.len() as f64 / n_alive as f64
        }
    }
}

fn cell_of(p: Vec2, h: f64) -> (i64, i64) {
    ((p.x / h).floor() as i64, (p.y / h).floor() as i64)
}

/// Directed radius graph `||x_i - x_j|| < r_c` over alive parcels, by
/// uniform spatial hashing with cell size `r_c`.
pub fn build_radius_graph(position: &[Vec2], alive: &[bool], r_c: f64) -> Result<LagrangianGraph> {
    if !(r_c > 0.0) {
        return Err(Error::Config(format!("connectivity radius must be positive, got {r_c}")));
    }
    let ok = |i: usize| alive[i] && position[i].is_finite();
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for i in 0..position.len() {
        if ok(i) {
            buckets.entry(cell_of(position[i], r_c)).or_default().push(i);
        }
    }
    let r2 = r_c * r_c;
    let mut edges = Vec::new();
    for i in 0..position.len() {
        if !ok(i) {
            continue;
        }
        let (cx, cy) = cell_of(position[i], r_c);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(b) = buckets.get(&(cx + dx, cy + dy)) {
                    for &j in b {
                        if j != i && (position[j] - position[i]).norm_sq() < r2 {
                            edges.push((i as u32, j as u32));
                        }
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(LagrangianGraph { edges, r_c })
}

/// O(N^2) oracle for [`build_radius_graph`].
pub fn radius_graph_brute(position: &[Vec2], alive: &[bool], r_c: f64) -> Vec<(u32, u32)> {
    let r2 = r_c * r_c;
    let mut out = Vec::new();
    for i in 0..position.len() {
        for j in 0..position.len() {
            if i != j
                && alive[i]
                && alive[j]
                && position[i].is_finite()
                && position[j].is_finite()
                && (position[j] - position[i]).norm_sq() < r2
            {
                out.push((i as u32, j as u32));
            }
        }
    }
    out
}

/// Speed below which the local frame falls back to the global x-axis.
pub const FRAME_SPEED_EPS: f64 = 1e-8;

/// `[log(1+rho), cos(theta), sin(theta)]` of `x_j` seen from `x_i` in the
/// frame aligned with `v_i`.
pub fn local_frame(xi: Vec2, vi: Vec2, xj: Vec2, r_c: f64) -> [f64; 3] {
    let d = xj - xi;
    let dist = d.norm();
    let rho = dist / r_c;
    if dist == 0.0 {
        return [0.0, 1.0, 0.0];
    }
    let speed = vi.norm();
    let e1 = if speed < FRAME_SPEED_EPS {
        Vec2::new(1.0, 0.0)
    } else {
        vi / speed
    };
    let e2 = e1.perp();
    let c = d.dot(e1) / dist;
    let s = d.dot(e2) / dist;
    [rho.ln_1p(), c, s]
}

/// Edge descriptors: local-frame geometry plus the (normalized) drag
/// acceleration of the source parcel.
pub fn edge_features(
    position: &[Vec2],
    velocity: &[Vec2],
    graph: &LagrangianGraph,
    drag: &[Vec2],
) -> Vec<[f64; 5]> {
    graph
        .edges
        .iter()
        .map(|&(i, j)| {
            let (i, j) = (i as usize, j as usize);
            let g = local_frame(position[i], velocity[i], position[j], graph.r_c);
            [g[0], g[1], g[2], drag[i].x, drag[i].y]
        })
        .collect()
}

/// Two frames aligned by orig_id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFrames {
    pub orig_id: Vec<u32>,
    pub x0: Vec<Vec2>,
    pub x1: Vec<Vec2>,
    pub mask: Vec<bool>,
}

fn id_index(f: &Frame) -> Result<HashMap<u32, usize>> {
    let mut m = HashMap::with_capacity(f.len());
    for (k, &id) in f.orig_id.iter().enumerate() {
        if m.insert(id, k).is_some() {
            return Err(Error::Data(format!("duplicate orig_id {id} in frame at t={}", f.time)));
        }
    }
    Ok(m)
}

/// Align `b` to the parcel order of `a`. The mask holds where a parcel is
/// alive in both frames with finite positions.
pub fn pair_frames(a: &Frame, b: &Frame) -> Result<PairedFrames> {
    id_index(a)?;
    let ib = id_index(b)?;
    let mut out = PairedFrames {
        orig_id: Vec::with_capacity(a.len()),
        x0: Vec::with_capacity(a.len()),
        x1: Vec::with_capacity(a.len()),
        mask: Vec::with_capacity(a.len()),
    };
    for (k, &id) in a.orig_id.iter().enumerate() {
        let (x1, ok1) = match ib.get(&id) {
            Some(&m) => (b.position[m], b.alive[m] && b.position[m].is_finite()),
            None => (Vec2::new(f64::NAN, f64::NAN), false),
        };
        out.orig_id.push(id);
        out.x0.push(a.position[k]);
        out.x1.push(x1);
        out.mask.push(ok1 && a.alive[k] && a.position[k].is_finite());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(ids: &[u32], xs: &[Vec2], alive: &[bool]) -> Frame {
        Frame {
            time: 2.0,
            orig_id: ids.to_vec(),
            position: xs.to_vec(),
            velocity: vec![Vec2::ZERO; ids.len()],
            diameter: vec![1e-5; ids.len()],
            alive: alive.to_vec(),
            eulerian: None,
        }
    }

    #[test]
    fn radius_graph_small_cases() {
        let x = [Vec2::new(1.0, 1.0), Vec2::new(1.05, 1.0)];
        let g = build_radius_graph(&x, &[true, true], 0.10).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 0)]);
        let x = [Vec2::new(0.0, 0.0), Vec2::new(0.5, 0.0)];
        assert!(build_radius_graph(&x, &[true, true], 0.5).unwrap().edges.is_empty());
        assert!(build_radius_graph(&x[..1], &[true], 0.5).unwrap().edges.is_empty());
        assert!(build_radius_graph(&x, &[true, true], 0.0).is_err());
    }

    #[test]
    fn dead_parcels_have_no_edges() {
        let x = [Vec2::new(1.0, 1.0), Vec2::new(1.01, 1.0), Vec2::new(1.02, 1.0)];
        let g = build_radius_graph(&x, &[true, false, true], 0.1).unwrap();
        assert!(g.edges.iter().all(|&(i, j)| i != 1 && j != 1));
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn hashing_matches_brute_force_with_negative_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(0..120);
            let x: Vec<Vec2> = (0..n)
                .map(|_| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let alive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
            let g = build_radius_graph(&x, &alive, 0.2).unwrap();
            assert_eq!(g.edges, radius_graph_brute(&x, &alive, 0.2));
        }
    }

    #[test]
    fn local_frame_aligned_and_degenerate() {
        let f = local_frame(Vec2::new(1.0, 1.0), Vec2::new(0.0, 2.0), Vec2::new(1.0, 1.05), 0.1);
        assert!((f[0] - 1.5f64.ln()).abs() < 1e-12);
        assert!((f[1] - 1.0).abs() < 1e-12 && f[2].abs() < 1e-12);
        assert_eq!(local_frame(Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::ZERO, 0.1), [0.0, 1.0, 0.0]);
        // Still parcel uses the global axis.
        let f = local_frame(Vec2::ZERO, Vec2::ZERO, Vec2::new(0.0, 0.05), 0.1);
        assert!(f[1].abs() < 1e-12 && (f[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairing_masks() {
        let a = frame(&[7, 3, 5], &[Vec2::new(1.0, 1.0), Vec2::new(2.0, 2.0), Vec2::new(3.0, 3.0)], &[true; 3]);
        let b = frame(
            &[5, 7, 3],
            &[Vec2::new(f64::NAN, 3.0), Vec2::new(1.1, 1.0), Vec2::new(2.0, 2.1)],
            &[true, true, false],
        );
        let p = pair_frames(&a, &b).unwrap();
        assert_eq!(p.orig_id, vec![7, 3, 5]);
        assert_eq!(p.mask, vec![true, false, false]);
        assert_eq!(p.x1[0], Vec2::new(1.1, 1.0));
        let same = pair_frames(&a, &a).unwrap();
        assert!(same.mask.iter().all(|&m| m));
        assert_eq!(same.x0, same.x1);
        let dup = frame(&[1, 1], &[Vec2::ZERO, Vec2::ZERO], &[true, true]);
        assert!(matches!(pair_frames(&dup, &a), Err(Error::Data(_))));
    }

    #[test]
    fn history_ring() {
        let mut c = ParcelCloud::new(vec![0], vec![Vec2::ZERO], vec![Vec2::ZERO], vec![1e-5]).unwrap();
        assert_eq!(c.history_velocities(0, 0.1), vec![Vec2::ZERO; 4]);
        for k in 1..8 {
            c.position[0] = Vec2::new(k as f64 * 0.1, 0.0);
            c.push_history();
        }
        assert_eq!(c.history[0].len(), HISTORY);
        for v in c.history_velocities(0, 0.1) {
            assert!((v.x - 1.0).abs() < 1e-9);
        }
        assert!(ParcelCloud::new(vec![1, 1], vec![Vec2::ZERO; 2], vec![Vec2::ZERO; 2], vec![1e-5; 2]).is_err());
    }
}
