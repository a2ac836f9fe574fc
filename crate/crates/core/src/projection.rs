//! Graph divergence and gradient operators, the Jacobi-preconditioned CG
//! Poisson solve and the velocity projection built on them.
//!
//! Operators act on cell values. Vector fields are flattened as
//! `[Ux0, Uy0, Ux1, Uy1, ...]`. The gradient is the negative adjoint of the
//! divergence in the volume-weighted inner product, so the Poisson matrix
//! `A = G^T V G` is symmetric positive semi-definite and a consistent
//! right-hand side can always be solved.

use crate::consts::L_REF;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::mesh::EulerianGraph;
use crate::nn::tape::{Tape, Var};
use std::collections::BTreeMap;
use std::rc::Rc;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    /// Assemble from triplets; duplicates are summed, columns sorted.
    pub fn from_triplets(rows: usize, cols: usize, trips: &[(usize, usize, f64)]) -> Self {
        let mut per_row: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); rows];
        for &(r, c, v) in trips {
            *per_row[r].entry(c).or_insert(0.0) += v;
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in per_row {
            for (c, v) in row {
                indices.push(c);
                data.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            data,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                (self.indptr[r]..self.indptr[r + 1])
                    .map(|k| self.data[k] * x[self.indices[k]])
                    .sum()
            })
            .collect()
    }

    /// Apply to each column of a row-major `cols x w` block.
    pub fn matmul_block(&self, x: &[f64], w: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * w];
        for r in 0..self.rows {
            let o = &mut out[r * w..(r + 1) * w];
            for k in self.indptr[r]..self.indptr[r + 1] {
                let a = self.data[k];
                let src = &x[self.indices[k] * w..(self.indices[k] + 1) * w];
                for (oo, s) in o.iter_mut().zip(src) {
                    *oo += a * s;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Csr {
        let mut trips = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                trips.push((self.indices[k], r, self.data[k]));
            }
        }
        Csr::from_triplets(self.cols, self.rows, &trips)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|r| {
                (self.indptr[r]..self.indptr[r + 1])
                    .find(|&k| self.indices[k] == r)
                    .map_or(0.0, |k| self.data[k])
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                d[r][self.indices[k]] += self.data[k];
            }
        }
        d
    }
}

/// Sparse operators assembled once per mesh graph.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    pub n_cells: usize,
    pub volumes: Vec<f64>,
    /// Face area times unit normal of each directed edge, m^2.
    pub flux: Vec<Vec2>,
    /// `n x 2n` divergence with face-averaged velocities.
    pub div: Rc<Csr>,
    pub div_t: Rc<Csr>,
    /// `2n x n` gradient, negative volume-weighted adjoint of `div`.
    pub grad: Rc<Csr>,
    pub grad_t: Rc<Csr>,
    /// `n x n` Poisson matrix `G^T V G`.
    pub poisson: Rc<Csr>,
    pub poisson_diag: Vec<f64>,
    /// Two-point Laplacian `(1/V_i) sum A/d (phi_j - phi_i)`.
    pub laplacian: Rc<Csr>,
    pub laplacian_t: Rc<Csr>,
    pub edges: Rc<Vec<(u32, u32)>>,
}

impl GraphOperators {
    pub fn new(g: &EulerianGraph) -> Self {
        let n = g.n_cells();
        let flux: Vec<Vec2> = g
            .edge_geom
            .iter()
            .zip(&g.edge_area)
            .map(|(e, &a)| Vec2::new(e[0], e[1]) * a)
            .collect();
        let mut dt = Vec::with_capacity(g.n_edges() * 4);
        let mut gt = Vec::with_capacity(g.n_edges() * 4);
        let mut lt = Vec::with_capacity(g.n_edges() * 2);
        for (e, &(i, j)) in g.edges.iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            let inv_v = 1.0 / g.volumes[i];
            let s = flux[e];
            for (c, sc) in [(0, s.x), (1, s.y)] {
                let w = 0.5 * sc * inv_v;
                dt.push((i, 2 * i + c, w));
                dt.push((i, 2 * j + c, w));
                gt.push((2 * i + c, j, w));
                gt.push((2 * i + c, i, -w));
            }
            let dist = g.edge_geom[e][3] * L_REF;
            let k = g.edge_area[e] / dist * inv_v;
            lt.push((i, j, k));
            lt.push((i, i, -k));
        }
        let div = Csr::from_triplets(n, 2 * n, &dt);
        let grad = Csr::from_triplets(2 * n, n, &gt);
        let laplacian = Csr::from_triplets(n, n, &lt);

        // A = G^T V G, accumulated row by row of G.
        let mut at = Vec::new();
        for r in 0..2 * n {
            let v = g.volumes[r / 2];
            let range = grad.indptr[r]..grad.indptr[r + 1];
            for k in range.clone() {
                for l in range.clone() {
                    at.push((grad.indices[k], grad.indices[l], v * grad.data[k] * grad.data[l]));
                }
            }
        }
        let poisson = Csr::from_triplets(n, n, &at);
        let poisson_diag = poisson.diagonal();
        Self {
            n_cells: n,
            volumes: g.volumes.clone(),
            flux,
            div_t: Rc::new(div.transpose()),
            div: Rc::new(div),
            grad_t: Rc::new(grad.transpose()),
            grad: Rc::new(grad),
            poisson: Rc::new(poisson),
            poisson_diag,
            laplacian_t: Rc::new(laplacian.transpose()),
            laplacian: Rc::new(laplacian),
            edges: Rc::new(g.edges.clone()),
        }
    }

    pub fn divergence(&self, u: &[Vec2]) -> Vec<f64> {
        self.div.matvec(&flatten(u))
    }

    pub fn gradient(&self, phi: &[f64]) -> Vec<Vec2> {
        unflatten(&self.grad.matvec(phi))
    }

    /// Right-hand side `-V div(U)` of the Poisson problem, mean removed.
    pub fn poisson_rhs(&self, u: &[Vec2]) -> Vec<f64> {
        let d = self.divergence(u);
        let mut b: Vec<f64> = d.iter().zip(&self.volumes).map(|(d, v)| -d * v).collect();
        remove_mean(&mut b);
        b
    }
}

pub fn flatten(u: &[Vec2]) -> Vec<f64> {
    u.iter().flat_map(|v| [v.x, v.y]).collect()
}

pub fn unflatten(x: &[f64]) -> Vec<Vec2> {
    x.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect()
}

pub fn remove_mean(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    for v in x {
        *v -= m;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Residual 2-norm after each iteration, starting with the initial one.
    pub residuals: Vec<f64>,
    /// A direction of zero curvature stopped the iteration early.
    pub breakdown: bool,
}

/// Curvature below which a search direction counts as degenerate.
const CURVATURE_EPS: f64 = 1e-300;
/// Residual reduction at which the iteration stops early.
pub const PCG_RTOL: f64 = 1e-10;

/// Jacobi-preconditioned CG from a zero start for at most `iters`
/// iterations. Stops early once the residual has dropped by [`PCG_RTOL`]
/// or on a breakdown.
pub fn jacobi_pcg(a: &Csr, diag: &[f64], b: &[f64], iters: usize) -> PcgResult {
    let n = b.len();
    let minv: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&minv).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut residuals = vec![dot(&r, &r).sqrt()];
    let mut breakdown = false;
    let mut it = 0;
    while it < iters {
        if residuals[it] <= PCG_RTOL * residuals[0] {
            break;
        }
        let ap = a.matvec(&p);
        let pap = dot(&p, &ap);
        if !(pap.abs() > CURVATURE_EPS) {
            breakdown = true;
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        z = r.iter().zip(&minv).map(|(r, m)| r * m).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
        it += 1;
        residuals.push(dot(&r, &r).sqrt());
    }
    PcgResult {
        x,
        iterations: it,
        residuals,
        breakdown,
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub velocity: Vec<Vec2>,
    pub phi: Vec<f64>,
    pub solve: PcgResult,
}

/// `U - scale * grad(phi)` with `A phi = -V div(U)`.
pub fn project_velocity(ops: &GraphOperators, u: &[Vec2], iters: usize, scale: f64) -> Result<Projection> {
    if u.len() != ops.n_cells {
        return Err(Error::Shape(format!("velocity has {} rows for {} cells", u.len(), ops.n_cells)));
    }
    let b = ops.poisson_rhs(u);
    let mut solve = jacobi_pcg(&ops.poisson, &ops.poisson_diag, &b, iters);
    remove_mean(&mut solve.x);
    let g = ops.gradient(&solve.x);
    let velocity = u.iter().zip(&g).map(|(&u, &g)| u - g * scale).collect();
    Ok(Projection {
        velocity,
        phi: solve.x.clone(),
        solve,
    })
}

pub fn l2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Tape version of [`jacobi_pcg`] with exactly the same arithmetic, so the
/// gradient is that of the truncated solve.
pub fn pcg_tape(tape: &Tape, ops: &GraphOperators, b: Var, iters: usize) -> Var {
    let minv: Vec<f64> = ops
        .poisson_diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let minv = tape.constant(crate::nn::Mat::col(minv));
    let a = ops.poisson.clone();
    let mut x = tape.zeros(ops.n_cells, 1);
    let mut r = b;
    let mut z = tape.mul(r, minv);
    let mut p = z;
    let mut rz = tape.sum(tape.mul(r, z));
    let norm = |v: Var| tape.value(v).norm_sq().sqrt();
    let r0 = norm(r);
    for _ in 0..iters {
        if norm(r) <= PCG_RTOL * r0 {
            break;
        }
        let ap = tape.spmm(a.clone(), a.clone(), p);
        let pap = tape.sum(tape.mul(p, ap));
        if !(tape.scalar(pap).abs() > CURVATURE_EPS) {
            break;
        }
        let alpha = tape.div(rz, pap);
        x = tape.add(x, tape.mul_s(p, alpha));
        r = tape.sub(r, tape.mul_s(ap, alpha));
        z = tape.mul(r, minv);
        let rz_new = tape.sum(tape.mul(r, z));
        let beta = tape.div(rz_new, rz);
        rz = rz_new;
        p = tape.add(z, tape.mul_s(p, beta));
    }
    x
}

/// Tape version of [`project_velocity`]. `u` is `n x 2`; `scale` a `1 x 1`
/// variable multiplying the gradient correction.
pub fn project_velocity_tape(tape: &Tape, ops: &GraphOperators, u: Var, iters: usize, scale: Var) -> Var {
    let n = ops.n_cells;
    let flat = tape.reshape(u, 2 * n, 1);
    let d = tape.spmm(ops.div.clone(), ops.div_t.clone(), flat);
    let vol = tape.constant(crate::nn::Mat::col(ops.volumes.clone()));
    let b = tape.center_cols(tape.scale(tape.mul(d, vol), -1.0));
    let phi = tape.center_cols(pcg_tape(tape, ops, b, iters));
    let g = tape.reshape(tape.spmm(ops.grad.clone(), ops.grad_t.clone(), phi), n, 2);
    tape.sub(u, tape.mul_s(g, scale))
}

/// Tape divergence of an `n x 2` velocity block, `n x 1`.
pub fn divergence_tape(tape: &Tape, ops: &GraphOperators, u: Var) -> Var {
    let flat = tape.reshape(u, 2 * ops.n_cells, 1);
    tape.spmm(ops.div.clone(), ops.div_t.clone(), flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_eulerian_graph, build_room_mesh, RoomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn box_graph(nx: usize, ny: usize) -> EulerianGraph {
        let mesh = build_room_mesh(&RoomSpec::open_box(nx, ny, 1.0, 1.0)).unwrap();
        let n = mesh.n_cells();
        build_eulerian_graph(&mesh, vec![[0.0; 5]; n], Vec2::ZERO).unwrap()
    }

    fn interior(g: &EulerianGraph) -> Vec<usize> {
        (0..g.n_cells()).filter(|&i| g.bc_id[i] == 0).collect()
    }

    #[test]
    fn divergence_of_analytic_fields() {
        let g = box_graph(10, 10);
        let ops = GraphOperators::new(&g);
        let inner = interior(&g);
        let c = ops.divergence(&vec![Vec2::new(0.3, -1.2); g.n_cells()]);
        let sol = ops.divergence(&g.centroids.iter().map(|p| Vec2::new(p.x, -p.y)).collect::<Vec<_>>());
        let exp = ops.divergence(&g.centroids.iter().map(|p| Vec2::new(p.x, p.y)).collect::<Vec<_>>());
        for &i in &inner {
            assert!(c[i].abs() < 1e-12);
            assert!(sol[i].abs() < 1e-10);
            assert!((exp[i] - 2.0).abs() < 0.1);
        }
    }

    #[test]
    fn gradient_is_negative_adjoint() {
        let g = box_graph(6, 5);
        let ops = GraphOperators::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = g.n_cells();
        let u: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random(), rng.random())).collect();
        let phi: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let d = ops.divergence(&u);
        let gp = ops.gradient(&phi);
        let lhs: f64 = (0..n).map(|i| ops.volumes[i] * d[i] * phi[i]).sum();
        let rhs: f64 = (0..n).map(|i| ops.volumes[i] * u[i].dot(gp[i])).sum();
        assert!((lhs + rhs).abs() < 1e-12 * lhs.abs().max(1e-3));
    }

    #[test]
    fn zero_rhs_and_descent() {
        let g = box_graph(5, 4);
        let ops = GraphOperators::new(&g);
        let r = jacobi_pcg(&ops.poisson, &ops.poisson_diag, &vec![0.0; g.n_cells()], 20);
        assert!(r.x.iter().all(|&v| v == 0.0));
        assert!(!r.breakdown);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<Vec2> = (0..g.n_cells()).map(|_| Vec2::new(rng.random(), rng.random())).collect();
        let b = ops.poisson_rhs(&u);
        let r = jacobi_pcg(&ops.poisson, &ops.poisson_diag, &b, 1);
        assert!(r.residuals[1] < r.residuals[0]);
    }

    #[test]
    fn projection_reduces_divergence() {
        let g = box_graph(10, 10);
        let ops = GraphOperators::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u: Vec<Vec2> = (0..100)
            .map(|_| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let p = project_velocity(&ops, &u, 50, 1.0).unwrap();
        let before = l2(&ops.divergence(&u));
        let after = l2(&ops.divergence(&p.velocity));
        assert!(after * 10.0 <= before, "{before} -> {after}");
    }

    #[test]
    fn poisson_symmetric_with_positive_diagonal() {
        let g = box_graph(7, 6);
        let ops = GraphOperators::new(&g);
        let d = ops.poisson.to_dense();
        for i in 0..d.len() {
            assert!(d[i][i] > 0.0);
            for j in 0..d.len() {
                assert!((d[i][j] - d[j][i]).abs() < 1e-12 * d[i][i]);
            }
        }
    }
}
