//! Reverse-mode automatic differentiation over dense row-major `f64`
//! matrices. Every operation records its value and a closure producing the
//! parent gradients; [`Tape::backward`] walks the record in reverse.

use super::params::ParamStore;
use crate::geom::Vec2;
use crate::projection::Csr;
use std::cell::RefCell;
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn col(data: Vec<f64>) -> Self {
        Self::from_vec(data.len(), 1, data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self::from_vec(1, data.len(), data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn from_vec2(v: &[Vec2]) -> Self {
        Self::from_vec(v.len(), 2, v.iter().flat_map(|p| [p.x, p.y]).collect())
    }

    pub fn to_vec2(&self) -> Vec<Vec2> {
        assert_eq!(self.cols, 2);
        self.data.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect()
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, o: &Mat) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, o: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert!(self.same_shape(o));
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add_assign(&mut self, o: &Mat) {
        debug_assert!(self.same_shape(o));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }
}

/// `op(a) op(b)` with optional transposes, via `dgemm`.
pub fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let mut c = Mat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the owned buffers of `a`, `b` and `c` exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type Back = Box<dyn Fn(&Mat, &[Rc<Mat>], &Mat) -> Vec<Option<Mat>>>;

struct Node {
    value: Rc<Mat>,
    parents: Vec<usize>,
    back: Option<Back>,
    needs: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(usize, usize)>>,
}

/// Gradients of one backward pass.
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter id, summed over every use on the tape.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Mat>> {
        let mut out: Vec<Option<Mat>> = vec![None; n_params];
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[id] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn reduce_rows(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    out
}

fn reduce_cols(g: &Mat) -> Mat {
    Mat::col((0..g.rows).map(|r| g.row_slice(r).iter().sum()).collect())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, parents: Vec<usize>, back: Back) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs = parents.iter().any(|&p| nodes[p].needs);
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            back: if needs { Some(back) } else { None },
            needs,
        });
        Var(nodes.len() - 1)
    }

    fn leaf_node(&self, value: Mat, needs: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            back: None,
            needs,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, m: Mat) -> Var {
        self.leaf_node(m, false)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.constant(Mat::zeros(rows, cols))
    }

    /// Input that receives a gradient.
    pub fn leaf(&self, m: Mat) -> Var {
        self.leaf_node(m, true)
    }

    /// Parameter leaf; frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore, id: usize) -> Var {
        let v = self.leaf_node(store.value(id).clone(), store.is_trainable(id));
        self.params.borrow_mut().push((v.0, id));
        v
    }

    pub fn param_named(&self, store: &ParamStore, name: &str) -> Var {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        self.param(store, id)
    }

    pub fn value(&self, v: Var) -> Rc<Mat> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.data.len(), 1);
        m.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.nodes.borrow();
        (n[v.0].value.rows, n[v.0].value.cols)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        let v = &nodes[out.0].value;
        grads[out.0] = Some(Mat::full(v.rows, v.cols, 1.0));
        for i in (0..=out.0).rev() {
            let node = &nodes[i];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[i].take() else { continue };
            let pv: Vec<Rc<Mat>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let pg = back(&g, &pv, &node.value);
            for (&p, gp) in node.parents.iter().zip(pg) {
                if let Some(gp) = gp {
                    if !nodes[p].needs {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&gp),
                        slot => *slot = Some(gp),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads {
            grads,
            params: self.params.borrow().clone(),
        }
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let y = self.value(a).map(f);
        self.push(
            y,
            vec![a.0],
            Box::new(move |g, p, y| {
                let x = &p[0];
                Some(Mat::from_vec(
                    g.rows,
                    g.cols,
                    (0..g.data.len()).map(|k| g.data[k] * df(x.data[k], y.data[k])).collect(),
                ))
                .into_iter()
                .map(Some)
                .collect()
            }),
        )
    }

    // ---- elementwise binary -------------------------------------------

    fn check_same(&self, a: Var, b: Var, op: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let y = self.value(a).zip(&self.value(b), |x, y| x + y);
        self.push(y, vec![a.0, b.0], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let y = self.value(a).zip(&self.value(b), |x, y| x - y);
        self.push(
            y,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let y = self.value(a).zip(&self.value(b), |x, y| x * y);
        self.push(
            y,
            vec![a.0, b.0],
            Box::new(|g, p, _| vec![Some(g.zip(&p[1], |g, b| g * b)), Some(g.zip(&p[0], |g, a| g * a))]),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "div");
        let y = self.value(a).zip(&self.value(b), |x, y| x / y);
        self.push(
            y,
            vec![a.0, b.0],
            Box::new(|g, p, y| {
                let ga = g.zip(&p[1], |g, b| g / b);
                let mut gb = g.zip(y, |g, y| g * y);
                for (v, b) in gb.data.iter_mut().zip(&p[1].data) {
                    *v = -*v / b;
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "maximum");
        let y = self.value(a).zip(&self.value(b), f64::max);
        self.push(
            y,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                for k in 0..g.data.len() {
                    if p[0].data[k] >= p[1].data[k] {
                        gb.data[k] = 0.0;
                    } else {
                        ga.data[k] = 0.0;
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    // ---- broadcasting ---------------------------------------------------

    /// `a + row` with `row` of shape `1 x cols`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "add_row: shape mismatch");
        let mut y = (*av).clone();
        for r in 0..y.rows {
            for c in 0..y.cols {
                y.data[r * y.cols + c] += rv.data[c];
            }
        }
        self.push(y, vec![a.0, row.0], Box::new(|g, _, _| vec![Some(g.clone()), Some(reduce_rows(g))]))
    }

    /// `a * row` with `row` of shape `1 x cols`.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "mul_row: shape mismatch");
        let mut y = (*av).clone();
        for r in 0..y.rows {
            for c in 0..y.cols {
                y.data[r * y.cols + c] *= rv.data[c];
            }
        }
        self.push(
            y,
            vec![a.0, row.0],
            Box::new(|g, p, _| {
                let (a, row) = (&p[0], &p[1]);
                let mut ga = g.clone();
                let mut gr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        let k = r * g.cols + c;
                        ga.data[k] *= row.data[c];
                        gr.data[c] += g.data[k] * a.data[k];
                    }
                }
                vec![Some(ga), Some(gr)]
            }),
        )
    }

    /// `a * col` with `col` of shape `rows x 1`.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert!(cv.cols == 1 && cv.rows == av.rows, "mul_col: shape mismatch");
        let mut y = (*av).clone();
        for r in 0..y.rows {
            for c in 0..y.cols {
                y.data[r * y.cols + c] *= cv.data[r];
            }
        }
        self.push(
            y,
            vec![a.0, col.0],
            Box::new(|g, p, _| {
                let (a, col) = (&p[0], &p[1]);
                let mut ga = g.clone();
                let mut gc = Mat::zeros(g.rows, 1);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        let k = r * g.cols + c;
                        ga.data[k] *= col.data[r];
                        gc.data[r] += g.data[k] * a.data[k];
                    }
                }
                vec![Some(ga), Some(gc)]
            }),
        )
    }

    /// `a * s` with `s` a `1 x 1` variable.
    pub fn mul_s(&self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert!(sv.data.len() == 1, "mul_s: scalar expected");
        let k = sv.data[0];
        let y = av.map(|v| v * k);
        self.push(
            y,
            vec![a.0, s.0],
            Box::new(|g, p, _| {
                let k = p[1].data[0];
                let gs: f64 = g.data.iter().zip(&p[0].data).map(|(g, a)| g * a).sum();
                vec![Some(g.map(|v| v * k)), Some(Mat::scalar(gs))]
            }),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let y = self.value(a).map(|v| v * k);
        self.push(y, vec![a.0], Box::new(move |g, _, _| vec![Some(g.map(|v| v * k))]))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let y = self.value(a).map(|v| v + k);
        self.push(y, vec![a.0], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---- unary ----------------------------------------------------------

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    /// Square root with zero gradient at zero.
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(
            Mat::scalar(s),
            vec![a.0],
            Box::new(|g, p, _| vec![Some(Mat::full(p[0].rows, p[0].cols, g.data[0]))]),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1) as f64;
        self.scale(self.sum(a), 1.0 / n)
    }

    /// Per-row sums, `rows x 1`.
    pub fn row_sum(&self, a: Var) -> Var {
        let y = reduce_cols(&self.value(a));
        self.push(
            y,
            vec![a.0],
            Box::new(|g, p, _| {
                let mut out = Mat::zeros(p[0].rows, p[0].cols);
                for r in 0..out.rows {
                    for c in 0..out.cols {
                        out.data[r * out.cols + c] = g.data[r];
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    /// Per-column sums, `1 x cols`.
    pub fn col_sum(&self, a: Var) -> Var {
        let y = reduce_rows(&self.value(a));
        self.push(
            y,
            vec![a.0],
            Box::new(|g, p, _| {
                let mut out = Mat::zeros(p[0].rows, p[0].cols);
                for r in 0..out.rows {
                    out.data[r * out.cols..(r + 1) * out.cols].copy_from_slice(&g.data);
                }
                vec![Some(out)]
            }),
        )
    }

    /// Sums over consecutive groups of `group` columns.
    pub fn col_group_sum(&self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.cols % group == 0, "col_group_sum: bad group");
        let h = av.cols / group;
        let mut y = Mat::zeros(av.rows, h);
        for r in 0..av.rows {
            for c in 0..av.cols {
                y.data[r * h + c / group] += av.data[r * av.cols + c];
            }
        }
        self.push(
            y,
            vec![a.0],
            Box::new(move |g, p, _| {
                let mut out = Mat::zeros(p[0].rows, p[0].cols);
                for r in 0..out.rows {
                    for c in 0..out.cols {
                        out.data[r * out.cols + c] = g.data[r * g.cols + c / group];
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    /// Repeats every column `group` times.
    pub fn col_group_repeat(&self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        let w = av.cols * group;
        let mut y = Mat::zeros(av.rows, w);
        for r in 0..av.rows {
            for c in 0..w {
                y.data[r * w + c] = av.data[r * av.cols + c / group];
            }
        }
        self.push(
            y,
            vec![a.0],
            Box::new(move |g, p, _| {
                let mut out = Mat::zeros(p[0].rows, p[0].cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        out.data[r * out.cols + c / group] += g.data[r * g.cols + c];
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    // ---- structure --------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let y = gemm(&self.value(a), false, &self.value(b), false);
        self.push(
            y,
            vec![a.0, b.0],
            Box::new(|g, p, _| vec![Some(gemm(g, false, &p[1], true)), Some(gemm(&p[0], true, g, false))]),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<Rc<Mat>> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].rows;
        assert!(vals.iter().all(|v| v.rows == rows), "concat_cols: row mismatch");
        let widths: Vec<usize> = vals.iter().map(|v| v.cols).collect();
        let w: usize = widths.iter().sum();
        let mut y = Mat::zeros(rows, w);
        for r in 0..rows {
            let mut off = 0;
            for v in &vals {
                y.data[r * w + off..r * w + off + v.cols].copy_from_slice(v.row_slice(r));
                off += v.cols;
            }
        }
        self.push(
            y,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |g, _, _| {
                let mut off = 0;
                widths
                    .iter()
                    .map(|&wc| {
                        let mut o = Mat::zeros(g.rows, wc);
                        for r in 0..g.rows {
                            o.data[r * wc..(r + 1) * wc]
                                .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + wc]);
                        }
                        off += wc;
                        Some(o)
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols: out of range");
        let mut y = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            y.data[r * len..(r + 1) * len].copy_from_slice(&av.row_slice(r)[start..start + len]);
        }
        self.push(
            y,
            vec![a.0],
            Box::new(move |g, p, _| {
                let mut o = Mat::zeros(p[0].rows, p[0].cols);
                for r in 0..g.rows {
                    o.data[r * o.cols + start..r * o.cols + start + len].copy_from_slice(g.row_slice(r));
                }
                vec![Some(o)]
            }),
        )
    }

    /// Same data with a new row-major shape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.data.len(), rows * cols, "reshape: size mismatch");
        let y = Mat::from_vec(rows, cols, av.data.clone());
        self.push(
            y,
            vec![a.0],
            Box::new(|g, p, _| vec![Some(Mat::from_vec(p[0].rows, p[0].cols, g.data.clone()))]),
        )
    }

    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<u32>>) -> Var {
        let av = self.value(a);
        let w = av.cols;
        let mut y = Mat::zeros(idx.len(), w);
        for (r, &i) in idx.iter().enumerate() {
            y.data[r * w..(r + 1) * w].copy_from_slice(av.row_slice(i as usize));
        }
        self.push(
            y,
            vec![a.0],
            Box::new(move |g, p, _| {
                let mut o = Mat::zeros(p[0].rows, p[0].cols);
                for (r, &i) in idx.iter().enumerate() {
                    let i = i as usize;
                    for c in 0..w {
                        o.data[i * w + c] += g.data[r * w + c];
                    }
                }
                vec![Some(o)]
            }),
        )
    }

    /// `out[idx[r]] += a[r]` into `n_out` rows.
    pub fn scatter_add_rows(&self, a: Var, idx: Rc<Vec<u32>>, n_out: usize) -> Var {
        let av = self.value(a);
        let w = av.cols;
        let mut y = Mat::zeros(n_out, w);
        for (r, &i) in idx.iter().enumerate() {
            let i = i as usize;
            for c in 0..w {
                y.data[i * w + c] += av.data[r * w + c];
            }
        }
        self.push(
            y,
            vec![a.0],
            Box::new(move |g, _, _| {
                let mut o = Mat::zeros(idx.len(), w);
                for (r, &i) in idx.iter().enumerate() {
                    o.data[r * w..(r + 1) * w].copy_from_slice(g.row_slice(i as usize));
                }
                vec![Some(o)]
            }),
        )
    }

    /// Softmax over rows sharing the same segment id, per column.
    pub fn segment_softmax(&self, logits: Var, seg: Rc<Vec<u32>>, n_seg: usize) -> Var {
        let lv = self.value(logits);
        let w = lv.cols;
        let mut mx = vec![f64::NEG_INFINITY; n_seg * w];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..w {
                let k = s as usize * w + c;
                mx[k] = mx[k].max(lv.data[r * w + c]);
            }
        }
        let mut y = Mat::zeros(lv.rows, w);
        let mut den = vec![0.0; n_seg * w];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..w {
                let e = (lv.data[r * w + c] - mx[s as usize * w + c]).exp();
                y.data[r * w + c] = e;
                den[s as usize * w + c] += e;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..w {
                y.data[r * w + c] /= den[s as usize * w + c];
            }
        }
        self.push(
            y,
            vec![logits.0],
            Box::new(move |g, _, y| {
                let mut dot = vec![0.0; n_seg * w];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..w {
                        dot[s as usize * w + c] += g.data[r * w + c] * y.data[r * w + c];
                    }
                }
                let mut o = Mat::zeros(y.rows, w);
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..w {
                        let k = r * w + c;
                        o.data[k] = y.data[k] * (g.data[k] - dot[s as usize * w + c]);
                    }
                }
                vec![Some(o)]
            }),
        )
    }

    /// Row-wise normalization to zero mean and unit variance.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (n, w) = (av.rows, av.cols);
        let mut y = Mat::zeros(n, w);
        let mut inv = vec![0.0; n];
        for r in 0..n {
            let x = av.row_slice(r);
            let mu = x.iter().sum::<f64>() / w as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            inv[r] = 1.0 / (var + eps).sqrt();
            for c in 0..w {
                y.data[r * w + c] = (x[c] - mu) * inv[r];
            }
        }
        self.push(
            y,
            vec![a.0],
            Box::new(move |g, _, y| {
                let mut o = Mat::zeros(n, w);
                for r in 0..n {
                    let gr = g.row_slice(r);
                    let yr = y.row_slice(r);
                    let mg = gr.iter().sum::<f64>() / w as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for c in 0..w {
                        o.data[r * w + c] = inv[r] * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                vec![Some(o)]
            }),
        )
    }

    /// Subtract the column means.
    pub fn center_cols(&self, a: Var) -> Var {
        let av = self.value(a);
        let mean = reduce_rows(&av).map(|v| v / av.rows.max(1) as f64);
        let mut y = (*av).clone();
        for r in 0..y.rows {
            for c in 0..y.cols {
                y.data[r * y.cols + c] -= mean.data[c];
            }
        }
        self.push(
            y,
            vec![a.0],
            Box::new(|g, _, _| {
                let m = reduce_rows(g).map(|v| v / g.rows.max(1) as f64);
                let mut o = g.clone();
                for r in 0..o.rows {
                    for c in 0..o.cols {
                        o.data[r * o.cols + c] -= m.data[c];
                    }
                }
                vec![Some(o)]
            }),
        )
    }

    /// Sparse product `A x` for `x` of shape `A.cols x w`; `at` is `A^T`.
    pub fn spmm(&self, a: Rc<Csr>, at: Rc<Csr>, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, a.cols, "spmm: shape mismatch");
        let w = xv.cols;
        let y = Mat::from_vec(a.rows, w, a.matmul_block(&xv.data, w));
        self.push(
            y,
            vec![x.0],
            Box::new(move |g, _, _| vec![Some(Mat::from_vec(at.rows, w, at.matmul_block(&g.data, w)))]),
        )
    }

    /// Local-frame descriptor `[log(1+rho), cos, sin]` of every edge `(i, j)`
    /// from positions `x` and velocities `v` (both `n x 2`).
    pub fn local_frame_edges(&self, x: Var, v: Var, edges: Rc<Vec<(u32, u32)>>, r_c: f64) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        let xs = xv.to_vec2();
        let vs = vv.to_vec2();
        let mut y = Mat::zeros(edges.len(), 3);
        for (e, &(i, j)) in edges.iter().enumerate() {
            let f = crate::parcel::local_frame(xs[i as usize], vs[i as usize], xs[j as usize], r_c);
            y.data[e * 3..e * 3 + 3].copy_from_slice(&f);
        }
        self.push(
            y,
            vec![x.0, v.0],
            Box::new(move |g, p, _| {
                let xs = p[0].to_vec2();
                let vs = p[1].to_vec2();
                let mut gx = vec![Vec2::ZERO; xs.len()];
                let mut gv = vec![Vec2::ZERO; vs.len()];
                for (e, &(i, j)) in edges.iter().enumerate() {
                    let (i, j) = (i as usize, j as usize);
                    let d = xs[j] - xs[i];
                    let dist = d.norm();
                    if dist == 0.0 {
                        continue;
                    }
                    let u = d / dist;
                    let speed = vs[i].norm();
                    let moving = speed >= crate::parcel::FRAME_SPEED_EPS;
                    let e1 = if moving { vs[i] / speed } else { Vec2::new(1.0, 0.0) };
                    let e2 = e1.perp();
                    let (c, s) = (u.dot(e1), u.dot(e2));
                    let (g0, g1, g2) = (g.data[e * 3], g.data[e * 3 + 1], g.data[e * 3 + 2]);
                    let rho = dist / r_c;
                    let dd = u * (g0 / ((1.0 + rho) * r_c)) + (e1 - u * c) * (g1 / dist) + (e2 - u * s) * (g2 / dist);
                    gx[j] += dd;
                    gx[i] -= dd;
                    if moving {
                        let rt = Vec2::new(u.y, -u.x);
                        gv[i] += (u - e1 * c) * (g1 / speed) + (rt - e1 * s) * (g2 / speed);
                    }
                }
                vec![Some(Mat::from_vec2(&gx)), Some(Mat::from_vec2(&gv))]
            }),
        )
    }

    /// Inverse-distance interpolation of `field` (`cells x w`) at positions
    /// `x` (`p x 2`) over fixed neighbour lists (`k` per parcel). The weights
    /// are recomputed from `x`, so gradients reach both inputs.
    pub fn idw(&self, x: Var, field: Var, cells: Rc<Vec<usize>>, k: usize, centroids: Rc<Vec<Vec2>>, eps: f64) -> Var {
        let xs = self.value(x).to_vec2();
        let fv = self.value(field);
        let w = fv.cols;
        let np = xs.len();
        assert_eq!(cells.len(), np * k, "idw: stencil size mismatch");
        let mut y = Mat::zeros(np, w);
        for p in 0..np {
            let nb = &cells[p * k..(p + 1) * k];
            let wt = crate::coupling::idw_weights(xs[p], &centroids, nb, eps);
            for (m, &c) in nb.iter().enumerate() {
                for col in 0..w {
                    y.data[p * w + col] += wt[m] * fv.data[c * w + col];
                }
            }
        }
        self.push(
            y,
            vec![x.0, field.0],
            Box::new(move |g, par, y| {
                let xs = par[0].to_vec2();
                let fv = &par[1];
                let mut gx = vec![Vec2::ZERO; np];
                let mut gf = Mat::zeros(fv.rows, w);
                for p in 0..np {
                    let nb = &cells[p * k..(p + 1) * k];
                    let raw: Vec<(f64, Vec2)> = nb
                        .iter()
                        .map(|&c| {
                            let d = xs[p] - centroids[c];
                            let dist = d.norm();
                            let wr = 1.0 / (dist + eps);
                            let dw = if dist > 0.0 { d * (-wr * wr / dist) } else { Vec2::ZERO };
                            (wr, dw)
                        })
                        .collect();
                    let s: f64 = raw.iter().map(|r| r.0).sum();
                    for (m, &c) in nb.iter().enumerate() {
                        let wt = raw[m].0 / s;
                        let mut coef = 0.0;
                        for col in 0..w {
                            let gp = g.data[p * w + col];
                            gf.data[c * w + col] += wt * gp;
                            coef += gp * (fv.data[c * w + col] - y.data[p * w + col]);
                        }
                        gx[p] += raw[m].1 * (coef / s);
                    }
                }
                vec![Some(Mat::from_vec2(&gx)), Some(gf)]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
