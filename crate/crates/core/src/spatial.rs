//! Uniform-bin point index with exact k-nearest queries.

use crate::geom::Vec2;

/// Static point set binned on a uniform grid.
#[derive(Debug, Clone)]
pub struct PointGrid {
    pts: Vec<Vec2>,
    origin: Vec2,
    cell: f64,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl PointGrid {
    pub fn new(pts: Vec<Vec2>) -> Self {
        let n = pts.len().max(1);
        let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in &pts {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        if pts.is_empty() {
            lo = Vec2::ZERO;
            hi = Vec2::ZERO;
        }
        let w = (hi.x - lo.x).max(0.0);
        let h = (hi.y - lo.y).max(0.0);
        // Roughly two points per bin.
        let area = (w * h).max(1e-30);
        let mut cell = (2.0 * area / n as f64).sqrt();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = w.max(h).max(1e-12);
        }
        let nx = ((w / cell).floor() as usize + 1).min(4096);
        let ny = ((h / cell).floor() as usize + 1).min(4096);
        let cell = cell.max(w / nx as f64).max(h / ny as f64);
        let mut counts = vec![0usize; nx * ny + 1];
        let bin = |p: Vec2| -> usize {
            let bx = (((p.x - lo.x) / cell) as usize).min(nx - 1);
            let by = (((p.y - lo.y) / cell) as usize).min(ny - 1);
            by * nx + bx
        };
        for p in &pts {
            counts[bin(*p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0usize; pts.len()];
        for (i, p) in pts.iter().enumerate() {
            let b = bin(*p);
            items[fill[b]] = i;
            fill[b] += 1;
        }
        Self {
            pts,
            origin: lo,
            cell,
            nx,
            ny,
            starts: counts,
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.pts
    }

    fn bin_coord(&self, v: f64, o: f64, n: usize) -> usize {
        let f = ((v - o) / self.cell).floor();
        if f < 0.0 {
            0
        } else {
            (f as usize).min(n - 1)
        }
    }

    /// The `k` nearest points to `q` as `(squared distance, index)` pairs,
    /// ascending, ties broken by lower index.
    pub fn knn(&self, q: Vec2, k: usize) -> Vec<(f64, usize)> {
        let k = k.min(self.pts.len());
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        let bx = self.bin_coord(q.x, self.origin.x, self.nx) as isize;
        let by = self.bin_coord(q.y, self.origin.y, self.ny) as isize;
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        let mut r: isize = 0;
        loop {
            for j in (by - r)..=(by + r) {
                if j < 0 || j >= ny {
                    continue;
                }
                let ring_row = j == by - r || j == by + r;
                let mut i = bx - r;
                while i <= bx + r {
                    if i >= 0 && i < nx {
                        let b = (j * nx + i) as usize;
                        for &idx in &self.items[self.starts[b]..self.starts[b + 1]] {
                            let d = self.pts[idx] - q;
                            let d2 = d.x * d.x + d.y * d.y;
                            insert_best(&mut best, k, (d2, idx));
                        }
                    }
                    i += if ring_row || r == 0 { 1 } else { 2 * r };
                }
            }
            // Lower bound on the distance to any bin outside the scanned square.
            let x0 = self.origin.x + (bx - r) as f64 * self.cell;
            let x1 = self.origin.x + (bx + r + 1) as f64 * self.cell;
            let y0 = self.origin.y + (by - r) as f64 * self.cell;
            let y1 = self.origin.y + (by + r + 1) as f64 * self.cell;
            let mut lb = f64::INFINITY;
            if bx - r > 0 {
                lb = lb.min((q.x - x0).max(0.0));
            }
            if bx + r < nx - 1 {
                lb = lb.min((x1 - q.x).max(0.0));
            }
            if by - r > 0 {
                lb = lb.min((q.y - y0).max(0.0));
            }
            if by + r < ny - 1 {
                lb = lb.min((y1 - q.y).max(0.0));
            }
            if lb == f64::INFINITY {
                break;
            }
            if best.len() == k && lb * lb > best[k - 1].0 {
                break;
            }
            r += 1;
        }
        best
    }

    /// Nearest point index and its Euclidean distance.
    pub fn nearest(&self, q: Vec2) -> Option<(usize, f64)> {
        self.knn(q, 1).first().map(|&(d2, i)| (i, d2.sqrt()))
    }
}

fn insert_best(best: &mut Vec<(f64, usize)>, k: usize, c: (f64, usize)) {
    let lt = |a: &(f64, usize), b: &(f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    if best.len() == k && !lt(&c, &best[k - 1]) {
        return;
    }
    let pos = best.iter().position(|b| lt(&c, b)).unwrap_or(best.len());
    best.insert(pos, c);
    if best.len() > k {
        best.pop();
    }
}

/// Reference k-nearest by exhaustive scan, same ordering contract.
pub fn knn_brute(pts: &[Vec2], q: Vec2, k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = *p - q;
            (d.x * d.x + d.y * d.y, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}
