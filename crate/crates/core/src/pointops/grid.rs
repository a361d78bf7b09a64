//! Uniform-grid neighbor search. Produces exactly the same rows as the
//! brute-force search, including tie order, by expanding cell shells until
//! every unvisited point is strictly farther than the current k-th candidate.

use super::cloud::{sq_dist, Point};

/// Target mean occupancy of a cell.
const PER_CELL: f64 = 2.0;

pub(crate) struct Grid {
    lo: Point,
    cell: f64,
    dims: [usize; 3],
    /// Start offsets into `items`, one per cell plus a sentinel.
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl Grid {
    pub(crate) fn new(base: &[Point]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in base {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (base.len() as f64 / PER_CELL).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1));
        let mut grid = Self { lo, cell, dims, starts: Vec::new(), items: Vec::new() };

        let cells: Vec<usize> = base.iter().map(|p| grid.flat(grid.coords(p))).collect();
        let mut counts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; base.len()];
        for (i, &c) in cells.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.items = items;
        grid
    }

    fn coords(&self, p: &Point) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.lo[a]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Lower bound on the distance from `q` to any point outside the block of
    /// cells within Chebyshev radius `r` of `qc`; infinite once the block covers the grid.
    fn outside_bound(&self, q: &Point, qc: [usize; 3], r: usize) -> f64 {
        let mut bound = f64::INFINITY;
        for a in 0..3 {
            if qc[a] > r {
                let face = self.lo[a] + (qc[a] - r) as f64 * self.cell;
                bound = bound.min(q[a] - face);
            }
            if qc[a] + r + 1 < self.dims[a] {
                let face = self.lo[a] + (qc[a] + r + 1) as f64 * self.cell;
                bound = bound.min(face - q[a]);
            }
        }
        bound
    }

    /// Appends the `k` nearest base indices of `q` to `out`.
    pub(crate) fn knn_into(&self, q: &Point, base: &[Point], k: usize, cand: &mut Vec<(f64, usize)>, out: &mut Vec<usize>) {
        let qc = self.coords(q);
        cand.clear();
        let mut r = 0usize;
        loop {
            self.visit_shell(qc, r, |c| {
                for &i in &self.items[self.starts[c]..self.starts[c + 1]] {
                    cand.push((sq_dist(q, &base[i]), i));
                }
            });
            let bound = self.outside_bound(q, qc, r);
            if cand.len() >= k {
                cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.truncate(k);
                if bound == f64::INFINITY || (bound > 0.0 && cand[k - 1].0 < bound * bound * (1.0 - 1e-9)) {
                    break;
                }
            }
            r += 1;
        }
        out.extend(cand.iter().map(|&(_, i)| i));
    }

    fn visit_shell(&self, qc: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let range = |a: usize| qc[a].saturating_sub(r)..=(qc[a] + r).min(self.dims[a] - 1);
        let on_shell = |c: usize, a: usize| c + r == qc[a] || c == qc[a] + r;
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    if on_shell(x, 0) || on_shell(y, 1) || on_shell(z, 2) {
                        f(self.flat([x, y, z]));
                    }
                }
            }
        }
    }
}
