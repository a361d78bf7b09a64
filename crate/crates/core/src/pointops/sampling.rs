use super::cloud::{points_to_tensor, sq_dist, Point, PointCloud};
use super::grid::Grid;
use crate::error::{arg_err, Result};
use crate::numerics::Tensor;

/// Above this `k`, neighbor search sorts all candidates instead of keeping a running top-k.
const INSERTION_LIMIT: usize = 32;

/// Base size from which neighbor search goes through a uniform grid.
const GRID_MIN_BASE: usize = 256;

/// Greedy farthest point sampling starting from `seed_index`.
///
/// Each pick maximizes the distance to the already-selected set; ties go to
/// the lowest index and already-selected points are never picked again, so
/// clouds with duplicates still yield distinct indices.
pub fn fps(points: &[Point], n: usize, seed_index: usize) -> Result<Vec<usize>> {
    let total = points.len();
    if n == 0 || n > total {
        return Err(arg_err!("fps: cannot pick {n} of {total} points"));
    }
    if seed_index >= total {
        return Err(arg_err!("fps: seed index {seed_index} out of {total}"));
    }
    let mut picks = Vec::with_capacity(n);
    let mut taken = vec![false; total];
    let mut min_d = vec![f64::INFINITY; total];
    let mut current = seed_index;
    for _ in 0..n {
        picks.push(current);
        taken[current] = true;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(picks)
}

/// Euclidean k-nearest neighbors of each query among `base`, flattened row-major
/// as `[queries.len() * k]`. Rows are sorted by ascending distance with ties
/// broken by lowest base index.
pub fn knn(queries: &[Point], base: &[Point], k: usize) -> Result<Vec<usize>> {
    if k > base.len() {
        return Err(arg_err!("knn: k = {k} exceeds {} base points", base.len()));
    }
    let mut out = Vec::with_capacity(queries.len() * k);
    if k == 0 {
        return Ok(out);
    }
    if base.len() >= GRID_MIN_BASE && k <= INSERTION_LIMIT {
        let grid = Grid::new(base);
        let mut cand = Vec::new();
        for q in queries {
            grid.knn_into(q, base, k, &mut cand, &mut out);
        }
        return Ok(out);
    }
    knn_brute(queries, base, k, &mut out);
    Ok(out)
}

fn knn_brute(queries: &[Point], base: &[Point], k: usize, out: &mut Vec<usize>) {
    let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let mut all: Vec<(f64, usize)> = Vec::new();
    for q in queries {
        if k > INSERTION_LIMIT {
            all.clear();
            all.extend(base.iter().enumerate().map(|(i, p)| (sq_dist(q, p), i)));
            // stable: equal distances keep index order
            all.sort_by(|a, b| a.0.total_cmp(&b.0));
            out.extend(all[..k].iter().map(|&(_, i)| i));
            continue;
        }
        top.clear();
        for (i, p) in base.iter().enumerate() {
            let d = sq_dist(q, p);
            if top.len() == k && d >= top[k - 1].0 {
                continue;
            }
            // insert after every entry with distance <= d, keeping lower indices first
            let pos = top.partition_point(|&(td, _)| td <= d);
            top.insert(pos, (d, i));
            top.truncate(k);
        }
        out.extend(top.iter().map(|&(_, i)| i));
    }
}

/// Patches of a cloud: FPS centers and their k-nearest neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedTokens {
    /// Index of each center in the source cloud, in FPS selection order.
    pub center_index: Vec<usize>,
    /// `[N, 3]` center coordinates.
    pub centers: Tensor,
    /// Flattened `[N * K]` neighbor indices into the source cloud.
    pub neighbor_index: Vec<usize>,
    /// `[N, K, 3]` neighbor coordinates relative to their center.
    pub grouped_points: Tensor,
    pub group_size: usize,
}

impl GroupedTokens {
    pub fn len(&self) -> usize {
        self.center_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center_index.is_empty()
    }

    pub fn neighbors(&self, g: usize) -> &[usize] {
        &self.neighbor_index[g * self.group_size..(g + 1) * self.group_size]
    }

    /// The groups at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> GroupedTokens {
        GroupedTokens {
            center_index: idx.iter().map(|&i| self.center_index[i]).collect(),
            centers: self.centers.select_rows(idx),
            neighbor_index: idx.iter().flat_map(|&i| self.neighbors(i).iter().copied()).collect(),
            grouped_points: self.grouped_points.select_rows(idx),
            group_size: self.group_size,
        }
    }
}

/// Overlapping patches: `n_groups` FPS centers, each with its `group_size`
/// nearest points expressed relative to the center.
pub fn group(cloud: &PointCloud, n_groups: usize, group_size: usize, seed_index: usize) -> Result<GroupedTokens> {
    let pts = cloud.points();
    if group_size == 0 {
        return Err(arg_err!("group: group size must be positive"));
    }
    let center_index = fps(pts, n_groups, seed_index)?;
    let centers: Vec<Point> = center_index.iter().map(|&i| pts[i]).collect();
    let neighbor_index = knn(&centers, pts, group_size)?;
    let mut rel = Vec::with_capacity(n_groups * group_size * 3);
    for (g, c) in centers.iter().enumerate() {
        for &j in &neighbor_index[g * group_size..(g + 1) * group_size] {
            let p = pts[j];
            rel.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    Ok(GroupedTokens {
        center_index,
        centers: points_to_tensor(&centers),
        neighbor_index,
        grouped_points: Tensor::new(&[n_groups, group_size, 3], rel)?,
        group_size,
    })
}

/// Spatial-state positions: the cloud is split into `m` disjoint regions by
/// assigning every point to its nearest FPS pick, and each region's mean is
/// returned as `[m, 3]`. A region left empty (only possible with duplicate
/// points) keeps its pick's coordinates.
pub fn centroids(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Tensor> {
    let pts = cloud.points();
    let picks = fps(pts, m, seed_index)?;
    let pick_pts: Vec<Point> = picks.iter().map(|&i| pts[i]).collect();
    let owner = knn(pts, &pick_pts, 1)?;
    let mut sums = vec![[0.0; 3]; m];
    let mut counts = vec![0usize; m];
    for (p, &g) in pts.iter().zip(&owner) {
        for a in 0..3 {
            sums[g][a] += p[a];
        }
        counts[g] += 1;
    }
    let out: Vec<Point> = (0..m)
        .map(|g| match counts[g] {
            0 => pick_pts[g],
            c => [sums[g][0] / c as f64, sums[g][1] / c as f64, sums[g][2] / c as f64],
        })
        .collect();
    Ok(points_to_tensor(&out))
}
