use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{self, Vec3};

/// Uniform-grid nearest-neighbor index over a point set.
pub struct PointIndex<'a> {
    points: &'a [Vec3],
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// Cell start offsets into `order`, length `cells + 1`.
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> PointIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::input("cannot index an empty point set"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("point set contains non-finite coordinates"));
        }
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let ext = math::sub(max, min);
        let longest = ext[0].max(ext[1]).max(ext[2]).max(1e-12);
        // about two points per cell along a surface
        let per_axis = ((points.len() as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 256);
        let cell = longest / per_axis as f64;
        let dims = [
            ((ext[0] / cell).floor() as usize + 1).min(per_axis + 1),
            ((ext[1] / cell).floor() as usize + 1).min(per_axis + 1),
            ((ext[2] / cell).floor() as usize + 1).min(per_axis + 1),
        ];
        let mut idx = Self {
            points,
            min,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let cells: Vec<usize> = points.iter().map(|&p| idx.cell_id(idx.cell_of(p))).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i as u32;
            fill[c] += 1;
        }
        idx.starts = counts;
        idx.order = order;
        Ok(idx)
    }

    fn cell_of(&self, p: Vec3) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = ((p[a] - self.min[a]) / self.cell).floor() as i64;
        }
        c
    }

    fn clamp_cell(&self, c: [i64; 3]) -> [usize; 3] {
        [
            c[0].clamp(0, self.dims[0] as i64 - 1) as usize,
            c[1].clamp(0, self.dims[1] as i64 - 1) as usize,
            c[2].clamp(0, self.dims[2] as i64 - 1) as usize,
        ]
    }

    fn cell_id(&self, c: [i64; 3]) -> usize {
        let c = self.clamp_cell(c);
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Distance from `q` to the nearest indexed point.
    pub fn nearest(&self, q: Vec3) -> f64 {
        let center = self.clamp_cell(self.cell_of(q));
        // distance from q to the clamped cell box, so shells are measured
        // from where q meets the grid
        let mut outside = 0.0;
        for a in 0..3 {
            let lo = self.min[a] + center[a] as f64 * self.cell;
            let hi = lo + self.cell;
            let d = if q[a] < lo {
                lo - q[a]
            } else if q[a] > hi {
                q[a] - hi
            } else {
                0.0
            };
            outside += d * d;
        }
        let outside = outside.sqrt();
        let max_r = self.dims[0].max(self.dims[1]).max(self.dims[2]);
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            // every point in shells beyond r is at least this far away
            if r > 0 && best <= outside.max((r - 1) as f64 * self.cell) {
                break;
            }
            self.visit_shell(center, r, |i| {
                let d = math::dist(q, self.points[i]);
                if d < best {
                    best = d;
                }
            });
        }
        best
    }

    fn visit_shell(&self, c: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let r = r as i64;
        let c = [c[0] as i64, c[1] as i64, c[2] as i64];
        let lim = |a: usize, v: i64| v >= 0 && v < self.dims[a] as i64;
        for z in c[2] - r..=c[2] + r {
            if !lim(2, z) {
                continue;
            }
            for y in c[1] - r..=c[1] + r {
                if !lim(1, y) {
                    continue;
                }
                let on_face = (z - c[2]).abs() == r || (y - c[1]).abs() == r;
                let step = if on_face || r == 0 { 1 } else { (2 * r) as usize };
                let mut x = c[0] - r;
                while x <= c[0] + r {
                    if lim(0, x) {
                        let id = x as usize + self.dims[0] * (y as usize + self.dims[1] * z as usize);
                        for &p in &self.order[self.starts[id]..self.starts[id + 1]] {
                            f(p as usize);
                        }
                    }
                    x += step as i64;
                }
            }
        }
    }
}

/// Nearest-neighbor distances of `queries` into `index`, in query order.
pub fn nearest_distances(index: &PointIndex<'_>, queries: &[Vec3]) -> Vec<f64> {
    queries.par_iter().map(|&q| index.nearest(q)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `½ · (mean_a min_b ‖a − b‖ + mean_b min_a ‖a − b‖)`.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("chamfer distance needs two nonempty point sets"));
    }
    let ia = PointIndex::new(a)?;
    let ib = PointIndex::new(b)?;
    let ab = nearest_distances(&ib, a);
    let ba = nearest_distances(&ia, b);
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

/// Quadratic-time reference for [`chamfer_distance`].
pub fn chamfer_brute_force(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("chamfer distance needs two nonempty point sets"));
    }
    let nn = |p: &Vec3, set: &[Vec3]| set.iter().map(|q| math::dist(*p, *q)).fold(f64::INFINITY, f64::min);
    let ab: Vec<f64> = a.iter().map(|p| nn(p, b)).collect();
    let ba: Vec<f64> = b.iter().map(|p| nn(p, a)).collect();
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}
