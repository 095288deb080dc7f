//! Density lattices, Marching Cubes, mesh files and Chamfer evaluation.

mod chamfer;
mod mesh_io;
mod tables;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DensityField;
use crate::math::{self, Aabb, Vec3};

pub use chamfer::{chamfer_brute_force, chamfer_distance, nearest_distances, PointIndex};
pub use mesh_io::{read_mesh, read_obj, read_ply, write_mesh, write_obj, write_ply, MeshFormat};

/// Values of a scalar field on a regular lattice spanning `bounds`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    pub res: [usize; 3],
    pub bounds: Aabb,
    /// Index `i + nx·(j + ny·k)`.
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(res: [usize; 3], bounds: Aabb, values: Vec<f64>) -> Result<Self> {
        if res.iter().any(|&n| n < 2) {
            return Err(Error::input("grid resolution must be at least 2 per axis"));
        }
        if values.len() != res[0] * res[1] * res[2] {
            return Err(Error::input("grid value count does not match resolution"));
        }
        if !bounds.is_valid() {
            return Err(Error::input("grid bounds are degenerate"));
        }
        let g = Self { res, bounds, values };
        if let Some(p) = g.values.iter().position(|v| !v.is_finite()) {
            let (i, j, k) = g.unindex(p);
            return Err(Error::NonFiniteDensity {
                i,
                j,
                k,
                value: g.values[p],
            });
        }
        Ok(g)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.res[0] * (j + self.res[1] * k)
    }

    fn unindex(&self, p: usize) -> (usize, usize, usize) {
        let i = p % self.res[0];
        let j = (p / self.res[0]) % self.res[1];
        (i, j, p / (self.res[0] * self.res[1]))
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// World position of a lattice point.
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let idx = [i, j, k];
        let mut p = [0.0; 3];
        for a in 0..3 {
            let t = idx[a] as f64 / (self.res[a] - 1) as f64;
            p[a] = self.bounds.min[a] + t * (self.bounds.max[a] - self.bounds.min[a]);
        }
        p
    }

    /// Lattice spacing per axis.
    pub fn spacing(&self) -> Vec3 {
        let e = self.bounds.extent();
        [
            e[0] / (self.res[0] - 1) as f64,
            e[1] / (self.res[1] - 1) as f64,
            e[2] / (self.res[2] - 1) as f64,
        ]
    }
}

/// Evaluates `field` at every lattice point of `bounds`.
pub fn sample_density_grid(field: &dyn DensityField, res: [usize; 3], bounds: Aabb) -> Result<ScalarGrid> {
    if res.iter().any(|&n| n < 2) {
        return Err(Error::input("grid resolution must be at least 2 per axis"));
    }
    let probe = ScalarGrid {
        res,
        bounds,
        values: Vec::new(),
    };
    let mut pts = Vec::with_capacity(res[0] * res[1] * res[2]);
    for k in 0..res[2] {
        for j in 0..res[1] {
            for i in 0..res[0] {
                pts.push(probe.point(i, j, k));
            }
        }
    }
    let values = field.density_batch(&pts)?;
    ScalarGrid::new(res, bounds, values)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::input(format!("triangle {t} indexes past {n} vertices")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::input(format!("triangle {t} repeats a vertex")));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * math::norm(math::cross(math::sub(b, a), math::sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume; positive for outward-facing triangles.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                math::dot(a, math::cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Reverses every triangle.
    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }
}

/// Which side of the level counts as inside.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inside {
    /// Values above the level are inside (densities).
    #[default]
    Above,
    /// Values below the level are inside (signed distances).
    Below,
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Per cube edge: lower corner offset and axis.
const EDGES: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

fn edge_vertex(grid: &ScalarGrid, level: f64, p: [usize; 3], axis: usize) -> Vec3 {
    let mut q = p;
    q[axis] += 1;
    let (v1, v2) = (grid.value(p[0], p[1], p[2]), grid.value(q[0], q[1], q[2]));
    let a = grid.point(p[0], p[1], p[2]);
    let b = grid.point(q[0], q[1], q[2]);
    let t = (level - v1) / (v2 - v1);
    let mut out = a;
    out[axis] = a[axis] + t * (b[axis] - a[axis]);
    out
}

/// Marching Cubes at `level` with outward-facing triangles for `inside`.
/// Vertices on shared edges are shared; cells are visited with `i`
/// fastest, then `j`, then `k`.
pub fn marching_cubes(grid: &ScalarGrid, level: f64, inside: Inside) -> Result<TriangleMesh> {
    if !level.is_finite() {
        return Err(Error::input("marching cubes level must be finite"));
    }
    let [nx, ny, nz] = grid.res;
    let edge_key = |p: [usize; 3], axis: usize| -> u64 { (grid.index(p[0], p[1], p[2]) as u64) * 3 + axis as u64 };
    let slabs: Vec<Vec<[(u64, [usize; 3], usize); 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut case = 0usize;
                    for (c, off) in CORNERS.iter().enumerate() {
                        if grid.value(i + off[0], j + off[1], k + off[2]) < level {
                            case |= 1 << c;
                        }
                    }
                    if tables::EDGE_TABLE[case] == 0 {
                        continue;
                    }
                    let row = &tables::TRI_TABLE[case];
                    let mut e = 0;
                    while e + 2 < 16 && row[e] >= 0 {
                        let mut tri = [(0u64, [0usize; 3], 0usize); 3];
                        for (s, slot) in tri.iter_mut().enumerate() {
                            let (off, axis) = EDGES[row[e + s] as usize];
                            let p = [i + off[0], j + off[1], k + off[2]];
                            *slot = (edge_key(p, axis), p, axis);
                        }
                        tris.push(tri);
                        e += 3;
                    }
                }
            }
            tris
        })
        .collect();
    let mut mesh = TriangleMesh::default();
    let mut ids: HashMap<u64, u32> = HashMap::new();
    for slab in slabs {
        for tri in slab {
            let mut idx = [0u32; 3];
            for (s, &(key, p, axis)) in tri.iter().enumerate() {
                idx[s] = *ids.entry(key).or_insert_with(|| {
                    mesh.vertices.push(edge_vertex(grid, level, p, axis));
                    (mesh.vertices.len() - 1) as u32
                });
            }
            // the tables wind triangles outward for the above-level side
            mesh.triangles.push(match inside {
                Inside::Above => idx,
                Inside::Below => [idx[0], idx[2], idx[1]],
            });
        }
    }
    Ok(mesh)
}

/// Area-weighted uniform sample of points on the mesh surface.
pub fn sample_mesh_surface(mesh: &TriangleMesh, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    if mesh.is_empty() {
        return Err(Error::input("cannot sample an empty mesh"));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(t);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::input("mesh has zero surface area"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * acc;
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
    }
    Ok(out)
}

/// Evaluation summary of one mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chamfer: Option<f64>,
    pub n_vertices: usize,
    pub n_triangles: usize,
    pub level: Option<f64>,
    pub resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Something with an exact unsigned distance to its surface.
pub trait AnalyticSurface {
    fn distance(&self, x: Vec3) -> f64;
    fn sample(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<Vec3>;
}

impl AnalyticSurface for crate::scenes::AnalyticShape {
    fn distance(&self, x: Vec3) -> f64 {
        self.sdf(x).abs()
    }

    fn sample(&self, n: usize, mut rng: &mut dyn rand::RngCore) -> Vec<Vec3> {
        self.sample_surface(n, &mut rng)
    }
}

/// Chamfer distance from a mesh to an analytic surface. The mesh side uses
/// exact distances of its surface samples; the reference side uses nearest
/// mesh samples to points drawn on the analytic surface.
pub fn chamfer_to_analytic(
    mesh: &TriangleMesh,
    surface: &dyn AnalyticSurface,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let pts = sample_mesh_surface(mesh, n, rng)?;
    let reference = surface.sample(n, rng);
    let forward: f64 = pts.iter().map(|&p| surface.distance(p)).sum::<f64>() / pts.len() as f64;
    let index = PointIndex::new(&pts)?;
    let back = nearest_distances(&index, &reference);
    let backward = back.iter().sum::<f64>() / back.len() as f64;
    Ok(0.5 * (forward + backward))
}

/// Chamfer distance between two meshes by surface sampling. Both sides draw
/// from their own stream seeded with `seed`, so a mesh against itself gives
/// exactly zero.
pub fn chamfer_meshes(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    let pa = sample_mesh_surface(a, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let pb = sample_mesh_surface(b, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    chamfer_distance(&pa, &pb)
}

/// Fraction of `n` uniform probes in `bounds` whose density lies strictly
/// between `lo` and `hi`.
pub fn band_fraction(
    field: &dyn DensityField,
    bounds: &Aabb,
    n: usize,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::input("band_fraction needs at least one probe"));
    }
    let pts: Vec<Vec3> = (0..n)
        .map(|_| {
            [
                rng.gen_range(bounds.min[0]..bounds.max[0]),
                rng.gen_range(bounds.min[1]..bounds.max[1]),
                rng.gen_range(bounds.min[2]..bounds.max[2]),
            ]
        })
        .collect();
    let s = field.density_batch(&pts)?;
    Ok(s.iter().filter(|&&v| v > lo && v < hi).count() as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;

    fn sphere_grid(n: usize) -> ScalarGrid {
        let f = FnField(|x: Vec3| (1.0 - math::norm(x)).max(0.0));
        sample_density_grid(&f, [n; 3], Aabb::cube(1.0)).unwrap()
    }

    #[test]
    fn grid_examples() {
        let c = FnField(|_: Vec3| 0.25);
        let g = sample_density_grid(&c, [3, 4, 5], Aabb::cube(1.0)).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.25));
        let r = FnField(|x: Vec3| math::norm(x));
        let g = sample_density_grid(&r, [2; 3], Aabb::cube(1.0)).unwrap();
        assert_eq!(g.values.len(), 8);
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let p = g.point(i, j, k);
                    assert!(p.iter().all(|v| v.abs() == 1.0));
                    assert!((g.value(i, j, k) - math::norm(p)).abs() < 1e-12);
                }
            }
        }
        let bad = FnField(|x: Vec3| if x[0] > 0.9 && x[1] < -0.9 { f64::NAN } else { 0.0 });
        match sample_density_grid(&bad, [2; 3], Aabb::cube(1.0)) {
            Err(Error::NonFiniteDensity { i: 1, j: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_below_level() {
        let g = sphere_grid(8);
        let m = marching_cubes(&g, 2.0, Inside::Above).unwrap();
        assert!(m.is_empty() && m.vertices.is_empty());
    }

    #[test]
    fn sphere_vertices_and_orientation() {
        let g = sphere_grid(64);
        let voxel = g.spacing()[0];
        let m = marching_cubes(&g, 0.5, Inside::Above).unwrap();
        m.validate().unwrap();
        assert!(!m.is_empty());
        for v in &m.vertices {
            assert!((math::norm(*v) - 0.5).abs() <= 1.5 * voxel);
        }
        let vol = m.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((vol - exact).abs() / exact < 0.02, "{vol} vs {exact}");
        let flipped = marching_cubes(&g, 0.5, Inside::Below).unwrap();
        assert_eq!(flipped.vertices, m.vertices);
        assert_eq!(flipped, m.flipped());
    }

    #[test]
    fn vertices_interpolate_to_level() {
        let f = FnField(|x: Vec3| (3.0 * x[0]).sin() + x[1] * x[2] + 0.3 * x[2]);
        let g = sample_density_grid(&f, [17, 13, 11], Aabb::cube(1.0)).unwrap();
        let m = marching_cubes(&g, 0.2, Inside::Above).unwrap();
        assert!(!m.is_empty());
        m.validate().unwrap();
        let sp = g.spacing();
        for v in &m.vertices {
            let mut cell = [0usize; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let u = (v[a] - g.bounds.min[a]) / sp[a];
                cell[a] = (u.floor() as usize).min(g.res[a] - 2);
                frac[a] = u - cell[a] as f64;
            }
            // on an edge two fractions are integral, so trilinear reduces to linear
            let mut val = 0.0;
            for off in CORNERS.iter() {
                let w: f64 = (0..3).map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] }).product();
                val += w * g.value(cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]);
            }
            assert!((val - 0.2).abs() < 1e-9, "{val}");
        }
    }

    #[test]
    fn nested_level_sets() {
        let g = sphere_grid(48);
        let voxel = g.spacing()[0];
        let lo = marching_cubes(&g, 0.3, Inside::Above).unwrap();
        let hi = marching_cubes(&g, 0.6, Inside::Above).unwrap();
        let max_hi = hi.vertices.iter().map(|v| math::norm(*v)).fold(0.0, f64::max);
        let min_lo = lo.vertices.iter().map(|v| math::norm(*v)).fold(f64::INFINITY, f64::min);
        assert!(max_hi <= min_lo + voxel);
    }

    #[test]
    fn surface_sampling() {
        let tri = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = sample_mesh_surface(&tri, 500, &mut rng).unwrap();
        assert!(pts.iter().all(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12 && p[2] == 0.0));
        let a = sample_mesh_surface(&tri, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_mesh_surface(&tri, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        // areas 9:1
        let two = TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [0.0, 3.0, 0.0],
                [10.0, 0.0, 0.0],
                [11.0, 0.0, 0.0],
                [10.0, 1.0, 0.0],
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let n = 10_000;
        let pts = sample_mesh_surface(&two, n, &mut rng).unwrap();
        let big = pts.iter().filter(|p| p[0] < 5.0).count() as f64;
        let (mean, sd) = (0.9 * n as f64, (n as f64 * 0.9 * 0.1).sqrt());
        assert!((big - mean).abs() <= 3.0 * sd, "{big}");
        let empty = TriangleMesh::default();
        assert!(sample_mesh_surface(&empty, 10, &mut rng).is_err());
        let flat = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        assert!(sample_mesh_surface(&flat, 10, &mut rng).is_err());
    }

    #[test]
    fn analytic_chamfer_of_extracted_sphere() {
        let s = crate::scenes::AnalyticShape::sphere(0.5);
        let f = FnField(|x: Vec3| 0.5 - math::norm(x));
        let g = sample_density_grid(&f, [48; 3], Aabb::cube(1.0)).unwrap();
        let m = marching_cubes(&g, 0.0, Inside::Above).unwrap();
        let cd = chamfer_to_analytic(&m, &s, 20_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(cd < 1.5 * g.spacing()[0], "{cd}");
        assert_eq!(chamfer_meshes(&m, &m, 2000, 3).unwrap(), 0.0);
    }
}
