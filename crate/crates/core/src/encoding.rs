//! Positional encodings: a multi-resolution hash grid over positions and a
//! real spherical-harmonics basis over unit view directions.

use serde::{Deserialize, Serialize};

use crate::diffcore::{BackwardCtx, NodeId, ParamId, Tape, TapeOp, Tensor};
use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            log2_table_size: 14,
            features: 2,
            base_resolution: 16,
            max_resolution: 256,
        }
    }
}

/// Geometry of a hash grid. The learnable table lives in a parameter store
/// with shape `[levels, 2^log2_table_size, features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    growth: f64,
    resolutions: Vec<u32>,
    /// The padded scene box mapped onto the unit cube.
    frame: Aabb,
}

impl HashGrid {
    /// `frame` is the already padded box that maps onto the unit cube.
    pub fn new(config: HashGridConfig, frame: Aabb) -> Result<Self> {
        if config.levels == 0 || config.features == 0 || config.base_resolution == 0 {
            return Err(Error::input("hash grid needs at least one level, feature and cell"));
        }
        if config.max_resolution < config.base_resolution {
            return Err(Error::input("hash grid max resolution below base resolution"));
        }
        if !frame.is_valid() {
            return Err(Error::input("hash grid frame is degenerate"));
        }
        let growth = if config.levels > 1 {
            ((config.max_resolution as f64).ln() - (config.base_resolution as f64).ln())
                / (config.levels - 1) as f64
        } else {
            0.0
        }
        .exp();
        let resolutions = (0..config.levels)
            .map(|l| (config.base_resolution as f64 * growth.powi(l as i32) + 1e-9).floor() as u32)
            .collect();
        Ok(Self {
            config,
            growth,
            resolutions,
            frame,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn growth(&self) -> f64 {
        self.growth
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn frame(&self) -> &Aabb {
        &self.frame
    }

    pub fn table_size(&self) -> usize {
        1usize << self.config.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        self.config.levels * self.config.features
    }

    pub fn table_len(&self) -> usize {
        self.config.levels * self.table_size() * self.config.features
    }

    pub fn table_shape(&self) -> [usize; 3] {
        [self.config.levels, self.table_size(), self.config.features]
    }

    /// World-space width of one cell at the finest level.
    pub fn finest_cell(&self) -> Vec3 {
        let n = *self.resolutions.last().unwrap() as f64;
        let e = self.frame.extent();
        [e[0] / n, e[1] / n, e[2] / n]
    }

    /// Maps a world position to the unit cube, clamping to the boundary.
    /// Also returns which axes were inside the frame (those carry gradient).
    pub fn normalize(&self, x: Vec3) -> ([f64; 3], [bool; 3]) {
        let e = self.frame.extent();
        let mut u = [0.0; 3];
        let mut inside = [true; 3];
        for i in 0..3 {
            let v = (x[i] - self.frame.min[i]) / e[i];
            inside[i] = (0.0..=1.0).contains(&v);
            u[i] = v.clamp(0.0, 1.0);
        }
        (u, inside)
    }

    fn corner_index(&self, level: usize, c: [u32; 3]) -> usize {
        let n = self.resolutions[level] + 1;
        let t = self.table_size();
        let dense = (n as u64).pow(3) <= t as u64;
        let local = if dense {
            (c[0] + c[1] * n + c[2] * n * n) as usize
        } else {
            let h = c[0].wrapping_mul(PRIMES[0]) ^ c[1].wrapping_mul(PRIMES[1]) ^ c[2].wrapping_mul(PRIMES[2]);
            (h as usize) & (t - 1)
        };
        (level * t + local) * self.config.features
    }

    /// Cell origin and fractional offsets of `u` (in the unit cube) at a level.
    fn locate(&self, level: usize, u: [f64; 3]) -> ([u32; 3], [f64; 3]) {
        let n = self.resolutions[level];
        let mut cell = [0u32; 3];
        let mut frac = [0.0; 3];
        for i in 0..3 {
            let p = u[i] * n as f64;
            let c = (p.floor() as i64).clamp(0, n as i64 - 1) as u32;
            cell[i] = c;
            frac[i] = p - c as f64;
        }
        (cell, frac)
    }

    /// Corner table offsets and trilinear weights for one position.
    fn corners(&self, level: usize, u: [f64; 3]) -> ([usize; 8], [f64; 8], [f64; 3]) {
        let (cell, frac) = self.locate(level, u);
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        for c in 0..8 {
            let bit = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut wc = 1.0;
            let mut corner = cell;
            for a in 0..3 {
                if bit[a] == 1 {
                    wc *= frac[a];
                    corner[a] += 1;
                } else {
                    wc *= 1.0 - frac[a];
                }
            }
            idx[c] = self.corner_index(level, corner);
            w[c] = wc;
        }
        (idx, w, frac)
    }

    /// Encodes a single position against `table` (no tape).
    pub fn encode(&self, table: &[f64], x: Vec3) -> Result<Vec<f64>> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::input(format!("non-finite position {x:?}")));
        }
        let f = self.config.features;
        let mut out = vec![0.0; self.output_dim()];
        let (u, _) = self.normalize(x);
        for l in 0..self.config.levels {
            let (idx, w, _) = self.corners(l, u);
            for c in 0..8 {
                for k in 0..f {
                    out[l * f + k] += w[c] * table[idx[c] + k];
                }
            }
        }
        Ok(out)
    }

    /// Initial table values: uniform in ±1e-4.
    pub fn init_table(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        (0..self.table_len()).map(|_| rng.gen_range(-1e-4..1e-4)).collect()
    }
}

struct HashEncodeOp {
    grid: HashGrid,
    table: ParamId,
    /// Per row and level: 8 corner offsets.
    idx: Vec<usize>,
    /// Per row and level: 8 trilinear weights.
    weights: Vec<f64>,
}

impl TapeOp for HashEncodeOp {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn has_param_sink(&self) -> bool {
        true
    }

    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let levels = self.grid.config.levels;
        let f = self.grid.config.features;
        let g = ctx.grad_out;
        let rows = g.rows();
        let entry = ctx.params.entry(self.table).clone();
        {
            let tg = &mut ctx.param_grads.as_mut_slice()[entry.offset..entry.offset + entry.len];
            for r in 0..rows {
                let grow = g.row(r);
                for l in 0..levels {
                    let base = (r * levels + l) * 8;
                    for c in 0..8 {
                        let w = self.weights[base + c];
                        if w == 0.0 {
                            continue;
                        }
                        let i = self.idx[base + c];
                        for k in 0..f {
                            tg[i + k] += w * grow[l * f + k];
                        }
                    }
                }
            }
        }
        if !ctx.needs_grad[0] {
            return vec![None];
        }
        // d/dx through the trilinear weights
        let table = ctx.params.get(self.table);
        let pos = ctx.inputs[0];
        let ext = self.grid.frame.extent();
        let mut gx = Tensor::zeros(rows, 3);
        for r in 0..rows {
            let x = [pos.get(r, 0), pos.get(r, 1), pos.get(r, 2)];
            let (u, inside) = self.grid.normalize(x);
            let grow = g.row(r);
            let mut acc = [0.0; 3];
            for l in 0..levels {
                let n = self.grid.resolutions[l] as f64;
                let (_, frac) = self.grid.locate(l, u);
                let base = (r * levels + l) * 8;
                for c in 0..8 {
                    let bit = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                    let i = self.idx[base + c];
                    let gdotv: f64 = (0..f).map(|k| grow[l * f + k] * table[i + k]).sum();
                    if gdotv == 0.0 {
                        continue;
                    }
                    for a in 0..3 {
                        let mut d = if bit[a] == 1 { 1.0 } else { -1.0 };
                        for b in 0..3 {
                            if b != a {
                                d *= if bit[b] == 1 { frac[b] } else { 1.0 - frac[b] };
                            }
                        }
                        acc[a] += gdotv * d * n;
                    }
                }
            }
            for a in 0..3 {
                gx.row_mut(r)[a] = if inside[a] { acc[a] / ext[a] } else { 0.0 };
            }
        }
        vec![Some(gx)]
    }
}

/// Records the hash encoding of an N×3 position node; returns N×(L·F).
pub fn hash_encode(tape: &mut Tape<'_>, grid: &HashGrid, table: ParamId, positions: NodeId) -> Result<NodeId> {
    let pos = tape.value(positions);
    if pos.cols() != 3 {
        return Err(Error::input("hash_encode expects N×3 positions"));
    }
    if !pos.all_finite() {
        return Err(Error::input("non-finite position in hash_encode"));
    }
    let levels = grid.config.levels;
    let f = grid.config.features;
    let rows = pos.rows();
    let table_vals = tape.params().get(table);
    if table_vals.len() != grid.table_len() {
        return Err(Error::input("hash table length does not match grid"));
    }
    let mut idx = Vec::with_capacity(rows * levels * 8);
    let mut weights = Vec::with_capacity(rows * levels * 8);
    let mut out = Tensor::zeros(rows, grid.output_dim());
    for r in 0..rows {
        let x = [pos.get(r, 0), pos.get(r, 1), pos.get(r, 2)];
        let (u, _) = grid.normalize(x);
        let orow = out.row_mut(r);
        for l in 0..levels {
            let (ci, cw, _) = grid.corners(l, u);
            for c in 0..8 {
                for k in 0..f {
                    orow[l * f + k] += cw[c] * table_vals[ci[c] + k];
                }
            }
            idx.extend_from_slice(&ci);
            weights.extend_from_slice(&cw);
        }
    }
    let op = HashEncodeOp {
        grid: grid.clone(),
        table,
        idx,
        weights,
    };
    Ok(tape.push_extern(Box::new(op), &[positions], out))
}

/// Real spherical harmonics with `degree` bands (`degree²` coefficients).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShBasis {
    pub degree: usize,
}

impl Default for ShBasis {
    fn default() -> Self {
        Self { degree: 4 }
    }
}

impl ShBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if !(1..=4).contains(&degree) {
            return Err(Error::input(format!("spherical harmonics degree {degree} not in 1..=4")));
        }
        Ok(Self { degree })
    }

    pub fn coefficient_count(&self) -> usize {
        self.degree * self.degree
    }

    pub fn encode(&self, d: Vec3) -> Result<Vec<f64>> {
        sh_encode(d, self.degree)
    }
}

/// Evaluates the real SH basis (bands 0..degree−1) at a unit direction.
pub fn sh_encode(d: Vec3, degree: usize) -> Result<Vec<f64>> {
    let n = crate::math::norm(d);
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::input(format!("direction {d:?} is not unit length (norm {n})")));
    }
    if !(1..=4).contains(&degree) {
        return Err(Error::input(format!("spherical harmonics degree {degree} not in 1..=4")));
    }
    let [x, y, z] = d;
    let mut out = Vec::with_capacity(degree * degree);
    out.push(0.282_094_791_773_878_14);
    if degree > 1 {
        out.push(-0.488_602_511_902_919_9 * y);
        out.push(0.488_602_511_902_919_9 * z);
        out.push(-0.488_602_511_902_919_9 * x);
    }
    if degree > 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(1.092_548_430_592_079_2 * x * y);
        out.push(-1.092_548_430_592_079_2 * y * z);
        out.push(0.946_174_695_757_560 * zz - 0.315_391_565_252_520);
        out.push(-1.092_548_430_592_079_2 * x * z);
        out.push(0.546_274_215_296_039_6 * (xx - yy));
    }
    if degree > 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(0.590_043_589_926_643_5 * y * (3.0 * xx - yy));
        out.push(2.890_611_442_640_554 * x * y * z);
        out.push(0.457_045_799_464_465_7 * y * (5.0 * zz - 1.0));
        out.push(0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0));
        out.push(0.457_045_799_464_465_7 * x * (5.0 * zz - 1.0));
        out.push(1.445_305_721_320_277 * z * (xx - yy));
        out.push(0.590_043_589_926_643_5 * x * (xx - 3.0 * yy));
    }
    Ok(out)
}
