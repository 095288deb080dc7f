//! Density and color networks over hash-grid features, and normals of a
//! density field by central finite differences.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::encoding::{hash_encode, HashGrid, HashGridConfig, ShBasis};
use crate::error::{Error, Result};
use crate::math::{self, Aabb, Vec3};

/// Gradient norms at or below this are treated as degenerate.
pub const DEGENERATE_GRADIENT_NORM: f64 = 1e-8;
/// Fraction of the scene extent added on every side of the encoding frame.
pub const FRAME_PADDING: f64 = 0.05;
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub hash: HashGridConfig,
    pub density_hidden: usize,
    pub density_layers: usize,
    /// Length of the geometry feature `g` passed to the color network.
    pub geo_features: usize,
    pub color_hidden: usize,
    pub color_layers: usize,
    pub sh_degree: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hash: HashGridConfig::default(),
            density_hidden: 32,
            density_layers: 1,
            geo_features: 15,
            color_hidden: 32,
            color_layers: 1,
            sh_degree: 4,
        }
    }
}

/// Optimizer groups of the field parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    HashTable,
    Density,
    Color,
    Threshold,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::HashTable,
        ParamGroup::Density,
        ParamGroup::Color,
        ParamGroup::Threshold,
    ];
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    table: ParamId,
    density: Vec<(ParamId, ParamId)>,
    color: Vec<(ParamId, ParamId)>,
    threshold: ParamId,
}

/// All learnable state: hash table, both networks and the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    config: FieldConfig,
    store: ParamStore,
    layout: Layout,
    grid: HashGrid,
    sh: ShBasis,
}

fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn add_mlp(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
    layers: usize,
    output: usize,
) -> Vec<(ParamId, ParamId)> {
    let mut ids = Vec::with_capacity(layers + 1);
    let mut fan_in = input;
    for l in 0..layers {
        let w = store.add(
            &format!("{prefix}.{l}.weight"),
            &[fan_in, hidden],
            kaiming_uniform(rng, fan_in, fan_in * hidden),
        );
        let b = store.add(&format!("{prefix}.{l}.bias"), &[hidden], vec![0.0; hidden]);
        ids.push((w, b));
        fan_in = hidden;
    }
    let w = store.add(&format!("{prefix}.{layers}.weight"), &[fan_in, output], vec![0.0; fan_in * output]);
    let b = store.add(&format!("{prefix}.{layers}.bias"), &[output], vec![0.0; output]);
    ids.push((w, b));
    ids
}

fn mlp_on_tape(tape: &mut Tape<'_>, layers: &[(ParamId, ParamId)], mut h: NodeId) -> NodeId {
    let last = layers.len() - 1;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let wn = tape.param(w);
        let bn = tape.param(b);
        h = tape.linear(h, wn, bn);
        if i < last {
            h = tape.relu(h);
        }
    }
    h
}

impl FieldParams {
    /// Builds a freshly initialized field over `scene_box`.
    pub fn new(config: FieldConfig, scene_box: Aabb, rng: &mut impl Rng) -> Result<Self> {
        let frame = scene_box.padded(FRAME_PADDING);
        Self::with_frame(config, frame, rng)
    }

    pub(crate) fn with_frame(config: FieldConfig, frame: Aabb, rng: &mut impl Rng) -> Result<Self> {
        if config.density_hidden == 0 || config.color_hidden == 0 {
            return Err(Error::input("network hidden width must be positive"));
        }
        let grid = HashGrid::new(config.hash.clone(), frame)?;
        let sh = ShBasis::new(config.sh_degree)?;
        let mut store = ParamStore::new();
        let table = store.add("hash.table", &grid.table_shape(), grid.init_table(rng));
        let density = add_mlp(
            &mut store,
            rng,
            "density",
            grid.output_dim(),
            config.density_hidden,
            config.density_layers,
            1 + config.geo_features,
        );
        let color = add_mlp(
            &mut store,
            rng,
            "color",
            sh.coefficient_count() + config.geo_features,
            config.color_hidden,
            config.color_layers,
            3,
        );
        let threshold = store.add("threshold", &[], vec![0.0]);
        Ok(Self {
            config,
            store,
            layout: Layout {
                table,
                density,
                color,
                threshold,
            },
            grid,
            sh,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn grid(&self) -> &HashGrid {
        &self.grid
    }

    pub fn sh(&self) -> ShBasis {
        self.sh
    }

    /// The padded box that the encoding maps onto the unit cube.
    /// The scene box the field was built for: the frame minus its padding.
    pub fn scene_box(&self) -> Aabb {
        let f = self.frame();
        let pad = math::scale(f.extent(), FRAME_PADDING / (1.0 + 2.0 * FRAME_PADDING));
        Aabb::new(math::add(f.min, pad), math::sub(f.max, pad))
    }

    pub fn frame(&self) -> Aabb {
        *self.grid.frame()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn table_id(&self) -> ParamId {
        self.layout.table
    }

    pub fn threshold_id(&self) -> ParamId {
        self.layout.threshold
    }

    pub fn threshold(&self) -> f64 {
        self.store.get(self.layout.threshold)[0]
    }

    pub fn set_threshold(&mut self, v: f64) {
        self.store.get_mut(self.layout.threshold)[0] = v;
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        if id == self.layout.table {
            ParamGroup::HashTable
        } else if id == self.layout.threshold {
            ParamGroup::Threshold
        } else if self.layout.density.iter().any(|&(w, b)| w == id || b == id) {
            ParamGroup::Density
        } else {
            ParamGroup::Color
        }
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.group(id) == group).collect()
    }

    /// Finest-level voxel width, the smallest of the three axes.
    pub fn finest_voxel(&self) -> f64 {
        let c = self.grid.finest_cell();
        c[0].min(c[1]).min(c[2])
    }

    /// Records the density network on an N×3 position node. Returns
    /// `(σ, g)` as N×1 and N×G nodes.
    pub fn density_on_tape(&self, tape: &mut Tape<'_>, positions: NodeId) -> Result<(NodeId, NodeId)> {
        let enc = hash_encode(tape, &self.grid, self.layout.table, positions)?;
        let out = mlp_on_tape(tape, &self.layout.density, enc);
        let raw = tape.slice_cols(out, 0, 1);
        let sigma = tape.softplus(raw);
        let g = tape.slice_cols(out, 1, self.config.geo_features);
        Ok((sigma, g))
    }

    /// Records the color network on N×D² basis values and N×G features.
    pub fn color_on_tape(&self, tape: &mut Tape<'_>, sh: NodeId, geo: NodeId) -> NodeId {
        let x = tape.concat_cols(&[sh, geo]);
        let out = mlp_on_tape(tape, &self.layout.color, x);
        tape.sigmoid(out)
    }

    /// SH basis rows for a batch of unit directions.
    pub fn sh_rows(&self, dirs: &[Vec3]) -> Result<Tensor> {
        let k = self.sh.coefficient_count();
        let mut data = Vec::with_capacity(dirs.len() * k);
        for &d in dirs {
            data.extend(self.sh.encode(d)?);
        }
        Ok(Tensor::new(dirs.len(), k, data))
    }

    /// Density and geometry feature at one position.
    pub fn density(&self, x: Vec3) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new(&self.store);
        let p = tape.constant(Tensor::new(1, 3, x.to_vec()));
        let (s, g) = self.density_on_tape(&mut tape, p)?;
        Ok((tape.value(s).data()[0], tape.value(g).data().to_vec()))
    }

    /// Color for a geometry feature and a unit viewing direction.
    pub fn color(&self, g: &[f64], d: Vec3) -> Result<[f64; 3]> {
        if g.len() != self.config.geo_features {
            return Err(Error::input(format!(
                "geometry feature has {} entries, expected {}",
                g.len(),
                self.config.geo_features
            )));
        }
        let mut tape = Tape::new(&self.store);
        let sh = tape.constant(self.sh_rows(&[d])?);
        let gn = tape.constant(Tensor::new(1, g.len(), g.to_vec()));
        let c = self.color_on_tape(&mut tape, sh, gn);
        let v = tape.value(c).data();
        Ok([v[0], v[1], v[2]])
    }
}

/// A scalar density over world space.
pub trait DensityField: Sync {
    fn density_batch(&self, xs: &[Vec3]) -> Result<Vec<f64>>;
}

impl DensityField for FieldParams {
    fn density_batch(&self, xs: &[Vec3]) -> Result<Vec<f64>> {
        let chunks: Vec<Result<Vec<f64>>> = xs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new(&self.store);
                let flat = chunk.iter().flatten().copied().collect();
                let p = tape.constant(Tensor::new(chunk.len(), 3, flat));
                let (s, _) = self.density_on_tape(&mut tape, p)?;
                Ok(tape.value(s).data().to_vec())
            })
            .collect();
        let mut out = Vec::with_capacity(xs.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Wraps a closure as a density field.
pub struct FnField<F>(pub F);

impl<F: Fn(Vec3) -> f64 + Sync> DensityField for FnField<F> {
    fn density_batch(&self, xs: &[Vec3]) -> Result<Vec<f64>> {
        Ok(xs.iter().map(|&x| (self.0)(x)).collect())
    }
}

/// The six central-difference probes around `x`, in the order
/// `+x, −x, +y, −y, +z, −z`.
pub fn fd_probes(x: Vec3, eps: f64) -> [Vec3; 6] {
    let mut out = [x; 6];
    for a in 0..3 {
        out[2 * a][a] += eps;
        out[2 * a + 1][a] -= eps;
    }
    out
}

/// Central-difference gradient of the density at `x`.
pub fn fd_gradient(field: &dyn DensityField, x: Vec3, eps: f64) -> Result<Vec3> {
    let s = field.density_batch(&fd_probes(x, eps))?;
    Ok([
        (s[0] - s[1]) / (2.0 * eps),
        (s[2] - s[3]) / (2.0 * eps),
        (s[4] - s[5]) / (2.0 * eps),
    ])
}

/// `n = −∇σ/‖∇σ‖`, or `None` when the gradient is degenerate.
pub fn normal(field: &dyn DensityField, x: Vec3, eps: f64) -> Result<Option<Vec3>> {
    let g = fd_gradient(field, x, eps)?;
    Ok(normal_from_gradient(g))
}

pub fn normal_from_gradient(g: Vec3) -> Option<Vec3> {
    let n = math::norm(g);
    if !(n > DEGENERATE_GRADIENT_NORM) {
        return None;
    }
    Some(math::scale(g, -1.0 / n))
}

/// Records central-difference density gradients at `points` on the tape.
/// All six probe sets are evaluated in one density call. Returns N×3.
pub fn fd_gradient_on_tape(
    tape: &mut Tape<'_>,
    field: &FieldParams,
    points: &[Vec3],
    eps: f64,
) -> Result<NodeId> {
    let n = points.len();
    let mut flat = Vec::with_capacity(n * 18);
    for k in 0..6 {
        let (axis, sign) = (k / 2, if k % 2 == 0 { eps } else { -eps });
        for p in points {
            let mut q = *p;
            q[axis] += sign;
            flat.extend_from_slice(&q);
        }
    }
    let pos = tape.constant(Tensor::new(6 * n, 3, flat));
    let (sigma, _) = field.density_on_tape(tape, pos)?;
    let mut cols = Vec::with_capacity(3);
    for a in 0..3 {
        let plus = tape.slice_rows(sigma, 2 * a * n, n);
        let minus = tape.slice_rows(sigma, (2 * a + 1) * n, n);
        let d = tape.sub(plus, minus);
        cols.push(tape.scale(d, 0.5 / eps));
    }
    Ok(tape.concat_cols(&cols))
}
