//! Pinhole rays, stratified sampling and emission-absorption compositing.
//!
//! Per sample: `α = 1 − exp(−σδ)`, `T_i = ∏_{j<i} (1 − α_j)`, `w_i = T_i α_i`.
//! Per ray: `Ô = Σ w_i` and `Ĉ = Σ w_i c_i + (1 − Ô) · background`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BackwardCtx, NodeId, Tape, TapeOp, Tensor};
use crate::error::{Error, Result};
use crate::math::{self, Aabb, Vec3};

/// Lower bound on the exponent `−σδ`.
pub const MIN_EXPONENT: f64 = -60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        math::add(self.origin, math::scale(self.dir, t))
    }
}

/// Pinhole camera. The transform maps camera to world; the camera looks
/// along its local −z with +y up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub c2w: [[f64; 4]; 4],
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

/// Largest deviation of the rotation block from orthonormality.
pub fn orthonormality_error(c2w: &[[f64; 4]; 4]) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let d: f64 = (0..3).map(|r| c2w[r][a] * c2w[r][b]).sum();
            let e = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((d - e).abs());
        }
    }
    worst
}

impl Camera {
    pub fn new(c2w: [[f64; 4]; 4], focal: f64, width: u32, height: u32, near: f64, far: f64) -> Result<Self> {
        let cam = Self {
            c2w,
            focal,
            width,
            height,
            near,
            far,
        };
        cam.validate(1e-6)?;
        Ok(cam)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if !self.c2w.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::input("camera transform is not finite"));
        }
        let err = orthonormality_error(&self.c2w);
        if err > tol {
            return Err(Error::input(format!("camera rotation is not orthonormal (error {err:.3e})")));
        }
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::input("camera needs positive focal length and image size"));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::input(format!("camera needs 0 <= near < far, got {} and {}", self.near, self.far)));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with world up `up`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let back = math::normalize(math::sub(eye, target));
        let mut right = math::cross(up, back);
        if math::norm(right) < 1e-9 {
            right = math::cross([1.0, 0.0, 0.0], back);
            if math::norm(right) < 1e-9 {
                right = math::cross([0.0, 1.0, 0.0], back);
            }
        }
        let right = math::normalize(right);
        let cam_up = math::cross(back, right);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][0] = right[r];
            m[r][1] = cam_up[r];
            m[r][2] = back[r];
            m[r][3] = eye[r];
        }
        m[3][3] = 1.0;
        Self::new(m, focal, width, height, near, far)
    }

    pub fn position(&self) -> Vec3 {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    pub fn forward(&self) -> Vec3 {
        [-self.c2w[0][2], -self.c2w[1][2], -self.c2w[2][2]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Ray through the center of pixel `(i, j)`, column `i` and row `j`.
    pub fn ray(&self, i: u32, j: u32) -> Result<Ray> {
        if i >= self.width || j >= self.height {
            return Err(Error::input(format!(
                "pixel ({i}, {j}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let local = [
            (i as f64 + 0.5 - self.width as f64 / 2.0) / self.focal,
            -(j as f64 + 0.5 - self.height as f64 / 2.0) / self.focal,
            -1.0,
        ];
        let mut d = [0.0; 3];
        for (r, dr) in d.iter_mut().enumerate() {
            *dr = (0..3).map(|c| self.c2w[r][c] * local[c]).sum();
        }
        Ok(Ray {
            origin: self.position(),
            dir: math::normalize(d),
        })
    }
}

pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(i, j)| camera.ray(i, j)).collect()
}

/// Sample distances and segment lengths along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Stratified samples over `[near, far]` in `n` equal bins. Without jitter
/// each sample sits at its bin midpoint.
pub fn sample_ray(near: f64, far: f64, n: usize, jitter: bool, rng: &mut impl Rng) -> Result<RaySamples> {
    if n < 2 {
        return Err(Error::input("sample_ray needs at least two samples"));
    }
    if !(far > near) {
        return Err(Error::input(format!("sample interval [{near}, {far}] is empty")));
    }
    let h = (far - near) / n as f64;
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let u = if jitter { rng.gen::<f64>() } else { 0.5 };
            near + (i as f64 + u) * h
        })
        .collect();
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(h);
    Ok(RaySamples { t, delta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub jitter: bool,
    /// Constant background color composited behind every ray.
    pub background: [f64; 3],
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 32,
            jitter: true,
            background: [1.0; 3],
        }
    }
}

/// Flattened samples for a batch of rays. Rays that miss the sampling box
/// own no samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub dirs: Vec<Vec3>,
    /// `offsets[r]..offsets[r + 1]` are the samples of ray `r`.
    pub offsets: Vec<usize>,
    pub t: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub deltas: Vec<f64>,
    pub sigma: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl SampleBatch {
    /// Samples every ray inside its intersection with `bounds` and
    /// `[near, far]`.
    pub fn build(
        rays: &[Ray],
        near: f64,
        far: f64,
        bounds: &Aabb,
        cfg: &SamplerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut b = SampleBatch {
            offsets: vec![0],
            ..Default::default()
        };
        for ray in rays {
            b.dirs.push(ray.dir);
            if let Some((t0, t1)) = bounds.intersect(ray.origin, ray.dir) {
                let (lo, hi) = (t0.max(near), t1.min(far));
                if hi > lo {
                    let s = sample_ray(lo, hi, cfg.n_samples, cfg.jitter, rng)?;
                    for (&t, &d) in s.t.iter().zip(&s.delta) {
                        b.t.push(t);
                        b.positions.push(ray.at(t));
                        b.deltas.push(d);
                    }
                }
            }
            b.offsets.push(b.t.len());
        }
        Ok(b)
    }

    pub fn n_rays(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_samples(&self) -> usize {
        self.t.len()
    }

    pub fn ray_range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }

    /// Sample index to owning ray.
    pub fn sample_rays(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_samples());
        for r in 0..self.n_rays() {
            out.extend(std::iter::repeat(r).take(self.offsets[r + 1] - self.offsets[r]));
        }
        out
    }

    pub fn positions_tensor(&self) -> Tensor {
        Tensor::new(self.n_samples(), 3, self.positions.iter().flatten().copied().collect())
    }

    /// Per-sample view directions, N×3.
    pub fn sample_dirs(&self) -> Vec<Vec3> {
        self.sample_rays().into_iter().map(|r| self.dirs[r]).collect()
    }
}

/// Composited result of a set of rays.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub rgb: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

fn survival(sigma: f64, delta: f64) -> (f64, bool) {
    let e = -sigma * delta;
    if e < MIN_EXPONENT {
        (MIN_EXPONENT.exp(), true)
    } else {
        (e.exp(), false)
    }
}

/// Weights and transmittance of one ray.
pub fn ray_weights(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut w = Vec::with_capacity(sigma.len());
    let mut trans = Vec::with_capacity(sigma.len());
    let mut t = 1.0;
    for (&s, &d) in sigma.iter().zip(delta) {
        let (keep, _) = survival(s, d);
        trans.push(t);
        w.push(t * (1.0 - keep));
        t *= keep;
    }
    (w, trans)
}

/// Composites a single ray.
pub fn composite(sigma: &[f64], colors: &[[f64; 3]], delta: &[f64], background: [f64; 3]) -> Result<([f64; 3], f64, Vec<f64>)> {
    if sigma.len() != colors.len() || sigma.len() != delta.len() {
        return Err(Error::input("composite needs equal-length sample arrays"));
    }
    let (w, _) = ray_weights(sigma, delta);
    let mut rgb = [0.0; 3];
    let mut acc = 0.0;
    for (wi, c) in w.iter().zip(colors) {
        for k in 0..3 {
            rgb[k] += wi * c[k];
        }
        acc += wi;
    }
    for k in 0..3 {
        rgb[k] += (1.0 - acc) * background[k];
    }
    Ok((rgb, acc, w))
}

/// Composites every ray of a batch from per-sample densities and colors.
pub fn composite_batch(batch: &SampleBatch, sigma: &[f64], colors: &[[f64; 3]], background: [f64; 3]) -> Result<Composite> {
    if sigma.len() != batch.n_samples() || colors.len() != batch.n_samples() {
        return Err(Error::input("composite_batch: sample count mismatch"));
    }
    let mut out = Composite {
        rgb: Vec::with_capacity(batch.n_rays()),
        opacity: Vec::with_capacity(batch.n_rays()),
        weights: Vec::with_capacity(batch.n_samples()),
        transmittance: Vec::with_capacity(batch.n_samples()),
    };
    for r in 0..batch.n_rays() {
        let range = batch.ray_range(r);
        let (w, tr) = ray_weights(&sigma[range.clone()], &batch.deltas[range.clone()]);
        let mut rgb = [0.0; 3];
        let mut acc = 0.0;
        for (wi, c) in w.iter().zip(&colors[range]) {
            for k in 0..3 {
                rgb[k] += wi * c[k];
            }
            acc += wi;
        }
        for k in 0..3 {
            rgb[k] += (1.0 - acc) * background[k];
        }
        out.rgb.push(rgb);
        out.opacity.push(acc);
        out.weights.extend(w);
        out.transmittance.extend(tr);
    }
    Ok(out)
}

struct WeightsOp {
    offsets: Vec<usize>,
    deltas: Vec<f64>,
}

impl TapeOp for WeightsOp {
    fn name(&self) -> &'static str {
        "composite_weights"
    }

    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        if !ctx.needs_grad[0] {
            return vec![None];
        }
        let sigma = ctx.inputs[0].data();
        let w = ctx.output.data();
        let gw = ctx.grad_out.data();
        let mut gs = vec![0.0; sigma.len()];
        for r in 0..self.offsets.len() - 1 {
            let (a, b) = (self.offsets[r], self.offsets[r + 1]);
            let mut t = 1.0;
            let mut tail: f64 = (a..b).map(|i| gw[i] * w[i]).sum();
            for k in a..b {
                let (keep, clamped) = survival(sigma[k], self.deltas[k]);
                let t_next = t * keep;
                tail -= gw[k] * w[k];
                if !clamped {
                    gs[k] = self.deltas[k] * (t_next * gw[k] - tail);
                }
                t = t_next;
            }
        }
        vec![Some(Tensor::new(sigma.len(), 1, gs))]
    }
}

/// Records compositing weights for an S×1 density node over the batch.
pub fn weights_on_tape(tape: &mut Tape<'_>, batch: &SampleBatch, sigma: NodeId) -> Result<NodeId> {
    let s = tape.value(sigma);
    if s.shape() != (batch.n_samples(), 1) {
        return Err(Error::input("weights_on_tape: density must be S×1"));
    }
    let mut w = Vec::with_capacity(batch.n_samples());
    for r in 0..batch.n_rays() {
        let range = batch.ray_range(r);
        w.extend(ray_weights(&s.data()[range.clone()], &batch.deltas[range]).0);
    }
    let op = WeightsOp {
        offsets: batch.offsets.clone(),
        deltas: batch.deltas.clone(),
    };
    Ok(tape.push_extern(Box::new(op), &[sigma], Tensor::column(w)))
}

struct RaySumOp {
    offsets: Vec<usize>,
}

impl TapeOp for RaySumOp {
    fn name(&self) -> &'static str {
        "ray_sum"
    }

    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let g = ctx.grad_out;
        let mut gx = Tensor::zeros(x.rows(), x.cols());
        for r in 0..self.offsets.len() - 1 {
            for i in self.offsets[r]..self.offsets[r + 1] {
                gx.row_mut(i).copy_from_slice(g.row(r));
            }
        }
        vec![Some(gx)]
    }
}

/// Sums the sample rows of every ray: S×k → R×k.
pub fn ray_sum(tape: &mut Tape<'_>, batch: &SampleBatch, values: NodeId) -> NodeId {
    let x = tape.value(values);
    assert_eq!(x.rows(), batch.n_samples(), "ray_sum: row count mismatch");
    let mut out = Tensor::zeros(batch.n_rays(), x.cols());
    for r in 0..batch.n_rays() {
        for i in batch.ray_range(r) {
            for (o, v) in out.row_mut(r).iter_mut().zip(x.row(i)) {
                *o += *v;
            }
        }
    }
    let op = RaySumOp {
        offsets: batch.offsets.clone(),
    };
    tape.push_extern(Box::new(op), &[values], out)
}

/// Differentiable render outputs.
#[derive(Clone, Copy, Debug)]
pub struct RenderNodes {
    /// R×3 colors including the background term.
    pub rgb: NodeId,
    /// R×1 accumulated opacity.
    pub opacity: NodeId,
    /// S×1 per-sample weights.
    pub weights: NodeId,
}

/// Records compositing of S×1 densities and S×3 colors.
pub fn render_on_tape(
    tape: &mut Tape<'_>,
    batch: &SampleBatch,
    sigma: NodeId,
    colors: NodeId,
    background: [f64; 3],
) -> Result<RenderNodes> {
    let weights = weights_on_tape(tape, batch, sigma)?;
    let wc = tape.mul_column(colors, weights);
    let surface = ray_sum(tape, batch, wc);
    let opacity = ray_sum(tape, batch, weights);
    let neg = tape.scale(opacity, -1.0);
    let clear = tape.offset(neg, 1.0);
    let bg = tape.constant(Tensor::new(1, 3, background.to_vec()));
    let back = tape.matmul(clear, bg);
    let rgb = tape.add(surface, back);
    Ok(RenderNodes { rgb, opacity, weights })
}
