//! Trains presets on analytic scenes and scores the learned geometry.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::field::FieldParams;
use crate::geometry::{band_fraction, chamfer_to_analytic, marching_cubes, sample_density_grid, Inside, TriangleMesh};
use crate::math::Aabb;
use crate::scenes::AnalyticShape;
use crate::trainer::{Preset, TrainConfig, Trainer};

/// A finished training run.
pub struct Run {
    pub preset: Preset,
    pub seed: u64,
    pub field: FieldParams,
    /// Total loss of every iteration.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl Run {
    pub fn all_finite(&self) -> bool {
        self.losses.iter().all(|l| l.is_finite())
    }

    pub fn threshold(&self) -> f64 {
        self.field.threshold()
    }
}

/// Trains `base` under `preset` with `seed`.
pub fn train_preset(base: &TrainConfig, preset: Preset, seed: u64) -> Result<Run> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    preset.apply(&mut cfg);
    let start = Instant::now();
    let mut trainer = Trainer::from_config(cfg)?;
    let mut losses = Vec::with_capacity(trainer.total_iterations() as usize);
    while !trainer.is_done() {
        losses.push(trainer.step()?.total);
    }
    Ok(Run {
        preset,
        seed,
        field: trainer.into_field(),
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Geometry scores of one extracted mesh.
#[derive(Clone, Debug, Serialize)]
pub struct MeshScore {
    pub level: f64,
    pub resolution: usize,
    /// `None` when the mesh is empty.
    pub chamfer: Option<f64>,
    pub n_triangles: usize,
}

/// Marching Cubes over the field's scene box.
pub fn extract(field: &FieldParams, resolution: usize, level: f64) -> Result<TriangleMesh> {
    let grid = sample_density_grid(field, [resolution; 3], field.scene_box())?;
    marching_cubes(&grid, level, Inside::Above)
}

/// Extracts at `level` and measures Chamfer distance to `shape`.
pub fn score_mesh(
    field: &FieldParams,
    shape: &AnalyticShape,
    level: f64,
    resolution: usize,
    samples: usize,
    seed: u64,
) -> Result<MeshScore> {
    let mesh = extract(field, resolution, level)?;
    let chamfer = if mesh.is_empty() {
        None
    } else {
        Some(chamfer_to_analytic(&mesh, shape, samples, &mut ChaCha8Rng::seed_from_u64(seed))?)
    };
    Ok(MeshScore {
        level,
        resolution,
        chamfer,
        n_triangles: mesh.triangles.len(),
    })
}

/// Fraction of uniform scene-box probes with density in `(0.1·θ, θ)`.
pub fn mid_band(field: &FieldParams, bounds: &Aabb, theta: f64, probes: usize, seed: u64) -> Result<f64> {
    band_fraction(field, bounds, probes, 0.1 * theta, theta, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Median ignoring NaN entries; `None` if nothing remains.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN, 1.0]), Some(1.0));
        assert_eq!(median(&[f64::INFINITY, 1.0, f64::INFINITY]), Some(f64::INFINITY));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn short_run_is_finite_and_scored() {
        let mut cfg = TrainConfig::default();
        cfg.schedule.rounds = 2;
        cfg.batch_rays = 16;
        cfg.sampler.n_samples = 8;
        let run = train_preset(&cfg, Preset::Full, 1).unwrap();
        assert_eq!(run.losses.len() as u64, cfg.schedule.total_iterations());
        assert!(run.all_finite());
        let score = score_mesh(&run.field, &AnalyticShape::sphere(0.5), 0.01, 16, 1000, 0).unwrap();
        assert_eq!(score.resolution, 16);
        let band = mid_band(&run.field, &run.field.scene_box(), 1.0, 100, 0).unwrap();
        assert!((0.0..=1.0).contains(&band));
    }
}
