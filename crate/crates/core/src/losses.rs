//! Photometric, threshold, orientation, eikonal and mask losses, in plain
//! and taped forms, plus the weighted total and its per-iteration report.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::math::Vec3;

/// Opacity clamp used by the mask loss.
pub const MASK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_o: f64,
    pub lambda_eik: f64,
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v: 0.05,
            lambda_o: 1e-4,
            lambda_eik: 1e-4,
            lambda_m: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_v", self.lambda_v),
            ("lambda_o", self.lambda_o),
            ("lambda_eik", self.lambda_eik),
            ("lambda_m", self.lambda_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: format!("losses.{k}"),
                    message: format!("must be a finite value >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Normal,
    Spiking,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Normal => "normal",
            Stage::Spiking => "spiking",
        }
    }
}

/// Which optional terms are active in a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTerms {
    pub threshold: bool,
    pub orientation: bool,
    pub eikonal: bool,
    pub mask: bool,
}

impl Default for StageTerms {
    fn default() -> Self {
        Self {
            threshold: false,
            orientation: true,
            eikonal: true,
            mask: true,
        }
    }
}

/// Raw term values of one iteration. Disabled terms are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    pub stage: Stage,
    pub color: f64,
    pub threshold: Option<f64>,
    pub orientation: Option<f64>,
    pub eikonal: Option<f64>,
    pub mask: Option<f64>,
    pub total: f64,
    pub theta: f64,
}

impl LossReport {
    /// Weighted sum of the enabled terms. `threshold` already holds
    /// `λ_v · e^{−ϑ}`.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.color
            + self.threshold.unwrap_or(0.0)
            + w.lambda_o * self.orientation.unwrap_or(0.0)
            + w.lambda_eik * self.eikonal.unwrap_or(0.0)
            + w.lambda_m * self.mask.unwrap_or(0.0)
    }
}

/// Mean over rays of the per-ray L1 color error.
pub fn color_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::input("color_loss needs a nonempty batch of matched pairs"));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|k| (p[k] - t[k]).abs()).sum::<f64>())
        .sum();
    Ok(s / pred.len() as f64)
}

/// `λ_v · e^{−ϑ}`.
pub fn threshold_loss(theta: f64, lambda_v: f64) -> f64 {
    lambda_v * (-theta).exp()
}

/// Sum of `w · max(0, n·d)²` over the samples of each ray, averaged over
/// `n_rays`. Samples without a normal are skipped.
pub fn orientation_loss(weights: &[f64], normals: &[Option<Vec3>], dirs: &[Vec3], n_rays: usize) -> Result<f64> {
    if n_rays == 0 || weights.len() != normals.len() || weights.len() != dirs.len() {
        return Err(Error::input("orientation_loss: mismatched inputs"));
    }
    let s: f64 = weights
        .iter()
        .zip(normals)
        .zip(dirs)
        .filter_map(|((w, n), d)| n.map(|n| w * crate::math::dot(n, *d).max(0.0).powi(2)))
        .sum();
    Ok(s / n_rays as f64)
}

/// Mean of `(‖∇σ‖ − 1)²`.
pub fn eikonal_loss(grads: &[Vec3]) -> Result<f64> {
    if grads.is_empty() {
        return Err(Error::input("eikonal_loss needs at least one probe"));
    }
    let s: f64 = grads.iter().map(|g| (crate::math::norm(*g) - 1.0).powi(2)).sum();
    Ok(s / grads.len() as f64)
}

/// Mean binary cross-entropy of opacities against masks.
pub fn mask_loss(mask: &[f64], opacity: &[f64]) -> Result<f64> {
    if mask.is_empty() || mask.len() != opacity.len() {
        return Err(Error::input("mask_loss needs a nonempty batch of matched pairs"));
    }
    let s: f64 = mask
        .iter()
        .zip(opacity)
        .map(|(&m, &o)| {
            let o = o.clamp(MASK_EPS, 1.0 - MASK_EPS);
            -(m * o.ln() + (1.0 - m) * (1.0 - o).ln())
        })
        .sum();
    Ok(s / mask.len() as f64)
}

/// Weighted total of raw term values. Fails on any non-finite term.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    let terms = [
        ("color", Some(report.color)),
        ("threshold", report.threshold),
        ("orientation", report.orientation),
        ("eikonal", report.eikonal),
        ("mask", report.mask),
    ];
    for (name, v) in terms {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    iteration: report.iter,
                    stage: report.stage.as_str(),
                    reason: format!("{name} loss is {v}"),
                });
            }
        }
    }
    Ok(report.weighted_total(weights))
}

/// Taped mean per-ray L1 error. `target` is R×3.
pub fn color_loss_on_tape(tape: &mut Tape<'_>, rgb: NodeId, target: &Tensor) -> NodeId {
    let t = tape.constant(target.clone());
    let d = tape.sub(rgb, t);
    let a = tape.abs(d);
    let s = tape.sum(a);
    tape.scale(s, 1.0 / target.rows() as f64)
}

/// Taped `λ_v · e^{−ϑ}` on a 1×1 threshold node.
pub fn threshold_loss_on_tape(tape: &mut Tape<'_>, theta: NodeId, lambda_v: f64) -> NodeId {
    let n = tape.scale(theta, -1.0);
    let e = tape.exp(n);
    tape.scale(e, lambda_v)
}

/// Taped orientation loss. `grads` is S×3 density gradients, `weights`
/// S×1, `dirs` S×3, `valid` marks samples with a usable normal.
pub fn orientation_loss_on_tape(
    tape: &mut Tape<'_>,
    weights: NodeId,
    grads: NodeId,
    dirs: &[Vec3],
    valid: &[bool],
    n_rays: usize,
) -> NodeId {
    let norm = tape.row_norm(grads);
    let safe = tape.clamp(norm, crate::field::DEGENERATE_GRADIENT_NORM, f64::INFINITY);
    let inv = tape.recip(safe);
    let unit = tape.mul_column(grads, inv);
    let n = tape.scale(unit, -1.0);
    let d = tape.constant(Tensor::new(dirs.len(), 3, dirs.iter().flatten().copied().collect()));
    let nd = tape.mul(n, d);
    let cos = tape.row_sum(nd);
    let facing = tape.relu(cos);
    let sq = tape.square(facing);
    let m = tape.constant(Tensor::column(valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()));
    let sq = tape.mul(sq, m);
    let wsq = tape.mul(sq, weights);
    let s = tape.sum(wsq);
    tape.scale(s, 1.0 / n_rays as f64)
}

/// Taped eikonal loss on N×3 gradients.
pub fn eikonal_loss_on_tape(tape: &mut Tape<'_>, grads: NodeId) -> NodeId {
    let n = tape.row_norm(grads);
    let d = tape.offset(n, -1.0);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Taped BCE on an R×1 opacity node.
pub fn mask_loss_on_tape(tape: &mut Tape<'_>, opacity: NodeId, mask: &[f64]) -> NodeId {
    let o = tape.clamp(opacity, MASK_EPS, 1.0 - MASK_EPS);
    let lo = tape.log(o);
    let neg = tape.scale(o, -1.0);
    let inv = tape.offset(neg, 1.0);
    let li = tape.log(inv);
    let m = tape.constant(Tensor::column(mask.to_vec()));
    let mi = tape.constant(Tensor::column(mask.iter().map(|v| 1.0 - v).collect()));
    let a = tape.mul(m, lo);
    let b = tape.mul(mi, li);
    let s = tape.add(a, b);
    let mean = tape.mean(s);
    tape.scale(mean, -1.0)
}

/// Appends reports to a newline-delimited JSON log.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, report: &LossReport) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, report)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
