//! Full-precision integrate-and-fire gate on density with a learnable
//! threshold and surrogate gradients.
//!
//! Forward: `σ_s = σ` when `σ ≥ ϑ`, else `0`.
//!
//! Backward with respect to the threshold uses the triangular window
//! `∂σ_s/∂ϑ = −r · max(0, (k − |σ − ϑ|) / k²) · σ`. With respect to the
//! input, the default path keeps only the Heaviside term `Θ(σ − ϑ)`; the
//! two-term rule (window term plus Heaviside) is available for ablations and
//! is recorded as a separate tape node so the default path can be audited.

use serde::{Deserialize, Serialize};

use crate::diffcore::{BackwardCtx, NodeId, Tape, TapeOp, Tensor};
use crate::error::{Error, Result};

/// Name of the tape node carrying the window term of the input gradient.
pub const INPUT_WINDOW_TERM_OP: &str = "fif_input_window_term";
pub const GATE_OP: &str = "fif_gate";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FifNeuron {
    pub threshold: f64,
    /// Surrogate window half-width.
    pub k: f64,
    /// Surrogate scale.
    pub r: f64,
}

impl Default for FifNeuron {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            k: 1.0,
            r: 1.0,
        }
    }
}

impl FifNeuron {
    pub fn new(threshold: f64, k: f64, r: f64) -> Result<Self> {
        if !(k > 0.0 && r > 0.0) {
            return Err(Error::input(format!("surrogate needs k > 0 and r > 0, got k={k}, r={r}")));
        }
        Ok(Self { threshold, k, r })
    }

    /// Keeps the threshold on the non-negative axis.
    pub fn clamp_threshold(&mut self) {
        self.threshold = self.threshold.max(0.0);
    }

    fn window(&self, sigma: f64) -> f64 {
        window(sigma, self.threshold, self.k)
    }
}

#[inline]
pub fn window(sigma: f64, threshold: f64, k: f64) -> f64 {
    ((k - (sigma - threshold).abs()) / (k * k)).max(0.0)
}

#[inline]
fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn fif_forward(sigma: f64, neuron: &FifNeuron) -> f64 {
    if sigma >= neuron.threshold {
        sigma
    } else {
        0.0
    }
}

pub fn fif_grad_threshold(sigma: f64, neuron: &FifNeuron) -> f64 {
    -neuron.r * neuron.window(sigma) * sigma
}

/// Input gradient used for training: `Θ(σ − ϑ)`.
pub fn fif_grad_input(sigma: f64, neuron: &FifNeuron) -> f64 {
    heaviside(sigma - neuron.threshold)
}

/// Two-term input gradient, `r · window · σ + Θ(σ − ϑ)`. Diagnostic only.
pub fn fif_grad_input_full(sigma: f64, neuron: &FifNeuron) -> f64 {
    neuron.r * neuron.window(sigma) * sigma + heaviside(sigma - neuron.threshold)
}

/// How the gate propagates gradient to its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputGradRule {
    #[default]
    Heaviside,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateOptions {
    pub input_rule: InputGradRule,
    /// Whether rendering gradients reach the threshold through the window.
    pub threshold_grad: bool,
}

impl Default for GateOptions {
    fn default() -> Self {
        Self {
            input_rule: InputGradRule::Heaviside,
            threshold_grad: true,
        }
    }
}

struct GateOp {
    k: f64,
    r: f64,
    threshold_grad: bool,
}

impl TapeOp for GateOp {
    fn name(&self) -> &'static str {
        GATE_OP
    }

    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let sigma = ctx.inputs[0];
        let th = ctx.inputs[1].data()[0];
        let g = ctx.grad_out;
        let gs = ctx.needs_grad[0].then(|| {
            let d = sigma
                .data()
                .iter()
                .zip(g.data())
                .map(|(&s, &gi)| gi * heaviside(s - th))
                .collect();
            Tensor::new(sigma.rows(), sigma.cols(), d)
        });
        let gt = (ctx.needs_grad[1] && self.threshold_grad).then(|| {
            let v: f64 = sigma
                .data()
                .iter()
                .zip(g.data())
                .map(|(&s, &gi)| gi * (-self.r * window(s, th, self.k) * s))
                .sum();
            Tensor::scalar(v)
        });
        vec![gs, gt]
    }

    fn surrogate_sites(&self, inputs: &[&Tensor], _output: &Tensor) -> usize {
        if !self.threshold_grad {
            return 0;
        }
        let th = inputs[1].data()[0];
        inputs[0]
            .data()
            .iter()
            .filter(|&&s| s != 0.0 && window(s, th, self.k) > 0.0)
            .count()
    }
}

/// Zero in the forward pass; contributes the window term to the input
/// gradient.
struct InputWindowTermOp {
    k: f64,
    r: f64,
}

impl TapeOp for InputWindowTermOp {
    fn name(&self) -> &'static str {
        INPUT_WINDOW_TERM_OP
    }

    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let sigma = ctx.inputs[0];
        let th = ctx.inputs[1].data()[0];
        let d = sigma
            .data()
            .iter()
            .zip(ctx.grad_out.data())
            .map(|(&s, &gi)| gi * self.r * window(s, th, self.k) * s)
            .collect();
        vec![Some(Tensor::new(sigma.rows(), sigma.cols(), d)), None]
    }

    fn surrogate_sites(&self, inputs: &[&Tensor], _output: &Tensor) -> usize {
        let th = inputs[1].data()[0];
        inputs[0]
            .data()
            .iter()
            .filter(|&&s| s != 0.0 && window(s, th, self.k) > 0.0)
            .count()
    }
}

/// Records the gate on an N×1 density node. `threshold` must be a 1×1 node.
pub fn fif_gate(
    tape: &mut Tape<'_>,
    sigma: NodeId,
    threshold: NodeId,
    k: f64,
    r: f64,
    opts: GateOptions,
) -> Result<NodeId> {
    let th = tape
        .value(threshold)
        .as_scalar()
        .ok_or_else(|| Error::input("threshold node must be 1×1"))?;
    let neuron = FifNeuron::new(th, k, r)?;
    let sv = tape.value(sigma);
    let (rows, cols) = sv.shape();
    let out = sv.map(|s| fif_forward(s, &neuron));
    let gate = tape.push_extern(
        Box::new(GateOp {
            k,
            r,
            threshold_grad: opts.threshold_grad,
        }),
        &[sigma, threshold],
        out,
    );
    match opts.input_rule {
        InputGradRule::Heaviside => Ok(gate),
        InputGradRule::Full => {
            let zeros = Tensor::zeros(rows, cols);
            let term = tape.push_extern(Box::new(InputWindowTermOp { k, r }), &[sigma, threshold], zeros);
            Ok(tape.add(gate, term))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamStore;
    use proptest::prelude::*;

    fn n(th: f64) -> FifNeuron {
        FifNeuron::new(th, 1.0, 1.0).unwrap()
    }

    #[test]
    fn forward_branches() {
        assert_eq!(fif_forward(2.0, &n(1.0)), 2.0);
        assert_eq!(fif_forward(0.5, &n(1.0)), 0.0);
        assert_eq!(fif_forward(1.0, &n(1.0)), 1.0);
    }

    #[test]
    fn threshold_gradient_values() {
        assert_eq!(fif_grad_threshold(3.0, &n(1.0)), 0.0);
        assert_eq!(fif_grad_threshold(1.0, &n(1.0)), -1.0);
        assert_eq!(fif_grad_threshold(1.5, &n(1.0)), -0.75);
    }

    #[test]
    fn input_gradient_values() {
        assert_eq!(fif_grad_input(2.0, &n(1.0)), 1.0);
        assert_eq!(fif_grad_input(0.5, &n(1.0)), 0.0);
        assert_eq!(fif_grad_input(1.0, &n(1.0)), 1.0);
        assert_eq!(fif_grad_input_full(1.0, &n(1.0)), 2.0);
        assert_eq!(fif_grad_input_full(3.0, &n(1.0)), 1.0);
        assert_eq!(fif_grad_input_full(0.5, &n(1.0)), 0.25);
    }

    #[test]
    fn invalid_surrogate_parameters() {
        assert!(FifNeuron::new(0.0, 0.0, 1.0).is_err());
        assert!(FifNeuron::new(0.0, 1.0, -1.0).is_err());
    }

    fn gate_grads(sigmas: &[f64], th: f64, opts: GateOptions) -> (Vec<f64>, f64, Vec<&'static str>) {
        let mut s = ParamStore::new();
        let sig = s.add("sigma", &[sigmas.len()], sigmas.to_vec());
        let t = s.add("theta", &[], vec![th]);
        let mut tape = Tape::new(&s);
        let sn = tape.param_column(sig);
        let tn = tape.param(t);
        let out = fif_gate(&mut tape, sn, tn, 1.0, 1.0, opts).unwrap();
        let l = tape.sum(out);
        let names = tape.op_names();
        let g = tape.backward(l).unwrap();
        (g.param(&s, sig).to_vec(), g.param(&s, t)[0], names)
    }

    #[test]
    fn tape_gate_default_path_has_no_window_term() {
        let (gs, gt, names) = gate_grads(&[2.0, 0.5, 1.0, 1.5], 1.0, GateOptions::default());
        assert_eq!(gs, vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(gt, 0.0 - 0.5 * 0.5 - 1.0 - 0.75);
        assert!(!names.contains(&INPUT_WINDOW_TERM_OP));
        assert!(names.contains(&GATE_OP));
    }

    #[test]
    fn tape_gate_full_rule() {
        let opts = GateOptions {
            input_rule: InputGradRule::Full,
            threshold_grad: true,
        };
        let (gs, _, names) = gate_grads(&[1.0, 0.5, 3.0], 1.0, opts);
        assert_eq!(gs, vec![2.0, 0.25, 1.0]);
        assert!(names.contains(&INPUT_WINDOW_TERM_OP));
    }

    #[test]
    fn threshold_path_can_be_disabled() {
        let opts = GateOptions {
            threshold_grad: false,
            ..Default::default()
        };
        let (_, gt, _) = gate_grads(&[1.0, 1.5], 1.0, opts);
        assert_eq!(gt, 0.0);
    }

    proptest! {
        #[test]
        fn forward_is_idempotent(s in 0.0f64..5.0, th in 0.0f64..5.0) {
            let nn = n(th);
            prop_assert_eq!(fif_forward(fif_forward(s, &nn), &nn), fif_forward(s, &nn));
        }

        #[test]
        fn raising_threshold_never_raises_output(s in 0.0f64..5.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(fif_forward(s, &n(hi)) <= fif_forward(s, &n(lo)));
        }

        #[test]
        fn surrogates_vanish_outside_band(s in 0.0f64..6.0, th in 0.0f64..6.0, k in 0.1f64..2.0, r in 0.1f64..3.0) {
            let nn = FifNeuron::new(th, k, r).unwrap();
            if (s - th).abs() >= k {
                prop_assert_eq!(fif_grad_threshold(s, &nn), 0.0);
                prop_assert_eq!(fif_grad_input_full(s, &nn), fif_grad_input(s, &nn));
            }
            prop_assert!(fif_grad_threshold(s, &nn) <= 0.0);
        }

        #[test]
        fn zero_threshold_is_identity(s in 0.0f64..10.0) {
            prop_assert_eq!(fif_forward(s, &n(0.0)), s);
            prop_assert_eq!(fif_grad_input(s, &n(0.0)), 1.0);
        }
    }
}
