//! Forward response and surrogate gradients of the spiking density gate.
use spikefield::diffcore::{ParamStore, Tape, Tensor};
use spikefield::spiking::{self, FifNeuron, GateOptions, InputGradRule};

fn main() -> spikefield::Result<()> {
    let neuron = FifNeuron::new(1.0, 1.0, 1.0)?;
    println!("{:>6} {:>8} {:>10} {:>10} {:>10}", "sigma", "gated", "d/dtheta", "d/dsigma", "full");
    for i in 0..=12 {
        let s = i as f64 * 0.25;
        println!(
            "{s:>6.2} {:>8.3} {:>10.4} {:>10.4} {:>10.4}",
            spiking::fif_forward(s, &neuron),
            spiking::fif_grad_threshold(s, &neuron),
            spiking::fif_grad_input(s, &neuron),
            spiking::fif_grad_input_full(s, &neuron),
        );
    }

    let store = ParamStore::new();
    for rule in [InputGradRule::Heaviside, InputGradRule::Full] {
        let mut tape = Tape::new(&store);
        let sigma = tape.constant(Tensor::column(vec![0.5, 1.2, 2.5]));
        let th = tape.constant_scalar(1.0);
        let opts = GateOptions { input_rule: rule, ..GateOptions::default() };
        let out = spiking::fif_gate(&mut tape, sigma, th, 1.0, 1.0, opts)?;
        println!(
            "{rule:?}: output {:?}, window term on tape: {}",
            tape.value(out).data(),
            tape.contains_op(spiking::INPUT_WINDOW_TERM_OP)
        );
    }
    Ok(())
}
