//! Runs every gradient suite at 100 random points per op and prints the
//! worst relative error per op.

use std::time::Instant;

use spikefield::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> spikefield::Result<()> {
    let start = Instant::now();
    let summary = run_gradcheck(&GradcheckConfig::default())?;
    for op in &summary.ops {
        println!(
            "{:<10} {:<18} points={} max_rel_err={:.2e} surrogate_points={} {}",
            op.suite,
            op.op,
            op.points,
            op.max_rel_err,
            op.surrogate_points,
            if op.passed() { "ok" } else { "FAILED" }
        );
    }
    println!("all passed: {} in {:.1?}", summary.passed(), start.elapsed());
    Ok(())
}
