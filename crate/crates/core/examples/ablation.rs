//! Trains every preset on the sphere scene and compares geometry. Meshes
//! use each run's own threshold; the baseline, which learns none, is
//! extracted and banded at the full run's threshold.
//!
//! Usage: ablation [rounds] [seed]
use spikefield::experiment::{mid_band, score_mesh, train_preset};
use spikefield::scenes::AnalyticShape;
use spikefield::trainer::{Preset, TrainConfig};

fn main() -> spikefield::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig::default();
    if let Some(r) = args.first() {
        cfg.schedule.rounds = r.parse().expect("rounds");
    }
    let seed = args.get(1).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let sphere = AnalyticShape::sphere(0.5);

    let mut full_theta = None;
    println!("{:<9} {:>9} {:>9} {:>9} {:>8}", "preset", "theta", "chamfer", "mid-band", "seconds");
    for preset in Preset::ALL {
        let run = train_preset(&cfg, preset, seed)?;
        let theta = match preset {
            Preset::Baseline => full_theta.unwrap_or(1.0),
            _ => run.threshold(),
        };
        if preset == Preset::Full {
            full_theta = Some(theta);
        }
        let score = score_mesh(&run.field, &sphere, theta, 128, 100_000, 0)?;
        let band = mid_band(&run.field, &run.field.scene_box(), theta, 10_000, seed)?;
        let cd = score.chamfer.map_or("empty".to_string(), |c| format!("{c:.5}"));
        println!("{:<9} {theta:>9.4} {cd:>9} {band:>9.4} {:>8.1}", preset.name(), run.seconds);
    }
    Ok(())
}
