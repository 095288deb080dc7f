//! Trains the default configuration on the synthetic sphere, saves a
//! checkpoint and scores the mesh extracted at the learned threshold.
//!
//! Usage: train_sphere [rounds] [seed] [checkpoint path]
use spikefield::experiment::{score_mesh, train_preset};
use spikefield::scenes::AnalyticShape;
use spikefield::trainer::{Preset, TrainConfig};

fn main() -> spikefield::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig::default();
    if let Some(r) = args.first() {
        cfg.schedule.rounds = r.parse().expect("rounds");
    }
    let seed = args.get(1).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let ckpt = args.get(2).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("sphere.spkf"));

    let run = train_preset(&cfg, Preset::Full, seed)?;
    let theta = run.threshold();
    println!("{} iterations in {:.1} s, final loss {:.5}", run.losses.len(), run.seconds, run.losses.last().unwrap_or(&f64::NAN));
    println!("learned threshold {theta:.4}");
    spikefield::checkpoint::save(&run.field, &ckpt)?;
    println!("checkpoint written to {}", ckpt.display());
    let score = score_mesh(&run.field, &AnalyticShape::sphere(0.5), theta, 128, 100_000, 0)?;
    match score.chamfer {
        Some(cd) => println!("{} triangles, Chamfer to the exact sphere {cd:.5}", score.n_triangles),
        None => println!("the mesh at level {theta:.4} is empty"),
    }
    Ok(())
}
