//! Grid-accelerated Chamfer distance against the quadratic reference.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikefield::geometry::{chamfer_brute_force, chamfer_distance};
use spikefield::math::Vec3;
use std::time::Instant;

fn cloud(n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
}

fn main() -> spikefield::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [100, 1_000, 5_000] {
        let (a, b) = (cloud(n, &mut rng), cloud(n, &mut rng));
        let t = Instant::now();
        let fast = chamfer_distance(&a, &b)?;
        let t_fast = t.elapsed();
        let t = Instant::now();
        let slow = chamfer_brute_force(&a, &b)?;
        let t_slow = t.elapsed();
        println!("n={n:>5}  grid {fast:.12} ({t_fast:?})  brute {slow:.12} ({t_slow:?})  diff {:.1e}", (fast - slow).abs());
    }
    Ok(())
}
