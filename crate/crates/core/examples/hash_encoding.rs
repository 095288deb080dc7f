//! Multiresolution hash encoding of a few points.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikefield::encoding::{HashGrid, HashGridConfig};
use spikefield::math::Aabb;

fn main() -> spikefield::Result<()> {
    let grid = HashGrid::new(HashGridConfig::default(), Aabb::cube(1.0).padded(0.05))?;
    println!("levels: {:?}", grid.resolutions());
    println!("growth factor: {:.4}", grid.growth());
    println!("table entries per level: {}", grid.table_size());
    let table = grid.init_table(&mut ChaCha8Rng::seed_from_u64(0));
    for x in [[0.0, 0.0, 0.0], [0.3, -0.2, 0.7], [0.99, 0.99, 0.99]] {
        let f = grid.encode(&table, x)?;
        println!("x = {x:?}: {} features, first level {:.3e} {:.3e}", f.len(), f[0], f[1]);
    }
    Ok(())
}
