//! Marching Cubes on an analytic density, mesh export and Chamfer distance
//! to the exact surface.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikefield::geometry::{chamfer_to_analytic, marching_cubes, read_mesh, sample_density_grid, write_mesh, Inside};
use spikefield::field::FnField;
use spikefield::math::{norm, Aabb, Vec3};
use spikefield::scenes::AnalyticShape;

fn main() -> spikefield::Result<()> {
    let res: usize = std::env::args().nth(1).map(|s| s.parse().expect("resolution")).unwrap_or(64);
    let cone = FnField(|x: Vec3| (1.0 - norm(x)).max(0.0));
    let grid = sample_density_grid(&cone, [res; 3], Aabb::cube(1.0))?;
    let level = 0.5;
    let mesh = marching_cubes(&grid, level, Inside::Above)?;
    let radii: Vec<f64> = mesh.vertices.iter().map(|&v| norm(v)).collect();
    let (lo, hi) = radii.iter().fold((f64::MAX, f64::MIN), |(a, b), &r| (a.min(r), b.max(r)));
    println!("{} vertices, {} triangles at level {level:.4}", mesh.vertices.len(), mesh.triangles.len());
    println!("vertex radius in [{lo:.5}, {hi:.5}], signed volume {:.5}", mesh.signed_volume());

    let dir = std::env::temp_dir();
    for name in ["sphere.obj", "sphere.ply"] {
        let path = dir.join(name);
        write_mesh(&mesh, &path)?;
        let back = read_mesh(&path)?;
        println!("{}: {} triangles reloaded", path.display(), back.triangles.len());
    }
    let sphere = AnalyticShape::sphere(0.5);
    let cd = chamfer_to_analytic(&mesh, &sphere, 100_000, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("Chamfer distance to the exact sphere: {cd:.5}");
    Ok(())
}
