//! Volume compositing along one ray and its opacity identity.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikefield::rendering::{composite, sample_ray};

fn main() -> spikefield::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = sample_ray(0.5, 3.5, 16, true, &mut rng)?;
    let sigma: Vec<f64> = s.t.iter().map(|&t| if (1.5..2.5).contains(&t) { 4.0 } else { 0.0 }).collect();
    let colors: Vec<[f64; 3]> = (0..sigma.len()).map(|_| [rng.gen(), 0.2, 0.8]).collect();
    let (rgb, opacity, weights) = composite(&sigma, &colors, &s.delta, [1.0; 3])?;
    let clear: f64 = sigma.iter().zip(&s.delta).map(|(&sg, &d)| (-sg * d).exp()).product();
    println!("rgb {rgb:.4?}");
    println!("opacity {opacity:.12}  vs  1 - prod(1 - alpha) {:.12}", 1.0 - clear);
    for ((t, w), sg) in s.t.iter().zip(&weights).zip(&sigma) {
        println!("t={t:.3} sigma={sg:.1} weight={w:.4}");
    }
    Ok(())
}
