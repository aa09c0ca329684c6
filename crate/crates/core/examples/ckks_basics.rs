//! Encrypts two vectors, multiplies, rescales and rotates them on the
//! lattice backend, and compares every step with the simulator.

use ckks::{CkksBackend, HasMeta, HeBackend, HeParams, SimBackend};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> anyhow::Result<()> {
    let params = HeParams::toy(1024, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let he = CkksBackend::generate(params.clone(), &[1], &mut rng)?;
    let sim = SimBackend::new(params, &[1])?;

    let n = he.slot_count();
    let x: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) - 0.5).collect();
    let y: Vec<f64> = (0..n).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();

    let (a, b) = (he.encode_encrypt(&x, &mut rng)?, he.encode_encrypt(&y, &mut rng)?);
    let (sa, sb) = (sim.encode_encrypt(&x, &mut rng)?, sim.encode_encrypt(&y, &mut rng)?);

    let prod = he.rescale(&he.mult(&a, &b)?)?;
    let sprod = sim.rescale(&sim.mult(&sa, &sb)?)?;
    let rot = he.rotate(&prod, 1)?;
    let srot = sim.rotate(&sprod, 1)?;

    let expect: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let dec = he.decrypt_decode(&prod)?;
    println!("slots            {n}");
    println!("level after mult {} (started at {})", prod.level(), a.level());
    println!("mult error       {:.3e}", max_err(&dec, &expect));
    println!(
        "sim mult error   {:.3e}",
        max_err(&sim.decrypt_decode(&sprod)?, &expect)
    );
    let shifted: Vec<f64> = (0..n).map(|i| expect[(i + 1) % n]).collect();
    println!("rotate error     {:.3e}", max_err(&he.decrypt_decode(&rot)?, &shifted));
    println!(
        "sim rotate error {:.3e}",
        max_err(&sim.decrypt_decode(&srot)?, &shifted)
    );
    Ok(())
}
