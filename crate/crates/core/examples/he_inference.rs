//! Compiles a small polynomial network and runs one encrypted batch on the
//! lattice backend, checking the logits against plaintext evaluation.

use beaa::inference::{compile, infer_batch};
use beaa::model::{fold_batchnorm, logits, random_toy_network};
use ckks::{CkksBackend, HeParams};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (spec, weights) = random_toy_network(&mut rng, (2, 4, 4), 3)?;
    let params = HeParams::desk();
    let (folded, fw) = fold_batchnorm(&spec, &weights)?;
    let plan = compile(&folded, &fw, &params)?;
    let counts = plan.op_counts();
    println!(
        "{} layers, depth {}, {} instructions",
        spec.layers.len(),
        plan.depth,
        plan.instrs.len()
    );
    println!("ops: {counts:?}");

    let he = CkksBackend::generate(params, &[], &mut rng)?;
    let m = 32;
    let x = Array4::from_shape_simple_fn((m, 2, 4, 4), || rng.gen_range(-1.0..1.0));
    let enc = infer_batch(&plan, &he, &x, &mut rng)?;
    let plain = logits(&spec, &weights, &x)?;
    let err = enc.iter().zip(&plain).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("batch of {m}: max |encrypted - plaintext| = {err:.3e}");
    Ok(())
}
