//! Modelled cost of both layouts for the CIFAR-10 network, and a measured
//! batch-size sweep of the small network on the simulator.

use beaa::inference::{benchmark, compile, estimate_cost, OpTimings};
use beaa::model::{build_desk_net, build_squeezenet_opt, fold_batchnorm, ActivationKind, ModelWeights};
use beaa::packing::Layout;
use ckks::{CkksBackend, HeParams, SimBackend};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let act = ActivationKind::parse("poly-element")?;

    // timings measured on the small preset stand in for the large one
    let desk = HeParams::desk();
    let he = CkksBackend::generate(desk.clone(), &[1], &mut rng)?;
    let timings = OpTimings::measure(&he, 3, &mut rng)?;
    println!("per-op seconds: {timings:?}");

    let spec = build_squeezenet_opt(10, (3, 32, 32), act)?;
    let large = HeParams::large();
    for m in [1, 64, 1024, 16384] {
        for layout in [Layout::ElementWise, Layout::ChannelWise] {
            let c = estimate_cost(&spec, &large, m, layout, &timings)?;
            println!(
                "M={m:5} {layout:?}: total {:.1}s amortized {:.4}s mult {} rot {}",
                c.total_s, c.amortized_s, c.counts.mult, c.counts.rot
            );
        }
    }

    let small = build_desk_net(4, (3, 8, 8), act)?;
    let w = ModelWeights::init(&small, 0.01, &mut rng)?;
    let (fs, fw) = fold_batchnorm(&small, &w)?;
    let plan = compile(&fs, &fw, &desk)?;
    let sim = SimBackend::new(desk, &[])?;
    for row in benchmark(&plan, &sim, &[64, 256, 1024], &mut rng)? {
        println!(
            "sim M={:5}: {:.4}s total, {:.2e}s per image",
            row.m, row.total_s, row.amortized_s
        );
    }
    Ok(())
}
