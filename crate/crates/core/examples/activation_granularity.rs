//! Coefficient counts of the three activation granularities, and the
//! per-layer totals for the CIFAR-10 network.

use beaa::activation::{count_params, Granularity};
use beaa::model::{build_squeezenet_opt, ActivationKind, LayerSpec};

fn main() -> anyhow::Result<()> {
    let (n, h, w) = (64, 32, 32);
    println!("feature map {n}x{h}x{w}:");
    for g in [Granularity::Layer, Granularity::Channel, Granularity::Element] {
        let (coeffs, acts) = count_params(g, n, h, w);
        println!("  {g:?}: {coeffs} coefficients, {acts} activations");
    }

    let spec = build_squeezenet_opt(10, (3, 32, 32), ActivationKind::parse("poly-element")?)?;
    let shapes = spec.shapes()?;
    let mut total = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::Activation { .. } = layer {
            let (c, h, w) = shapes[i];
            let (coeffs, _) = count_params(Granularity::Element, c, h, w);
            total += coeffs;
            println!("layer {i:2} {c:3}x{h:2}x{w:2}: {coeffs} coefficients");
        }
    }
    println!("element-wise coefficients in the network: {total}");
    Ok(())
}
