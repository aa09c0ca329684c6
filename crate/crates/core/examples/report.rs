//! Prints the static report for the CIFAR-10 network on the large preset.

use beaa::inference::OpTimings;
use beaa::model::{build_squeezenet_opt, ActivationKind};
use beaa::report;
use ckks::HeParams;

fn main() -> anyhow::Result<()> {
    let spec = build_squeezenet_opt(10, (3, 32, 32), ActivationKind::parse("poly-element")?)?;
    let r = report::build(&spec, &HeParams::large(), 16384, &OpTimings::default())?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}
