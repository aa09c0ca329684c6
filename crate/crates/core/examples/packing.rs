//! Element-wise and channel-wise packing of one batch, with the slot
//! utilization of each layout.

use beaa::packing::{pack_channelwise, pack_elementwise, slot_utilization, unpack_channelwise, unpack_elementwise};
use ckks::HeParams;
use ndarray::Array4;

fn main() -> anyhow::Result<()> {
    let params = HeParams::desk();
    let slots = params.slot_count();
    let (m, c, h, w) = (64, 3, 8, 8);
    let batch = Array4::from_shape_fn((m, c, h, w), |(i, ch, y, x)| (i * 1000 + ch * 100 + y * 10 + x) as f64);

    let ew = pack_elementwise(&batch, slots)?;
    println!(
        "element-wise: {} ciphertexts, slot i of cell (c,h,w) is image i",
        ew.len()
    );
    println!("  cell (1,2,3) starts with {:?}", &ew.cell(1, 2, 3)[..3]);
    assert_eq!(unpack_elementwise(&ew, m)?, batch);

    let cw = pack_channelwise(&batch, slots)?;
    let back = unpack_channelwise(&cw)?;
    assert_eq!(back, batch);
    println!("channel-wise: one ciphertext per (image, channel)");

    println!("utilization with {slots} slots:");
    println!("  channel-wise {:.4}", slot_utilization(h * w, &params)?);
    println!("  element-wise {:.4}", slot_utilization(m, &params)?);
    let large = HeParams::large();
    println!("32x32 images on N=32768:");
    println!("  channel-wise {:.4}", slot_utilization(32 * 32, &large)?);
    println!("  element-wise {:.4} at M=16384", slot_utilization(16384, &large)?);
    Ok(())
}
