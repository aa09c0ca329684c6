//! Batch layouts for SIMD slots.
//!
//! Element-wise packing puts feature `(c, h, w)` of all `M` images into one
//! slot vector, so a batch becomes an `n x H x W` grid of cells whose slot
//! `i` belongs to image `i`. Channel-wise packing puts one image channel in
//! one slot vector, row-major, giving `M * n` vectors of `H * W` used slots.

use ckks::{HeBackend, HeParams};
use ndarray::Array4;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    ElementWise,
    ChannelWise,
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::ElementWise => "element-wise",
            Layout::ChannelWise => "channel-wise",
        })
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "element-wise" | "element" => Ok(Layout::ElementWise),
            "channel-wise" | "channel" => Ok(Layout::ChannelWise),
            other => Err(Error::Config(format!("unknown layout `{other}`"))),
        }
    }
}

/// Element-wise packed grid. Cells are stored channel-major, then row, then
/// column; `batch` is the number of meaningful slots in each cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedTensor<T> {
    pub shape: (usize, usize, usize),
    pub batch: usize,
    pub cells: Vec<T>,
}

impl<T> PackedTensor<T> {
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.shape.1 + h) * self.shape.2 + w
    }

    pub fn cell(&self, c: usize, h: usize, w: usize) -> &T {
        &self.cells[self.index(c, h, w)]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn map<U, E>(&self, f: impl FnMut(&T) -> std::result::Result<U, E>) -> std::result::Result<PackedTensor<U>, E> {
        Ok(PackedTensor {
            shape: self.shape,
            batch: self.batch,
            cells: self.cells.iter().map(f).collect::<std::result::Result<_, _>>()?,
        })
    }

    /// Cells of channels `lo..hi`.
    pub fn channels(&self, lo: usize, hi: usize) -> &[T] {
        let plane = self.shape.1 * self.shape.2;
        &self.cells[lo * plane..hi * plane]
    }
}

/// Packs an `(M, n, H, W)` batch into `n*H*W` slot vectors of length `M`.
/// Encoding later zero-pads each vector to the full slot count.
pub fn pack_elementwise(batch: &Array4<f64>, slot_count: usize) -> Result<PackedTensor<Vec<f64>>> {
    let (m, n, h, w) = batch.dim();
    if m == 0 {
        return shape_err("empty batch");
    }
    if m > slot_count {
        return Err(ckks::HeError::CapacityExceeded {
            len: m,
            capacity: slot_count,
        }
        .into());
    }
    let mut cells = Vec::with_capacity(n * h * w);
    for c in 0..n {
        for i in 0..h {
            for j in 0..w {
                cells.push((0..m).map(|b| batch[[b, c, i, j]]).collect());
            }
        }
    }
    Ok(PackedTensor {
        shape: (n, h, w),
        batch: m,
        cells,
    })
}

/// Reads the first `m` slots of every cell back into an `(m, n, H, W)` batch.
pub fn unpack_elementwise(packed: &PackedTensor<Vec<f64>>, m: usize) -> Result<Array4<f64>> {
    let (n, h, w) = packed.shape;
    if packed.cells.len() != n * h * w {
        return shape_err("cell count does not match the grid shape");
    }
    if m > packed.batch || packed.cells.iter().any(|c| c.len() < m) {
        return shape_err(format!("cannot unpack {m} images from a batch of {}", packed.batch));
    }
    Ok(Array4::from_shape_fn((m, n, h, w), |(b, c, i, j)| {
        packed.cells[(c * h + i) * w + j][b]
    }))
}

pub fn encrypt_packed<B: HeBackend, R: RngCore + ?Sized>(
    he: &B,
    packed: &PackedTensor<Vec<f64>>,
    rng: &mut R,
) -> Result<PackedTensor<B::Ciphertext>> {
    Ok(packed.map(|v| he.encode_encrypt(v, rng))?)
}

pub fn decrypt_packed<B: HeBackend>(he: &B, packed: &PackedTensor<B::Ciphertext>) -> Result<PackedTensor<Vec<f64>>> {
    Ok(packed.map(|ct| he.decrypt_decode(ct))?)
}

/// Channel-wise layout: `packs[i * n + c]` holds image `i`, channel `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPackedTensor<T> {
    pub batch: usize,
    pub shape: (usize, usize, usize),
    pub packs: Vec<T>,
}

pub fn pack_channelwise(batch: &Array4<f64>, slot_count: usize) -> Result<ChannelPackedTensor<Vec<f64>>> {
    let (m, n, h, w) = batch.dim();
    if h * w > slot_count {
        return Err(ckks::HeError::CapacityExceeded {
            len: h * w,
            capacity: slot_count,
        }
        .into());
    }
    let mut packs = Vec::with_capacity(m * n);
    for b in 0..m {
        for c in 0..n {
            packs.push(batch.slice(ndarray::s![b, c, .., ..]).iter().copied().collect());
        }
    }
    Ok(ChannelPackedTensor {
        batch: m,
        shape: (n, h, w),
        packs,
    })
}

pub fn unpack_channelwise(packed: &ChannelPackedTensor<Vec<f64>>) -> Result<Array4<f64>> {
    let (n, h, w) = packed.shape;
    let m = packed.batch;
    if packed.packs.len() != m * n || packed.packs.iter().any(|p| p.len() < h * w) {
        return shape_err("channel packs do not match the declared shape");
    }
    Ok(Array4::from_shape_fn((m, n, h, w), |(b, c, i, j)| {
        packed.packs[b * n + c][i * w + j]
    }))
}

/// Fraction of the `N/2` slots that carry data.
pub fn slot_utilization(used_slots: usize, params: &HeParams) -> Result<f64> {
    let slots = params.slot_count();
    if used_slots > slots {
        return Err(ckks::HeError::CapacityExceeded {
            len: used_slots,
            capacity: slots,
        }
        .into());
    }
    Ok(used_slots as f64 / slots as f64)
}

/// Serializes an encrypted grid into the shared container format; one blob
/// pair per cell.
pub fn packed_to_container(
    ctx: &ckks::CkksContext,
    packed: &PackedTensor<ckks::Ciphertext>,
) -> ckks::container::Container {
    use ckks::container::{self, Container, Kind};
    let meta = packed.cells.first().map(|ct| container::ciphertext_meta(ct, ctx));
    let mut c = Container::new(
        Kind::PackedTensor,
        json!({
            "layout": Layout::ElementWise,
            "shape": [packed.shape.0, packed.shape.1, packed.shape.2],
            "batch": packed.batch,
            "cells": packed.cells.len(),
            "ciphertext": meta,
        }),
    );
    for ct in &packed.cells {
        container::push_ciphertext_blobs(&mut c, ct);
    }
    c
}

pub fn packed_from_container(
    ctx: &ckks::CkksContext,
    c: ckks::container::Container,
) -> Result<PackedTensor<ckks::Ciphertext>> {
    use ckks::container::{self, Kind};
    let c = c.expect_kind(Kind::PackedTensor)?;
    let layout: Layout = c.meta_field("layout")?;
    if layout != Layout::ElementWise {
        return Err(Error::Format(format!("unsupported layout {layout}")));
    }
    let shape: (usize, usize, usize) = c.meta_field("shape")?;
    let batch: usize = c.meta_field("batch")?;
    let count = shape.0 * shape.1 * shape.2;
    if c.blobs.len() != 2 * count {
        return Err(Error::Format("cell count does not match shape".into()));
    }
    let meta = c.meta.get("ciphertext").cloned().unwrap_or_default();
    let cells = c
        .blobs
        .chunks_exact(2)
        .map(|pair| container::ciphertext_from_parts(ctx, &meta, &pair[0], &pair[1]))
        .collect::<ckks::Result<Vec<_>>>()?;
    Ok(PackedTensor { shape, batch, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_image_example() {
        let batch = array![[[[1.0, 2.0], [3.0, 4.0]]], [[[5.0, 6.0], [7.0, 8.0]]]];
        let p = pack_elementwise(&batch, 8).unwrap();
        assert_eq!(p.shape, (1, 2, 2));
        assert_eq!(
            p.cells,
            vec![vec![1.0, 5.0], vec![2.0, 6.0], vec![3.0, 7.0], vec![4.0, 8.0]]
        );
        assert_eq!(unpack_elementwise(&p, 2).unwrap(), batch);
        assert!(unpack_elementwise(&p, 3).is_err());
    }

    #[test]
    fn single_image_cells_are_singletons() {
        let batch = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, i, j)| (c * 9 + i * 3 + j) as f64);
        let p = pack_elementwise(&batch, 4).unwrap();
        assert_eq!(p.len(), 18);
        for (k, cell) in p.cells.iter().enumerate() {
            assert_eq!(cell, &vec![k as f64]);
        }
    }

    #[test]
    fn capacity_bounds() {
        assert!(pack_elementwise(&Array4::zeros((5, 1, 1, 1)), 4).is_err());
        assert!(pack_elementwise(&Array4::zeros((4, 1, 1, 1)), 4).is_ok());
        assert!(pack_channelwise(&Array4::zeros((1, 1, 3, 3)), 8).is_err());
    }

    #[test]
    fn channelwise_cifar_image() {
        let params = HeParams::large();
        let batch = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, i, j)| (c + i + j) as f64);
        let p = pack_channelwise(&batch, params.slot_count()).unwrap();
        assert_eq!(p.packs.len(), 3);
        assert!(p.packs.iter().all(|v| v.len() == 1024));
        assert_eq!(p.packs[1][32 + 5], (1 + 1 + 5) as f64);
        assert_eq!(unpack_channelwise(&p).unwrap(), batch);
        assert_eq!(slot_utilization(1024, &params).unwrap(), 0.0625);
    }

    #[test]
    fn utilization_values() {
        let params = HeParams::large();
        assert_eq!(slot_utilization(16384, &params).unwrap(), 1.0);
        assert_eq!(slot_utilization(4096, &params).unwrap(), 0.25);
        assert!(slot_utilization(16385, &params).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn batch() -> impl Strategy<Value = Array4<f64>> {
            (1usize..6, 1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(m, n, h, w)| {
                prop::collection::vec(-100.0..100.0f64, m * n * h * w)
                    .prop_map(move |v| Array4::from_shape_vec((m, n, h, w), v).unwrap())
            })
        }

        proptest! {
            #[test]
            fn roundtrips_are_identity(b in batch()) {
                let (m, n, h, w) = b.dim();
                let e = pack_elementwise(&b, 64).unwrap();
                prop_assert_eq!(e.len(), n * h * w);
                prop_assert_eq!(unpack_elementwise(&e, m).unwrap(), b.clone());
                let c = pack_channelwise(&b, 64).unwrap();
                prop_assert_eq!(c.packs.len(), m * n);
                prop_assert_eq!(unpack_channelwise(&c).unwrap(), b);
            }

            #[test]
            fn utilization_is_monotone(a in 0usize..=2048, b in 0usize..=2048) {
                let p = HeParams::desk();
                let (ua, ub) = (slot_utilization(a, &p).unwrap(), slot_utilization(b, &p).unwrap());
                prop_assert_eq!(a <= b, ua <= ub);
                prop_assert_eq!(ua == 1.0, a == 2048);
            }
        }
    }
}
