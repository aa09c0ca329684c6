//! The operation contract shared by the lattice backend and the simulator.
//!
//! Level and scale bookkeeping lives here so both implementations follow
//! exactly the same rules; a backend only supplies the slot arithmetic.

use rand::RngCore;

use crate::error::{HeError, Result};
use crate::params::HeParams;

/// Relative tolerance under which two scales count as equal. Scales are
/// tracked in `f64`, so the same nominal scale reached through different
/// products and quotients may differ in the last few ulps.
pub const SCALE_RTOL: f64 = 1e-12;

pub fn scales_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCALE_RTOL * a.abs().max(b.abs())
}

/// Level, scale and slot count of a ciphertext or plaintext.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Meta {
    pub level: usize,
    pub scale: f64,
    pub slots: usize,
}

/// Metadata transfer rules for every operation.
pub mod rules {
    use super::*;

    fn same_slots(a: &Meta, b: &Meta) -> Result<()> {
        if a.slots != b.slots {
            return Err(HeError::SlotMismatch(a.slots, b.slots));
        }
        Ok(())
    }

    fn same_scale(a: &Meta, b: &Meta) -> Result<()> {
        if !scales_match(a.scale, b.scale) {
            return Err(HeError::ScaleMismatch(a.scale, b.scale));
        }
        Ok(())
    }

    fn plain_covers(ct: &Meta, pt: &Meta) -> Result<()> {
        if pt.level < ct.level {
            return Err(HeError::PlaintextLevel {
                plain: pt.level,
                cipher: ct.level,
            });
        }
        Ok(())
    }

    fn fits(params: &HeParams, m: Meta) -> Result<Meta> {
        if m.scale.log2() >= params.log_modulus(m.level) - 1.0 {
            return Err(HeError::ScaleOverflow {
                log_scale: m.scale.log2(),
                level: m.level,
            });
        }
        Ok(m)
    }

    pub fn add(a: &Meta, b: &Meta) -> Result<Meta> {
        same_slots(a, b)?;
        if a.level != b.level {
            return Err(HeError::LevelMismatch(a.level, b.level));
        }
        same_scale(a, b)?;
        Ok(*a)
    }

    pub fn add_plain(ct: &Meta, pt: &Meta) -> Result<Meta> {
        same_slots(ct, pt)?;
        plain_covers(ct, pt)?;
        same_scale(ct, pt)?;
        Ok(*ct)
    }

    pub fn cmult(params: &HeParams, ct: &Meta, pt: &Meta) -> Result<Meta> {
        same_slots(ct, pt)?;
        plain_covers(ct, pt)?;
        fits(
            params,
            Meta {
                scale: ct.scale * pt.scale,
                ..*ct
            },
        )
    }

    pub fn mult(params: &HeParams, a: &Meta, b: &Meta) -> Result<Meta> {
        same_slots(a, b)?;
        if a.level != b.level {
            return Err(HeError::LevelMismatch(a.level, b.level));
        }
        fits(
            params,
            Meta {
                scale: a.scale * b.scale,
                ..*a
            },
        )
    }

    pub fn rescale(params: &HeParams, a: &Meta) -> Result<Meta> {
        if a.level == 0 {
            return Err(HeError::LevelExhausted);
        }
        Ok(Meta {
            level: a.level - 1,
            scale: a.scale / params.modulus_chain[a.level] as f64,
            slots: a.slots,
        })
    }

    pub fn mod_down(a: &Meta, level: usize) -> Result<Meta> {
        if level > a.level {
            return Err(HeError::LevelRaise {
                from: a.level,
                to: level,
            });
        }
        Ok(Meta { level, ..*a })
    }

    pub fn encode(params: &HeParams, len: usize, scale: f64, level: usize) -> Result<Meta> {
        let slots = params.slot_count();
        if len > slots {
            return Err(HeError::CapacityExceeded { len, capacity: slots });
        }
        if level > params.max_level() {
            return Err(HeError::LevelRaise {
                from: params.max_level(),
                to: level,
            });
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(HeError::InvalidParams(format!("scale {scale} must be positive")));
        }
        Ok(Meta { level, scale, slots })
    }
}

pub trait HasMeta {
    fn meta(&self) -> Meta;

    fn level(&self) -> usize {
        self.meta().level
    }

    fn scale(&self) -> f64 {
        self.meta().scale
    }

    fn slot_count(&self) -> usize {
        self.meta().slots
    }
}

/// Leveled CKKS operation set. Implementations carry whatever key material
/// they need; every operation is a pure function of its inputs.
pub trait HeBackend: Send + Sync {
    type Plaintext: Clone + Send + Sync + HasMeta;
    type Ciphertext: Clone + Send + Sync + HasMeta;

    fn params(&self) -> &HeParams;

    fn slot_count(&self) -> usize {
        self.params().slot_count()
    }

    fn max_level(&self) -> usize {
        self.params().max_level()
    }

    /// Encodes at `level`; vectors shorter than the slot count are zero-padded.
    fn encode_at(&self, values: &[f64], scale: f64, level: usize) -> Result<Self::Plaintext>;

    fn encode(&self, values: &[f64], scale: f64) -> Result<Self::Plaintext> {
        self.encode_at(values, scale, self.max_level())
    }

    /// Encodes `value` replicated in every slot.
    fn encode_constant(&self, value: f64, scale: f64, level: usize) -> Result<Self::Plaintext>;

    fn decode(&self, pt: &Self::Plaintext) -> Vec<f64>;

    fn encrypt<R: RngCore + ?Sized>(&self, pt: &Self::Plaintext, rng: &mut R) -> Result<Self::Ciphertext>;

    fn decrypt(&self, ct: &Self::Ciphertext) -> Result<Self::Plaintext>;

    fn add(&self, a: &Self::Ciphertext, b: &Self::Ciphertext) -> Result<Self::Ciphertext>;

    fn add_plain(&self, a: &Self::Ciphertext, p: &Self::Plaintext) -> Result<Self::Ciphertext>;

    /// Slot-wise product with a plaintext; the output scale is the product
    /// of scales and the caller rescales.
    fn cmult(&self, a: &Self::Ciphertext, p: &Self::Plaintext) -> Result<Self::Ciphertext>;

    /// Slot-wise product, relinearized back to two components.
    fn mult(&self, a: &Self::Ciphertext, b: &Self::Ciphertext) -> Result<Self::Ciphertext>;

    fn rescale(&self, a: &Self::Ciphertext) -> Result<Self::Ciphertext>;

    /// Cyclic left shift of the slot vector by `k`.
    fn rotate(&self, a: &Self::Ciphertext, k: i64) -> Result<Self::Ciphertext>;

    /// Drops primes down to `level` without touching the scale.
    fn mod_down_to(&self, a: &Self::Ciphertext, level: usize) -> Result<Self::Ciphertext>;

    fn decrypt_decode(&self, ct: &Self::Ciphertext) -> Result<Vec<f64>> {
        Ok(self.decode(&self.decrypt(ct)?))
    }

    fn encode_encrypt<R: RngCore + ?Sized>(&self, values: &[f64], rng: &mut R) -> Result<Self::Ciphertext> {
        let pt = self.encode(values, self.params().default_scale)?;
        self.encrypt(&pt, rng)
    }

    /// Brings two ciphertexts to a common level and scale: the higher one is
    /// switched down, and if the scales still differ `a` is multiplied by an
    /// encoded one at the correcting scale and rescaled, costing one level.
    fn align(&self, a: &Self::Ciphertext, b: &Self::Ciphertext) -> Result<(Self::Ciphertext, Self::Ciphertext)> {
        let level = a.level().min(b.level());
        let mut a = self.mod_down_to(a, level)?;
        let mut b = self.mod_down_to(b, level)?;
        if !scales_match(a.scale(), b.scale()) {
            if level == 0 {
                return Err(HeError::LevelExhausted);
            }
            let q = self.params().modulus_chain[level] as f64;
            let fix = b.scale() * q / a.scale();
            let one = self.encode_constant(1.0, fix, level)?;
            a = self.rescale(&self.cmult(&a, &one)?)?;
            b = self.mod_down_to(&b, level - 1)?;
            if !scales_match(a.scale(), b.scale()) {
                return Err(HeError::ScaleMismatch(a.scale(), b.scale()));
            }
        }
        Ok((a, b))
    }
}
