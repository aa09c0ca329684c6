//! Scheme parameters and named presets.

use serde::{Deserialize, Serialize};

use crate::arith::{is_prime, ntt_primes};
use crate::error::{HeError, Result};

/// Decryption tolerances at the desk preset, max-abs over decoded slots.
pub mod tolerance {
    /// `decode(encode(v))` against `v`.
    pub const ENCODE: f64 = 1e-6;
    /// A fresh encrypt/decrypt roundtrip.
    pub const FRESH_NOISE: f64 = 1e-4;
    /// Budget added per multiplicative level consumed.
    pub const PER_LEVEL: f64 = 1e-3;
}

/// Leveled CKKS parameters.
///
/// `modulus_chain[0]` is the base prime kept at level 0; every further prime
/// is one rescaling level. The special prime only appears in key-switching
/// keys and is never part of a ciphertext modulus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeParams {
    pub ring_degree: usize,
    pub modulus_chain: Vec<u64>,
    pub special_prime: u64,
    pub default_scale: f64,
    /// Target security in bits. Recorded only, never enforced; 0 means none claimed.
    pub security_lambda: u32,
    pub gaussian_stddev: f64,
}

impl HeParams {
    /// Generates NTT-friendly primes: one `base_bits` prime followed by
    /// `levels` primes of `level_bits`, plus a `special_bits` key-switching prime.
    pub fn generate(
        ring_degree: usize,
        base_bits: u32,
        levels: usize,
        level_bits: u32,
        special_bits: u32,
        scale_bits: u32,
    ) -> Result<Self> {
        if !ring_degree.is_power_of_two() || ring_degree < 8 {
            return Err(HeError::InvalidParams(format!(
                "ring degree {ring_degree} must be a power of two >= 8"
            )));
        }
        let mut chain = ntt_primes(base_bits, ring_degree, 1, &[]);
        chain.extend(ntt_primes(level_bits, ring_degree, levels, &chain));
        let special = ntt_primes(special_bits, ring_degree, 1, &chain)[0];
        let params = Self {
            ring_degree,
            modulus_chain: chain,
            special_prime: special,
            default_scale: 2f64.powi(scale_bits as i32),
            security_lambda: 0,
            gaussian_stddev: 3.2,
        };
        params.validate()?;
        Ok(params)
    }

    /// Test and benchmark preset: N = 4096 (2048 slots), a 60-bit base prime,
    /// ten 40-bit levels and scale 2^40. Not a secure parameter set.
    pub fn desk() -> Self {
        Self::generate(4096, 60, 10, 40, 61, 40).expect("desk preset is valid")
    }

    /// N = 32768 with a 720-bit ciphertext modulus (60 + 22 x 30 bits) and
    /// scale 2^30, targeting 128-bit security.
    pub fn large() -> Self {
        let mut p = Self::generate(32768, 60, 22, 30, 61, 30).expect("large preset is valid");
        p.security_lambda = 128;
        p
    }

    /// Small ring for fast unit tests.
    pub fn toy(ring_degree: usize, levels: usize) -> Result<Self> {
        Self::generate(ring_degree, 60, levels, 40, 61, 40)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            other => Err(HeError::InvalidParams(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ring_degree;
        let bad = |m: String| Err(HeError::InvalidParams(m));
        if !n.is_power_of_two() || n < 8 {
            return bad(format!("ring degree {n} must be a power of two >= 8"));
        }
        if self.modulus_chain.is_empty() {
            return bad("modulus chain is empty".into());
        }
        let mut all = self.modulus_chain.clone();
        all.push(self.special_prime);
        for &q in &all {
            if q >= 1 << 62 || !is_prime(q) || q % (2 * n as u64) != 1 {
                return bad(format!("{q} is not an NTT-friendly prime below 2^62 for N={n}"));
            }
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return bad("moduli must be distinct".into());
        }
        if self.modulus_chain.iter().any(|&q| q > self.special_prime) {
            return bad("special prime must be the largest modulus".into());
        }
        let s = self.default_scale;
        if !(s > 1.0) || s.log2().fract() != 0.0 {
            return bad(format!("default scale {s} must be a power of two"));
        }
        let smallest = *self.modulus_chain.iter().min().unwrap() as f64;
        if s >= smallest {
            return bad(format!("default scale {s} must be below the smallest prime {smallest}"));
        }
        if !(self.gaussian_stddev > 0.0) {
            return bad("gaussian stddev must be positive".into());
        }
        Ok(())
    }

    pub fn slot_count(&self) -> usize {
        self.ring_degree / 2
    }

    pub fn max_level(&self) -> usize {
        self.modulus_chain.len() - 1
    }

    /// Sum of log2 of the primes active at `level`.
    pub fn log_modulus(&self, level: usize) -> f64 {
        self.modulus_chain[..=level].iter().map(|&q| (q as f64).log2()).sum()
    }

    /// Stable identifier used to detect objects from foreign parameter sets.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.ring_degree as u64);
        for &q in &self.modulus_chain {
            eat(q);
        }
        eat(self.special_prime);
        h
    }
}
