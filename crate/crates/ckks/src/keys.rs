//! Key material: ternary secret, public encryption key, and RNS-digit
//! key-switching keys for relinearization and Galois rotations.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::context::CkksContext;
use crate::error::{HeError, Result};
use crate::poly::RnsPoly;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretKey {
    pub(crate) fingerprint: u64,
    pub(crate) coeffs: Vec<i64>,
    /// NTT form over the full key basis.
    pub(crate) ntt: RnsPoly,
}

impl SecretKey {
    pub fn from_coeffs(ctx: &CkksContext, coeffs: Vec<i64>) -> Result<Self> {
        if coeffs.len() != ctx.degree() || coeffs.iter().any(|c| c.abs() > 1) {
            return Err(HeError::Format("secret key must be ternary of length N".into()));
        }
        let ntt = ctx.small_to_ntt(&coeffs, &ctx.full_basis());
        Ok(Self {
            fingerprint: ctx.params().fingerprint(),
            coeffs,
            ntt,
        })
    }

    pub fn coeffs(&self) -> &[i64] {
        &self.coeffs
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// `(b, a)` with `b = -a*s + e` over the ciphertext chain, NTT form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    pub(crate) b: RnsPoly,
    pub(crate) a: RnsPoly,
}

/// One `(b_i, a_i)` pair per chain prime, each over the full key basis, with
/// `b_i + a_i*s = e_i + P*[i-th CRT unit]*s'`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchingKey {
    pub(crate) digits: Vec<(RnsPoly, RnsPoly)>,
}

/// Everything an evaluator needs; safe to hand to an untrusted server.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKeys {
    pub(crate) fingerprint: u64,
    pub(crate) encryption: PublicKey,
    pub(crate) relin: SwitchingKey,
    /// Keyed by left-rotation step in `1..slots`.
    pub(crate) rotation: BTreeMap<usize, SwitchingKey>,
}

impl PublicKeys {
    pub fn rotation_steps(&self) -> Vec<usize> {
        self.rotation.keys().copied().collect()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySet {
    pub secret: SecretKey,
    pub public: PublicKeys,
}

fn switching_key<R: RngCore + ?Sized>(ctx: &CkksContext, sk: &SecretKey, target: &[i64], rng: &mut R) -> SwitchingKey {
    let basis = ctx.full_basis();
    let target_ntt = ctx.small_to_ntt(target, &basis);
    let digits = (0..=ctx.max_level())
        .map(|i| {
            let a = ctx.uniform(&basis, rng);
            let e = ctx.small_to_ntt(&ctx.sample_gaussian(rng), &basis);
            let mut b = ctx.mul(&a, &sk.ntt, &basis);
            ctx.neg_assign(&mut b, &basis);
            ctx.add_assign(&mut b, &e, &basis);
            let q = ctx.modulus(i);
            let p_mod = ctx.special_mod(i);
            let p_shoup = q.shoup(p_mod);
            for (x, &t) in b.row_mut(i).iter_mut().zip(target_ntt.row(i)) {
                *x = q.add(*x, q.mul_shoup(t, p_mod, p_shoup));
            }
            (b, a)
        })
        .collect();
    SwitchingKey { digits }
}

fn normalize_step(step: i64, slots: usize) -> usize {
    step.rem_euclid(slots as i64) as usize
}

/// Generates a key set able to rotate by every step in `rotation_steps`
/// (taken modulo the slot count; zero needs no key).
pub fn keygen<R: RngCore + ?Sized>(ctx: &CkksContext, rotation_steps: &[i64], rng: &mut R) -> KeySet {
    let s = ctx.sample_ternary(rng);
    let secret = SecretKey::from_coeffs(ctx, s).expect("ternary sample");

    let chain = ctx.level_basis(ctx.max_level());
    let a = ctx.uniform(&chain, rng);
    let e = ctx.small_to_ntt(&ctx.sample_gaussian(rng), &chain);
    let mut b = ctx.mul(&a, &secret.ntt, &chain);
    ctx.neg_assign(&mut b, &chain);
    ctx.add_assign(&mut b, &e, &chain);

    let s_squared = {
        let basis = ctx.full_basis();
        let mut sq = ctx.mul(&secret.ntt, &secret.ntt, &basis);
        // back to small signed coefficients via the base prime
        ctx.inverse(&mut sq, &basis);
        let q0 = ctx.modulus(0);
        sq.row(0).iter().map(|&c| q0.center(c)).collect::<Vec<i64>>()
    };
    let relin = switching_key(ctx, &secret, &s_squared, rng);

    let mut rotation = BTreeMap::new();
    let slots = ctx.slot_count();
    for &step in rotation_steps {
        let k = normalize_step(step, slots);
        if k == 0 || rotation.contains_key(&k) {
            continue;
        }
        let g = ctx.encoder().galois_element(k);
        let two_n = 2 * ctx.degree();
        let mut rotated = vec![0i64; ctx.degree()];
        for (i, &c) in secret.coeffs.iter().enumerate() {
            let e = i * g % two_n;
            if e < ctx.degree() {
                rotated[e] = c;
            } else {
                rotated[e - ctx.degree()] = -c;
            }
        }
        rotation.insert(k, switching_key(ctx, &secret, &rotated, rng));
    }

    KeySet {
        public: PublicKeys {
            fingerprint: secret.fingerprint,
            encryption: PublicKey { b, a },
            relin,
            rotation,
        },
        secret,
    }
}
