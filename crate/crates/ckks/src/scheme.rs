//! The lattice backend: RNS ciphertexts kept in NTT form at all times.

use std::sync::Arc;

use rand::RngCore;

use crate::backend::{rules, HasMeta, HeBackend, Meta};
use crate::context::CkksContext;
use crate::error::{HeError, Result};
use crate::keys::{PublicKey, PublicKeys, SecretKey, SwitchingKey};
use crate::params::HeParams;
use crate::poly::RnsPoly;

#[derive(Clone, Debug, PartialEq)]
pub struct Plaintext {
    pub(crate) poly: RnsPoly,
    pub(crate) meta: Meta,
}

impl HasMeta for Plaintext {
    fn meta(&self) -> Meta {
        self.meta
    }
}

/// `(c0, c1)` with `c0 + c1*s ~= m`, NTT form over the primes `0..=level`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ciphertext {
    pub(crate) c0: RnsPoly,
    pub(crate) c1: RnsPoly,
    pub(crate) meta: Meta,
}

impl HasMeta for Ciphertext {
    fn meta(&self) -> Meta {
        self.meta
    }
}

impl Ciphertext {
    pub fn components(&self) -> (&RnsPoly, &RnsPoly) {
        (&self.c0, &self.c1)
    }

    pub(crate) fn from_parts(c0: RnsPoly, c1: RnsPoly, meta: Meta) -> Self {
        Self { c0, c1, meta }
    }
}

impl CkksContext {
    pub fn encode(&self, values: &[f64], scale: f64, level: usize) -> Result<Plaintext> {
        let meta = rules::encode(self.params(), values.len(), scale, level)?;
        Ok(Plaintext {
            poly: self.encode_poly(values, scale, level)?,
            meta,
        })
    }

    pub fn encode_constant(&self, value: f64, scale: f64, level: usize) -> Result<Plaintext> {
        let meta = rules::encode(self.params(), 1, scale, level)?;
        Ok(Plaintext {
            poly: self.encode_constant_poly(value, scale, level)?,
            meta,
        })
    }

    pub fn decode(&self, pt: &Plaintext) -> Vec<f64> {
        self.decode_poly(&pt.poly, pt.meta.level, pt.meta.scale)
    }

    /// `c = v*pk + (m + e0, e1)` at the plaintext's level.
    pub fn encrypt<R: RngCore + ?Sized>(&self, pt: &Plaintext, pk: &PublicKey, rng: &mut R) -> Result<Ciphertext> {
        let level = pt.meta.level;
        let basis = self.level_basis(level);
        let v = self.small_to_ntt(&self.sample_ternary(rng), &basis);
        let e0 = self.small_to_ntt(&self.sample_gaussian(rng), &basis);
        let e1 = self.small_to_ntt(&self.sample_gaussian(rng), &basis);
        let mut c0 = self.mul(&v, &pk.b, &basis);
        self.add_assign(&mut c0, &pt.poly, &basis);
        self.add_assign(&mut c0, &e0, &basis);
        let mut c1 = self.mul(&v, &pk.a, &basis);
        self.add_assign(&mut c1, &e1, &basis);
        Ok(Ciphertext { c0, c1, meta: pt.meta })
    }

    /// `m = c0 + c1*s`.
    pub fn decrypt(&self, ct: &Ciphertext, sk: &SecretKey) -> Result<Plaintext> {
        if sk.fingerprint != self.params().fingerprint() {
            return Err(HeError::ParamMismatch);
        }
        let basis = self.level_basis(ct.meta.level);
        let mut m = ct.c0.clone();
        self.mul_add_assign(&mut m, &ct.c1, &sk.ntt, &basis);
        Ok(Plaintext { poly: m, meta: ct.meta })
    }

    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        let meta = rules::add(&a.meta, &b.meta)?;
        let basis = self.level_basis(meta.level);
        let mut out = a.clone();
        self.add_assign(&mut out.c0, &b.c0, &basis);
        self.add_assign(&mut out.c1, &b.c1, &basis);
        out.meta = meta;
        Ok(out)
    }

    pub fn add_plain(&self, a: &Ciphertext, p: &Plaintext) -> Result<Ciphertext> {
        let meta = rules::add_plain(&a.meta, &p.meta)?;
        let basis = self.level_basis(meta.level);
        let mut out = a.clone();
        self.add_assign(&mut out.c0, &p.poly, &basis);
        out.meta = meta;
        Ok(out)
    }

    pub fn cmult(&self, a: &Ciphertext, p: &Plaintext) -> Result<Ciphertext> {
        let meta = rules::cmult(self.params(), &a.meta, &p.meta)?;
        let basis = self.level_basis(meta.level);
        Ok(Ciphertext {
            c0: self.mul(&a.c0, &p.poly, &basis),
            c1: self.mul(&a.c1, &p.poly, &basis),
            meta,
        })
    }

    /// Tensor product `(c0c0', c0c1' + c1c0', c1c1')` followed by
    /// relinearization of the last component.
    pub fn mult(&self, a: &Ciphertext, b: &Ciphertext, relin: &SwitchingKey) -> Result<Ciphertext> {
        let meta = rules::mult(self.params(), &a.meta, &b.meta)?;
        let level = meta.level;
        let basis = self.level_basis(level);
        let mut d0 = self.mul(&a.c0, &b.c0, &basis);
        let mut d1 = self.mul(&a.c0, &b.c1, &basis);
        self.mul_add_assign(&mut d1, &a.c1, &b.c0, &basis);
        let d2 = self.mul(&a.c1, &b.c1, &basis);
        let (k0, k1) = self.key_switch(&d2, level, &relin.digits);
        self.add_assign(&mut d0, &k0, &basis);
        self.add_assign(&mut d1, &k1, &basis);
        Ok(Ciphertext { c0: d0, c1: d1, meta })
    }

    pub fn rescale(&self, a: &Ciphertext) -> Result<Ciphertext> {
        let meta = rules::rescale(self.params(), &a.meta)?;
        let level = a.meta.level;
        Ok(Ciphertext {
            c0: self.rescale_poly(&a.c0, level),
            c1: self.rescale_poly(&a.c1, level),
            meta,
        })
    }

    pub fn mod_down_to(&self, a: &Ciphertext, level: usize) -> Result<Ciphertext> {
        let meta = rules::mod_down(&a.meta, level)?;
        Ok(Ciphertext {
            c0: a.c0.truncated(level + 1),
            c1: a.c1.truncated(level + 1),
            meta,
        })
    }

    pub fn rotate(&self, a: &Ciphertext, k: i64, keys: &PublicKeys) -> Result<Ciphertext> {
        let slots = self.slot_count();
        let step = k.rem_euclid(slots as i64) as usize;
        if step == 0 {
            return Ok(a.clone());
        }
        let key = keys.rotation.get(&step).ok_or(HeError::MissingRotationKey(step))?;
        let level = a.meta.level;
        let basis = self.level_basis(level);
        let g = self.encoder().galois_element(step);
        let mut c0 = self.automorphism_ntt(&a.c0, &basis, g);
        let c1 = self.automorphism_ntt(&a.c1, &basis, g);
        let (k0, k1) = self.key_switch(&c1, level, &key.digits);
        self.add_assign(&mut c0, &k0, &basis);
        Ok(Ciphertext {
            c0,
            c1: k1,
            meta: a.meta,
        })
    }
}

/// [`HeBackend`] over the lattice scheme. Holds the public evaluation keys
/// and, on the client side, the secret key.
#[derive(Clone)]
pub struct CkksBackend {
    ctx: Arc<CkksContext>,
    public: Arc<PublicKeys>,
    secret: Option<Arc<SecretKey>>,
}

impl CkksBackend {
    pub fn new(ctx: Arc<CkksContext>, public: Arc<PublicKeys>, secret: Option<Arc<SecretKey>>) -> Result<Self> {
        let fp = ctx.params().fingerprint();
        if public.fingerprint != fp || secret.as_ref().is_some_and(|s| s.fingerprint != fp) {
            return Err(HeError::ParamMismatch);
        }
        Ok(Self { ctx, public, secret })
    }

    /// Fresh context and key set; the backend keeps the secret key.
    pub fn generate<R: RngCore + ?Sized>(params: HeParams, rotation_steps: &[i64], rng: &mut R) -> Result<Self> {
        let ctx = Arc::new(CkksContext::new(params)?);
        let keys = crate::keys::keygen(&ctx, rotation_steps, rng);
        Self::new(ctx, Arc::new(keys.public), Some(Arc::new(keys.secret)))
    }

    pub fn context(&self) -> &Arc<CkksContext> {
        &self.ctx
    }

    pub fn public_keys(&self) -> &PublicKeys {
        &self.public
    }
}

impl HeBackend for CkksBackend {
    type Plaintext = Plaintext;
    type Ciphertext = Ciphertext;

    fn params(&self) -> &HeParams {
        self.ctx.params()
    }

    fn encode_at(&self, values: &[f64], scale: f64, level: usize) -> Result<Plaintext> {
        self.ctx.encode(values, scale, level)
    }

    fn encode_constant(&self, value: f64, scale: f64, level: usize) -> Result<Plaintext> {
        self.ctx.encode_constant(value, scale, level)
    }

    fn decode(&self, pt: &Plaintext) -> Vec<f64> {
        self.ctx.decode(pt)
    }

    fn encrypt<R: RngCore + ?Sized>(&self, pt: &Plaintext, rng: &mut R) -> Result<Ciphertext> {
        self.ctx.encrypt(pt, &self.public.encryption, rng)
    }

    fn decrypt(&self, ct: &Ciphertext) -> Result<Plaintext> {
        let sk = self.secret.as_ref().ok_or(HeError::MissingSecretKey)?;
        self.ctx.decrypt(ct, sk)
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.ctx.add(a, b)
    }

    fn add_plain(&self, a: &Ciphertext, p: &Plaintext) -> Result<Ciphertext> {
        self.ctx.add_plain(a, p)
    }

    fn cmult(&self, a: &Ciphertext, p: &Plaintext) -> Result<Ciphertext> {
        self.ctx.cmult(a, p)
    }

    fn mult(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.ctx.mult(a, b, &self.public.relin)
    }

    fn rescale(&self, a: &Ciphertext) -> Result<Ciphertext> {
        self.ctx.rescale(a)
    }

    fn rotate(&self, a: &Ciphertext, k: i64) -> Result<Ciphertext> {
        self.ctx.rotate(a, k, &self.public)
    }

    fn mod_down_to(&self, a: &Ciphertext, level: usize) -> Result<Ciphertext> {
        self.ctx.mod_down_to(a, level)
    }
}
