//! Versioned binary container used for every persisted artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   4  magic "BEAA"
//! 4   2  format version (currently 1)
//! 6   1  kind tag (see `Kind`)
//! 7   1  reserved, zero
//! 8   4  metadata length L
//! 12  L  metadata, UTF-8 JSON object
//! ..  4  blob count B
//! then B times: 8-byte blob length, blob bytes
//! ```
//!
//! Metadata carries everything needed to interpret the blobs (shapes, levels,
//! scales, parameter fingerprints); blobs are raw little-endian arrays.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::backend::{HasMeta, Meta};
use crate::context::CkksContext;
use crate::error::{HeError, Result};
use crate::keys::{PublicKey, PublicKeys, SecretKey, SwitchingKey};
use crate::params::HeParams;
use crate::poly::RnsPoly;
use crate::scheme::Ciphertext;

pub const MAGIC: &[u8; 4] = b"BEAA";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Params = 1,
    SecretKey = 2,
    PublicKeys = 3,
    Ciphertext = 4,
    PackedTensor = 5,
    Model = 6,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Kind::Params,
            2 => Kind::SecretKey,
            3 => Kind::PublicKeys,
            4 => Kind::Ciphertext,
            5 => Kind::PackedTensor,
            6 => Kind::Model,
            other => return Err(HeError::Format(format!("unknown kind tag {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub meta: Value,
    pub blobs: Vec<Vec<u8>>,
}

fn fmt_err(msg: impl Into<String>) -> HeError {
    HeError::Format(msg.into())
}

impl Container {
    pub fn new(kind: Kind, meta: Value) -> Self {
        Self {
            kind,
            meta,
            blobs: Vec::new(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| fmt_err(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.kind as u8, 0])?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for b in &self.blobs {
            w.write_all(&(b.len() as u64).to_le_bytes())?;
            w.write_all(b)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let kind = Kind::from_u8(head[6])?;
        let meta_len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: Value = serde_json::from_slice(&meta).map_err(|e| fmt_err(e.to_string()))?;
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        let mut blobs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut len = [0u8; 8];
            r.read_exact(&mut len)?;
            let len = u64::from_le_bytes(len) as usize;
            let mut b = Vec::new();
            r.by_ref().take(len as u64).read_to_end(&mut b)?;
            if b.len() != len {
                return Err(fmt_err("truncated blob"));
            }
            blobs.push(b);
        }
        Ok(Self { kind, meta, blobs })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn expect_kind(self, kind: Kind) -> Result<Self> {
        if self.kind != kind {
            return Err(fmt_err(format!("expected {kind:?}, found {:?}", self.kind)));
        }
        Ok(self)
    }

    pub fn meta_field<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| fmt_err(format!("missing metadata field `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| fmt_err(format!("field `{key}`: {e}")))
    }
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

pub fn u64s_to_bytes(words: &[u64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn bytes_to_u64s(bytes: &[u8]) -> Result<Vec<u64>> {
    if bytes.len() % 8 != 0 {
        return Err(fmt_err("u64 blob length not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(fmt_err("f32 blob length not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn poly_from_blob(bytes: &[u8], n: usize, rows: usize) -> Result<RnsPoly> {
    let words = bytes_to_u64s(bytes)?;
    if words.len() != n * rows {
        return Err(fmt_err(format!("expected {rows} rows of {n} residues")));
    }
    Ok(RnsPoly::from_rows(n, words))
}

fn check_residues(ctx: &CkksContext, poly: &RnsPoly, basis: &[usize]) -> Result<()> {
    for (row, &m) in poly.rows().zip(basis) {
        let q = ctx.modulus(m).value();
        if row.iter().any(|&x| x >= q) {
            return Err(fmt_err("residue out of range"));
        }
    }
    Ok(())
}

pub fn params_to_container(params: &HeParams) -> Container {
    Container::new(Kind::Params, json!({ "params": to_value(params) }))
}

pub fn params_from_container(c: Container) -> Result<HeParams> {
    let c = c.expect_kind(Kind::Params)?;
    let p: HeParams = c.meta_field("params")?;
    p.validate()?;
    Ok(p)
}

pub fn secret_key_to_container(ctx: &CkksContext, sk: &SecretKey) -> Container {
    let mut c = Container::new(
        Kind::SecretKey,
        json!({ "fingerprint": sk.fingerprint, "degree": ctx.degree() }),
    );
    c.blobs.push(sk.coeffs.iter().map(|&x| x as i8 as u8).collect());
    c
}

pub fn secret_key_from_container(ctx: &CkksContext, c: Container) -> Result<SecretKey> {
    let c = c.expect_kind(Kind::SecretKey)?;
    let fp: u64 = c.meta_field("fingerprint")?;
    if fp != ctx.params().fingerprint() {
        return Err(HeError::ParamMismatch);
    }
    let blob = c.blobs.first().ok_or_else(|| fmt_err("missing key blob"))?;
    let coeffs = blob.iter().map(|&b| b as i8 as i64).collect();
    SecretKey::from_coeffs(ctx, coeffs)
}

pub fn public_keys_to_container(ctx: &CkksContext, keys: &PublicKeys) -> Container {
    let steps: Vec<usize> = keys.rotation.keys().copied().collect();
    let mut c = Container::new(
        Kind::PublicKeys,
        json!({
            "fingerprint": keys.fingerprint,
            "degree": ctx.degree(),
            "digits": keys.relin.digits.len(),
            "rotation_steps": steps,
        }),
    );
    c.blobs.push(u64s_to_bytes(keys.encryption.b.raw()));
    c.blobs.push(u64s_to_bytes(keys.encryption.a.raw()));
    for key in std::iter::once(&keys.relin).chain(keys.rotation.values()) {
        for (b, a) in &key.digits {
            c.blobs.push(u64s_to_bytes(b.raw()));
            c.blobs.push(u64s_to_bytes(a.raw()));
        }
    }
    c
}

pub fn public_keys_from_container(ctx: &CkksContext, c: Container) -> Result<PublicKeys> {
    let c = c.expect_kind(Kind::PublicKeys)?;
    let fp: u64 = c.meta_field("fingerprint")?;
    if fp != ctx.params().fingerprint() {
        return Err(HeError::ParamMismatch);
    }
    let digits: usize = c.meta_field("digits")?;
    let steps: Vec<usize> = c.meta_field("rotation_steps")?;
    let n = ctx.degree();
    let chain_rows = ctx.max_level() + 1;
    let key_rows = chain_rows + 1;
    if digits != chain_rows || c.blobs.len() != 2 + 2 * digits * (1 + steps.len()) {
        return Err(fmt_err("public key blob count does not match metadata"));
    }
    let chain = ctx.level_basis(ctx.max_level());
    let full = ctx.full_basis();
    let mut blobs = c.blobs.iter();
    let mut next = |rows: usize, basis: &[usize]| -> Result<RnsPoly> {
        let p = poly_from_blob(blobs.next().unwrap(), n, rows)?;
        check_residues(ctx, &p, basis)?;
        Ok(p)
    };
    let b = next(chain_rows, &chain)?;
    let a = next(chain_rows, &chain)?;
    let mut read_key = || -> Result<SwitchingKey> {
        let digits = (0..digits)
            .map(|_| Ok((next(key_rows, &full)?, next(key_rows, &full)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SwitchingKey { digits })
    };
    let relin = read_key()?;
    let mut rotation = BTreeMap::new();
    for s in steps {
        rotation.insert(s, read_key()?);
    }
    Ok(PublicKeys {
        fingerprint: fp,
        encryption: PublicKey { b, a },
        relin,
        rotation,
    })
}

pub fn ciphertext_meta(ct: &Ciphertext, ctx: &CkksContext) -> Value {
    let m = ct.meta();
    json!({
        "fingerprint": ctx.params().fingerprint(),
        "degree": ctx.degree(),
        "level": m.level,
        "scale": m.scale,
        "slots": m.slots,
    })
}

/// Appends a ciphertext's two components as blobs.
pub fn push_ciphertext_blobs(c: &mut Container, ct: &Ciphertext) {
    let (c0, c1) = ct.components();
    c.blobs.push(u64s_to_bytes(c0.raw()));
    c.blobs.push(u64s_to_bytes(c1.raw()));
}

/// Rebuilds a ciphertext from its metadata object and two blobs.
pub fn ciphertext_from_parts(ctx: &CkksContext, meta: &Value, c0: &[u8], c1: &[u8]) -> Result<Ciphertext> {
    let get = |k: &str| meta.get(k).ok_or_else(|| fmt_err(format!("missing `{k}`")));
    let fp = get("fingerprint")?.as_u64().ok_or_else(|| fmt_err("fingerprint"))?;
    if fp != ctx.params().fingerprint() {
        return Err(HeError::ParamMismatch);
    }
    let level = get("level")?.as_u64().ok_or_else(|| fmt_err("level"))? as usize;
    let scale = get("scale")?.as_f64().ok_or_else(|| fmt_err("scale"))?;
    let slots = get("slots")?.as_u64().ok_or_else(|| fmt_err("slots"))? as usize;
    if level > ctx.max_level() || slots != ctx.slot_count() || !(scale > 0.0) {
        return Err(fmt_err("ciphertext metadata out of range"));
    }
    let basis = ctx.level_basis(level);
    let c0 = poly_from_blob(c0, ctx.degree(), level + 1)?;
    let c1 = poly_from_blob(c1, ctx.degree(), level + 1)?;
    check_residues(ctx, &c0, &basis)?;
    check_residues(ctx, &c1, &basis)?;
    Ok(Ciphertext::from_parts(c0, c1, Meta { level, scale, slots }))
}

pub fn ciphertext_to_container(ctx: &CkksContext, ct: &Ciphertext) -> Container {
    let mut c = Container::new(Kind::Ciphertext, ciphertext_meta(ct, ctx));
    push_ciphertext_blobs(&mut c, ct);
    c
}

pub fn ciphertext_from_container(ctx: &CkksContext, c: Container) -> Result<Ciphertext> {
    let c = c.expect_kind(Kind::Ciphertext)?;
    if c.blobs.len() != 2 {
        return Err(fmt_err("ciphertext needs two component blobs"));
    }
    ciphertext_from_parts(ctx, &c.meta, &c.blobs[0], &c.blobs[1])
}
