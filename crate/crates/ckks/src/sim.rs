//! Exact simulation backend: plain `f64` slot vectors carrying the same
//! level/scale metadata as real ciphertexts, with no encryption or noise.

use std::collections::BTreeSet;

use rand::RngCore;

use crate::backend::{rules, HasMeta, HeBackend, Meta};
use crate::error::{HeError, Result};
use crate::params::HeParams;

#[derive(Clone, Debug, PartialEq)]
pub struct SimPlaintext {
    pub values: Vec<f64>,
    meta: Meta,
}

impl HasMeta for SimPlaintext {
    fn meta(&self) -> Meta {
        self.meta
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimCiphertext {
    pub values: Vec<f64>,
    meta: Meta,
}

impl HasMeta for SimCiphertext {
    fn meta(&self) -> Meta {
        self.meta
    }
}

#[derive(Clone, Debug)]
pub struct SimBackend {
    params: HeParams,
    rotation_steps: BTreeSet<usize>,
}

impl SimBackend {
    /// Rotations are only allowed for the listed steps, mirroring the key
    /// set a real backend would have been generated with.
    pub fn new(params: HeParams, rotation_steps: &[i64]) -> Result<Self> {
        params.validate()?;
        let slots = params.slot_count() as i64;
        let rotation_steps = rotation_steps
            .iter()
            .map(|&k| k.rem_euclid(slots) as usize)
            .filter(|&k| k != 0)
            .collect();
        Ok(Self { params, rotation_steps })
    }

    fn padded(&self, values: &[f64]) -> Vec<f64> {
        let mut v = values.to_vec();
        v.resize(self.params.slot_count(), 0.0);
        v
    }
}

impl HeBackend for SimBackend {
    type Plaintext = SimPlaintext;
    type Ciphertext = SimCiphertext;

    fn params(&self) -> &HeParams {
        &self.params
    }

    fn encode_at(&self, values: &[f64], scale: f64, level: usize) -> Result<SimPlaintext> {
        let meta = rules::encode(&self.params, values.len(), scale, level)?;
        Ok(SimPlaintext {
            values: self.padded(values),
            meta,
        })
    }

    fn encode_constant(&self, value: f64, scale: f64, level: usize) -> Result<SimPlaintext> {
        let meta = rules::encode(&self.params, 1, scale, level)?;
        Ok(SimPlaintext {
            values: vec![value; self.params.slot_count()],
            meta,
        })
    }

    fn decode(&self, pt: &SimPlaintext) -> Vec<f64> {
        pt.values.clone()
    }

    fn encrypt<R: RngCore + ?Sized>(&self, pt: &SimPlaintext, _rng: &mut R) -> Result<SimCiphertext> {
        Ok(SimCiphertext {
            values: pt.values.clone(),
            meta: pt.meta,
        })
    }

    fn decrypt(&self, ct: &SimCiphertext) -> Result<SimPlaintext> {
        Ok(SimPlaintext {
            values: ct.values.clone(),
            meta: ct.meta,
        })
    }

    fn add(&self, a: &SimCiphertext, b: &SimCiphertext) -> Result<SimCiphertext> {
        let meta = rules::add(&a.meta, &b.meta)?;
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
        Ok(SimCiphertext { values, meta })
    }

    fn add_plain(&self, a: &SimCiphertext, p: &SimPlaintext) -> Result<SimCiphertext> {
        let meta = rules::add_plain(&a.meta, &p.meta)?;
        let values = a.values.iter().zip(&p.values).map(|(x, y)| x + y).collect();
        Ok(SimCiphertext { values, meta })
    }

    fn cmult(&self, a: &SimCiphertext, p: &SimPlaintext) -> Result<SimCiphertext> {
        let meta = rules::cmult(&self.params, &a.meta, &p.meta)?;
        let values = a.values.iter().zip(&p.values).map(|(x, y)| x * y).collect();
        Ok(SimCiphertext { values, meta })
    }

    fn mult(&self, a: &SimCiphertext, b: &SimCiphertext) -> Result<SimCiphertext> {
        let meta = rules::mult(&self.params, &a.meta, &b.meta)?;
        let values = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
        Ok(SimCiphertext { values, meta })
    }

    fn rescale(&self, a: &SimCiphertext) -> Result<SimCiphertext> {
        let meta = rules::rescale(&self.params, &a.meta)?;
        Ok(SimCiphertext {
            values: a.values.clone(),
            meta,
        })
    }

    fn rotate(&self, a: &SimCiphertext, k: i64) -> Result<SimCiphertext> {
        let slots = self.params.slot_count();
        let step = k.rem_euclid(slots as i64) as usize;
        if step == 0 {
            return Ok(a.clone());
        }
        if !self.rotation_steps.contains(&step) {
            return Err(HeError::MissingRotationKey(step));
        }
        let mut values = a.values.clone();
        values.rotate_left(step);
        Ok(SimCiphertext { values, meta: a.meta })
    }

    fn mod_down_to(&self, a: &SimCiphertext, level: usize) -> Result<SimCiphertext> {
        let meta = rules::mod_down(&a.meta, level)?;
        Ok(SimCiphertext {
            values: a.values.clone(),
            meta,
        })
    }
}
