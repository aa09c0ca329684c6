//! Precomputed tables and ring-level routines shared by keys and ciphertexts.
//!
//! Moduli are indexed `0..=L` for the ciphertext chain and `L + 1` for the
//! special prime. A ciphertext at level `l` lives over `0..=l`; key-switching
//! material lives over the whole chain plus the special prime.

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::arith::Modulus;
use crate::encoding::Encoder;
use crate::error::{HeError, Result};
use crate::ntt::NttTable;
use crate::params::HeParams;
use crate::poly::RnsPoly;

#[derive(Debug)]
pub struct CkksContext {
    params: HeParams,
    tables: Vec<NttTable>,
    encoder: Encoder,
    /// `rescale_inv[l][j] = q_l^{-1} mod q_j` for `j < l`.
    rescale_inv: Vec<Vec<u64>>,
    /// `P^{-1} mod q_j`.
    special_inv: Vec<u64>,
    /// `P mod q_j`.
    special_mod: Vec<u64>,
}

impl CkksContext {
    pub fn new(params: HeParams) -> Result<Self> {
        params.validate()?;
        let n = params.ring_degree;
        let mut tables = Vec::with_capacity(params.modulus_chain.len() + 1);
        for &q in params.modulus_chain.iter().chain([&params.special_prime]) {
            tables.push(NttTable::new(Modulus::new(q), n)?);
        }
        let chain_len = params.modulus_chain.len();
        let rescale_inv = (0..chain_len)
            .map(|l| {
                (0..l)
                    .map(|j| {
                        let qj = tables[j].modulus();
                        qj.inv(qj.reduce(params.modulus_chain[l])).expect("distinct primes")
                    })
                    .collect()
            })
            .collect();
        let special_mod: Vec<u64> = (0..chain_len)
            .map(|j| tables[j].modulus().reduce(params.special_prime))
            .collect();
        let special_inv = (0..chain_len)
            .map(|j| tables[j].modulus().inv(special_mod[j]).expect("distinct primes"))
            .collect();
        Ok(Self {
            encoder: Encoder::new(n),
            params,
            tables,
            rescale_inv,
            special_inv,
            special_mod,
        })
    }

    pub fn params(&self) -> &HeParams {
        &self.params
    }

    pub fn degree(&self) -> usize {
        self.params.ring_degree
    }

    pub fn slot_count(&self) -> usize {
        self.params.slot_count()
    }

    pub fn max_level(&self) -> usize {
        self.params.max_level()
    }

    pub fn special_index(&self) -> usize {
        self.params.modulus_chain.len()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn modulus(&self, idx: usize) -> &Modulus {
        self.tables[idx].modulus()
    }

    pub fn table(&self, idx: usize) -> &NttTable {
        &self.tables[idx]
    }

    /// Indices `0..=level`.
    pub fn level_basis(&self, level: usize) -> Vec<usize> {
        (0..=level).collect()
    }

    /// Indices `0..=level` followed by the special prime.
    pub fn key_basis(&self, level: usize) -> Vec<usize> {
        (0..=level).chain([self.special_index()]).collect()
    }

    /// Full key basis: the whole chain plus the special prime.
    pub fn full_basis(&self) -> Vec<usize> {
        self.key_basis(self.max_level())
    }

    pub fn forward(&self, poly: &mut RnsPoly, basis: &[usize]) {
        for (row, &m) in poly.rows_mut().zip(basis) {
            self.tables[m].forward(row);
        }
    }

    pub fn inverse(&self, poly: &mut RnsPoly, basis: &[usize]) {
        for (row, &m) in poly.rows_mut().zip(basis) {
            self.tables[m].inverse(row);
        }
    }

    /// Small signed coefficients lifted to every modulus of `basis`, NTT form.
    pub fn small_to_ntt(&self, coeffs: &[i64], basis: &[usize]) -> RnsPoly {
        let n = self.degree();
        let mut out = RnsPoly::zero(n, basis.len());
        for (row, &m) in out.rows_mut().zip(basis) {
            let q = self.modulus(m);
            for (r, &c) in row.iter_mut().zip(coeffs) {
                *r = q.from_i64(c);
            }
            self.tables[m].forward(row);
        }
        out
    }

    pub fn uniform<R: RngCore + ?Sized>(&self, basis: &[usize], rng: &mut R) -> RnsPoly {
        let n = self.degree();
        let mut out = RnsPoly::zero(n, basis.len());
        for (row, &m) in out.rows_mut().zip(basis) {
            let q = self.modulus(m).value();
            for r in row.iter_mut() {
                *r = rng.gen_range(0..q);
            }
        }
        out
    }

    pub fn sample_ternary<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        (0..self.degree()).map(|_| rng.gen_range(-1i64..=1)).collect()
    }

    pub fn sample_gaussian<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        let sigma = self.params.gaussian_stddev;
        let normal = Normal::new(0.0, sigma).expect("positive stddev");
        let bound = (6.0 * sigma).ceil();
        (0..self.degree())
            .map(|_| normal.sample(rng).round().clamp(-bound, bound) as i64)
            .collect()
    }

    pub fn add_assign(&self, a: &mut RnsPoly, b: &RnsPoly, basis: &[usize]) {
        for ((ra, rb), &m) in a.rows_mut().zip(b.rows()).zip(basis) {
            let q = self.modulus(m);
            for (x, &y) in ra.iter_mut().zip(rb) {
                *x = q.add(*x, y);
            }
        }
    }

    pub fn sub_assign(&self, a: &mut RnsPoly, b: &RnsPoly, basis: &[usize]) {
        for ((ra, rb), &m) in a.rows_mut().zip(b.rows()).zip(basis) {
            let q = self.modulus(m);
            for (x, &y) in ra.iter_mut().zip(rb) {
                *x = q.sub(*x, y);
            }
        }
    }

    pub fn neg_assign(&self, a: &mut RnsPoly, basis: &[usize]) {
        for (ra, &m) in a.rows_mut().zip(basis) {
            let q = self.modulus(m);
            for x in ra.iter_mut() {
                *x = q.neg(*x);
            }
        }
    }

    /// Pointwise product over the first `basis.len()` rows of both inputs.
    pub fn mul(&self, a: &RnsPoly, b: &RnsPoly, basis: &[usize]) -> RnsPoly {
        let mut out = RnsPoly::zero(self.degree(), basis.len());
        for (((ro, ra), rb), &m) in out.rows_mut().zip(a.rows()).zip(b.rows()).zip(basis) {
            let q = self.modulus(m);
            for ((o, &x), &y) in ro.iter_mut().zip(ra).zip(rb) {
                *o = q.mul(x, y);
            }
        }
        out
    }

    pub fn mul_assign(&self, a: &mut RnsPoly, b: &RnsPoly, basis: &[usize]) {
        for ((ra, rb), &m) in a.rows_mut().zip(b.rows()).zip(basis) {
            let q = self.modulus(m);
            for (x, &y) in ra.iter_mut().zip(rb) {
                *x = q.mul(*x, y);
            }
        }
    }

    /// `acc += a * b` pointwise.
    pub fn mul_add_assign(&self, acc: &mut RnsPoly, a: &RnsPoly, b: &RnsPoly, basis: &[usize]) {
        for (((racc, ra), rb), &m) in acc.rows_mut().zip(a.rows()).zip(b.rows()).zip(basis) {
            let q = self.modulus(m);
            for ((o, &x), &y) in racc.iter_mut().zip(ra).zip(rb) {
                *o = q.add(*o, q.mul(x, y));
            }
        }
    }

    /// Integer coefficients (rounded `coeff * scale`) of the encoding of
    /// `values`, checked against the modulus at `level`.
    fn scaled_coefficients(&self, values: &[f64], scale: f64, level: usize) -> Result<Vec<i128>> {
        let limit = 2f64.powf(self.params.log_modulus(level) - 1.0).min(2f64.powi(126));
        self.encoder
            .embed_inverse(values)
            .into_iter()
            .map(|c| {
                let v = (c * scale).round();
                if !v.is_finite() || v.abs() >= limit {
                    Err(HeError::ScaleOverflow {
                        log_scale: scale.log2(),
                        level,
                    })
                } else {
                    Ok(v as i128)
                }
            })
            .collect()
    }

    /// Encodes `values` at `scale` into NTT form over `0..=level`.
    pub fn encode_poly(&self, values: &[f64], scale: f64, level: usize) -> Result<RnsPoly> {
        let slots = self.slot_count();
        if values.len() > slots {
            return Err(HeError::CapacityExceeded {
                len: values.len(),
                capacity: slots,
            });
        }
        if level > self.max_level() {
            return Err(HeError::LevelRaise {
                from: self.max_level(),
                to: level,
            });
        }
        let coeffs = self.scaled_coefficients(values, scale, level)?;
        let basis = self.level_basis(level);
        let mut out = RnsPoly::zero(self.degree(), basis.len());
        for (row, &m) in out.rows_mut().zip(&basis) {
            let q = self.modulus(m);
            for (r, &c) in row.iter_mut().zip(&coeffs) {
                *r = q.from_i128(c);
            }
            self.tables[m].forward(row);
        }
        Ok(out)
    }

    /// The constant polynomial `round(value * scale)`, whose slots all equal
    /// `value`. Its NTT form is the same constant in every position.
    pub fn encode_constant_poly(&self, value: f64, scale: f64, level: usize) -> Result<RnsPoly> {
        if level > self.max_level() {
            return Err(HeError::LevelRaise {
                from: self.max_level(),
                to: level,
            });
        }
        let limit = 2f64.powf(self.params.log_modulus(level) - 1.0).min(2f64.powi(126));
        let v = (value * scale).round();
        if !v.is_finite() || v.abs() >= limit {
            return Err(HeError::ScaleOverflow {
                log_scale: scale.log2(),
                level,
            });
        }
        let c = v as i128;
        let n = self.degree();
        let mut data = Vec::with_capacity(n * (level + 1));
        for m in 0..=level {
            let r = self.modulus(m).from_i128(c);
            data.extend(std::iter::repeat(r).take(n));
        }
        Ok(RnsPoly::from_rows(n, data))
    }

    /// Decodes an NTT-form polynomial over `0..=level` at `scale`.
    pub fn decode_poly(&self, poly: &RnsPoly, level: usize, scale: f64) -> Vec<f64> {
        let basis = self.level_basis(level);
        let mut coeff = poly.truncated(level + 1);
        self.inverse(&mut coeff, &basis);
        let signed = self.crt_to_f64(&coeff, level);
        let unscaled: Vec<f64> = signed.into_iter().map(|c| c / scale).collect();
        self.encoder.embed(&unscaled)
    }

    /// Centered CRT reconstruction of coefficient-form rows to `f64`.
    fn crt_to_f64(&self, coeff: &RnsPoly, level: usize) -> Vec<f64> {
        let n = self.degree();
        if level == 0 {
            let q = self.modulus(0);
            return coeff.row(0).iter().map(|&c| q.center(c) as f64).collect();
        }
        let primes: Vec<u64> = (0..=level).map(|m| self.modulus(m).value()).collect();
        let big_q: BigUint = primes.iter().map(|&q| BigUint::from(q)).product();
        let half_q = &big_q >> 1u32;
        let hats: Vec<BigUint> = primes.iter().map(|&q| &big_q / q).collect();
        let hat_invs: Vec<u64> = primes
            .iter()
            .zip(&hats)
            .enumerate()
            .map(|(i, (&q, hat))| {
                let r = (hat % q).to_u64().unwrap();
                self.modulus(i).inv(r).unwrap()
            })
            .collect();
        (0..n)
            .map(|k| {
                let mut acc = BigUint::zero();
                for (i, hat) in hats.iter().enumerate() {
                    let q = self.modulus(i);
                    let y = q.mul(coeff.row(i)[k], hat_invs[i]);
                    acc += hat * y;
                }
                acc %= &big_q;
                if acc > half_q {
                    -(&big_q - acc).to_f64().unwrap()
                } else {
                    acc.to_f64().unwrap()
                }
            })
            .collect()
    }

    /// Divides an NTT-form polynomial by the modulus of its last row with
    /// rounding, dropping that row. `basis` lists the modulus of every row.
    fn divide_round_by_last(&self, poly: &RnsPoly, basis: &[usize], inv_last: &[u64]) -> RnsPoly {
        let n = self.degree();
        let k = basis.len() - 1;
        let last_idx = basis[k];
        let last_q = *self.modulus(last_idx);
        let mut last = poly.row(k).to_vec();
        self.tables[last_idx].inverse(&mut last);
        let mut out = RnsPoly::zero(n, k);
        let mut tmp = vec![0u64; n];
        for (j, &m) in basis[..k].iter().enumerate() {
            let q = self.modulus(m);
            let last_mod_q = q.reduce(last_q.value());
            for (t, &x) in tmp.iter_mut().zip(&last) {
                // centered representative of x, reduced mod q
                *t = if x > last_q.value() / 2 {
                    q.sub(q.reduce(x), last_mod_q)
                } else {
                    q.reduce(x)
                };
            }
            self.tables[m].forward(&mut tmp);
            let inv = inv_last[j];
            let inv_shoup = q.shoup(inv);
            for ((o, &a), &t) in out.row_mut(j).iter_mut().zip(poly.row(j)).zip(&tmp) {
                *o = q.mul_shoup(q.sub(a, t), inv, inv_shoup);
            }
        }
        out
    }

    /// Rescale step on one component over `0..=level`.
    pub fn rescale_poly(&self, poly: &RnsPoly, level: usize) -> RnsPoly {
        let basis = self.level_basis(level);
        self.divide_round_by_last(poly, &basis, &self.rescale_inv[level])
    }

    /// Drops the special prime from a polynomial over `key_basis(level)`.
    fn mod_down_special(&self, poly: &RnsPoly, level: usize) -> RnsPoly {
        let basis = self.key_basis(level);
        self.divide_round_by_last(poly, &basis, &self.special_inv[..=level])
    }

    pub fn special_mod(&self, j: usize) -> u64 {
        self.special_mod[j]
    }

    /// Applies `X -> X^g` to a coefficient vector.
    pub fn automorphism_coeffs(&self, coeffs: &[u64], g: usize, q: &Modulus) -> Vec<u64> {
        let n = coeffs.len();
        let two_n = 2 * n;
        let mut out = vec![0u64; n];
        for (i, &c) in coeffs.iter().enumerate() {
            let e = i * g % two_n;
            if e < n {
                out[e] = c;
            } else {
                out[e - n] = q.neg(c);
            }
        }
        out
    }

    /// `X -> X^g` on an NTT-form polynomial.
    pub fn automorphism_ntt(&self, poly: &RnsPoly, basis: &[usize], g: usize) -> RnsPoly {
        let mut out = RnsPoly::zero(self.degree(), basis.len());
        for ((ro, ri), &m) in out.rows_mut().zip(poly.rows()).zip(basis) {
            let mut c = ri.to_vec();
            self.tables[m].inverse(&mut c);
            let mut r = self.automorphism_coeffs(&c, g, self.modulus(m));
            self.tables[m].forward(&mut r);
            ro.copy_from_slice(&r);
        }
        out
    }

    /// Key switching of `d` (NTT form over `0..=level`) with one RNS digit per
    /// chain prime. Returns `(k0, k1)` over `0..=level` with
    /// `k0 + k1 * s ~= d * s'`.
    pub fn key_switch(&self, d: &RnsPoly, level: usize, digits: &[(RnsPoly, RnsPoly)]) -> (RnsPoly, RnsPoly) {
        let n = self.degree();
        let basis = self.key_basis(level);
        let sp = self.special_index();
        let digits_coeff: Vec<Vec<u64>> = (0..=level)
            .map(|i| {
                let mut c = d.row(i).to_vec();
                self.tables[i].inverse(&mut c);
                c
            })
            .collect();
        let mut acc0 = RnsPoly::zero(n, basis.len());
        let mut acc1 = RnsPoly::zero(n, basis.len());
        let mut tmp = vec![0u64; n];
        let mut wide0 = vec![0u128; n];
        let mut wide1 = vec![0u128; n];
        for (pos, &m) in basis.iter().enumerate() {
            let q = self.modulus(m);
            // products are below q^2 < 2^124, so 8 fit in a u128
            let flush = |wide: &mut [u128]| {
                for w in wide.iter_mut() {
                    *w = q.reduce_u128(*w) as u128;
                }
            };
            wide0.fill(0);
            wide1.fill(0);
            // key rows are laid out over the full basis
            let key_row = if m == sp { self.max_level() + 1 } else { m };
            for (i, digit) in digits_coeff.iter().enumerate() {
                if m == i {
                    tmp.copy_from_slice(d.row(i));
                } else {
                    for (t, &x) in tmp.iter_mut().zip(digit) {
                        *t = q.reduce(x);
                    }
                    self.tables[m].forward(&mut tmp);
                }
                let (kb, ka) = &digits[i];
                for ((w, &t), &k) in wide0.iter_mut().zip(&tmp).zip(kb.row(key_row)) {
                    *w += t as u128 * k as u128;
                }
                for ((w, &t), &k) in wide1.iter_mut().zip(&tmp).zip(ka.row(key_row)) {
                    *w += t as u128 * k as u128;
                }
                if i % 8 == 7 {
                    flush(&mut wide0);
                    flush(&mut wide1);
                }
            }
            for (o, &w) in acc0.row_mut(pos).iter_mut().zip(&wide0) {
                *o = q.reduce_u128(w);
            }
            for (o, &w) in acc1.row_mut(pos).iter_mut().zip(&wide1) {
                *o = q.reduce_u128(w);
            }
        }
        (self.mod_down_special(&acc0, level), self.mod_down_special(&acc1, level))
    }
}
