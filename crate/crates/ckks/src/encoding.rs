//! Canonical-embedding encoder.
//!
//! Slot `j` of a plaintext polynomial `m` is `m(zeta^(5^j))` with
//! `zeta = exp(i*pi/N)`, so the Galois map `X -> X^(5^k)` rotates slots left
//! by `k`. Real slot vectors are mapped to integer coefficients with a
//! variant of the FFT specialised to that root ordering.

use num_complex::Complex64;
use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct Encoder {
    n: usize,
    /// `5^j mod 2N` for `j < N/2`.
    rot_group: Vec<usize>,
    /// `exp(2*pi*i*k / 2N)` for `k <= 2N`.
    roots: Vec<Complex64>,
}

impl Encoder {
    pub fn new(n: usize) -> Self {
        let m = 2 * n;
        let slots = n / 2;
        let mut rot_group = Vec::with_capacity(slots);
        let mut g = 1usize;
        for _ in 0..slots {
            rot_group.push(g);
            g = g * 5 % m;
        }
        let roots = (0..=m)
            .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / m as f64))
            .collect();
        Self { n, rot_group, roots }
    }

    pub fn slots(&self) -> usize {
        self.n / 2
    }

    pub fn galois_element(&self, step: usize) -> usize {
        self.rot_group[step % self.slots()]
    }

    fn bit_reverse(vals: &mut [Complex64]) {
        let n = vals.len();
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j ^= bit;
            if i < j {
                vals.swap(i, j);
            }
        }
    }

    /// Evaluates the slot values from the folded coefficient vector.
    fn fft_special(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.n;
        Self::bit_reverse(vals);
        let mut len = 2;
        while len <= size {
            let lenh = len >> 1;
            let lenq = len << 2;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] % lenq) * m / lenq;
                    let u = vals[i + j];
                    let v = vals[i + j + lenh] * self.roots[idx];
                    vals[i + j] = u + v;
                    vals[i + j + lenh] = u - v;
                }
            }
            len <<= 1;
        }
    }

    fn fft_special_inv(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.n;
        let mut len = size;
        while len >= 2 {
            let lenh = len >> 1;
            let lenq = len << 2;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (lenq - (self.rot_group[j] % lenq)) * m / lenq;
                    let u = vals[i + j] + vals[i + j + lenh];
                    let v = (vals[i + j] - vals[i + j + lenh]) * self.roots[idx];
                    vals[i + j] = u;
                    vals[i + j + lenh] = v;
                }
            }
            len >>= 1;
        }
        Self::bit_reverse(vals);
        let inv = 1.0 / size as f64;
        for v in vals.iter_mut() {
            *v *= inv;
        }
    }

    /// Real coefficients (unscaled) of the polynomial whose slots are
    /// `values`, zero-padded to the slot count.
    pub fn embed_inverse(&self, values: &[f64]) -> Vec<f64> {
        let slots = self.slots();
        assert!(values.len() <= slots);
        let mut vals = vec![Complex64::new(0.0, 0.0); slots];
        for (v, &x) in vals.iter_mut().zip(values) {
            v.re = x;
        }
        self.fft_special_inv(&mut vals);
        let mut coeffs = vec![0.0; self.n];
        for (i, v) in vals.iter().enumerate() {
            coeffs[i] = v.re;
            coeffs[i + slots] = v.im;
        }
        coeffs
    }

    /// Real parts of the slot values of a polynomial with real coefficients.
    pub fn embed(&self, coeffs: &[f64]) -> Vec<f64> {
        let slots = self.slots();
        assert_eq!(coeffs.len(), self.n);
        let mut vals: Vec<Complex64> = (0..slots)
            .map(|i| Complex64::new(coeffs[i], coeffs[i + slots]))
            .collect();
        self.fft_special(&mut vals);
        vals.into_iter().map(|v| v.re).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of m(zeta^(5^j)) in O(N^2).
    fn evaluate_direct(coeffs: &[f64]) -> Vec<f64> {
        let n = coeffs.len();
        let m = 2 * n;
        let mut g = 1usize;
        let mut out = Vec::new();
        for _ in 0..n / 2 {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, &c) in coeffs.iter().enumerate() {
                let e = (g * k) % m;
                acc += Complex64::from_polar(1.0, PI * e as f64 / n as f64) * c;
            }
            out.push(acc.re);
            g = g * 5 % m;
        }
        out
    }

    #[test]
    fn fast_embedding_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &n in &[8usize, 16, 64, 256] {
            let enc = Encoder::new(n);
            let coeffs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fast = enc.embed(&coeffs);
            let direct = evaluate_direct(&coeffs);
            for (a, b) in fast.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-9, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn inverse_embedding_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(128);
        let values: Vec<f64> = (0..64).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let coeffs = enc.embed_inverse(&values);
        let direct = evaluate_direct(&coeffs);
        for (a, b) in values.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn galois_map_rotates_left() {
        // applying X -> X^5 to the coefficient vector shifts slots by one
        let n = 16;
        let enc = Encoder::new(n);
        let values: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        let coeffs = enc.embed_inverse(&values);
        let g = enc.galois_element(1);
        let mut rotated = vec![0.0; n];
        for (k, &c) in coeffs.iter().enumerate() {
            let e = k * g % (2 * n);
            if e < n {
                rotated[e] += c;
            } else {
                rotated[e - n] -= c;
            }
        }
        let out = enc.embed(&rotated);
        let expected = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 1.0];
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{out:?}");
        }
    }
}
