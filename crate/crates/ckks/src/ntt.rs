//! Negacyclic NTT over `Z_q[X]/(X^N + 1)`.
//!
//! Forward: Cooley-Tukey with the 2N-th root twist merged into bit-reversed
//! twiddles, output in bit-reversed order. Inverse: Gentleman-Sande, input in
//! bit-reversed order. Pointwise products in between give negacyclic
//! convolution.

use crate::arith::{primitive_root_2n, Modulus};
use crate::error::{HeError, Result};

#[derive(Clone, Debug)]
pub struct NttTable {
    modulus: Modulus,
    n: usize,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    psi_inv_rev: Vec<u64>,
    psi_inv_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

impl NttTable {
    pub fn new(modulus: Modulus, n: usize) -> Result<Self> {
        if !n.is_power_of_two() || n < 2 {
            return Err(HeError::InvalidParams(format!("NTT size {n} is not a power of two")));
        }
        let psi = primitive_root_2n(&modulus, n).ok_or_else(|| {
            HeError::InvalidParams(format!(
                "modulus {} has no primitive {}-th root of unity",
                modulus.value(),
                2 * n
            ))
        })?;
        let psi_inv = modulus.inv(psi).expect("root is nonzero");
        let bits = n.trailing_zeros();
        let mut psi_rev = vec![0u64; n];
        let mut psi_inv_rev = vec![0u64; n];
        let (mut p, mut pi) = (1u64, 1u64);
        for i in 0..n {
            let r = bit_reverse(i, bits);
            psi_rev[r] = p;
            psi_inv_rev[r] = pi;
            p = modulus.mul(p, psi);
            pi = modulus.mul(pi, psi_inv);
        }
        let psi_rev_shoup = psi_rev.iter().map(|&w| modulus.shoup(w)).collect();
        let psi_inv_rev_shoup = psi_inv_rev.iter().map(|&w| modulus.shoup(w)).collect();
        let n_inv = modulus.inv(n as u64).expect("n invertible");
        Ok(Self {
            modulus,
            n,
            psi_rev,
            psi_rev_shoup,
            psi_inv_rev,
            psi_inv_rev_shoup,
            n_inv,
            n_inv_shoup: modulus.shoup(n_inv),
        })
    }

    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = &self.modulus;
        let mut t = self.n;
        let mut m = 1;
        while m < self.n {
            t >>= 1;
            for i in 0..m {
                let j1 = 2 * i * t;
                let w = self.psi_rev[m + i];
                let ws = self.psi_rev_shoup[m + i];
                let (lo, hi) = a[j1..j1 + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = q.mul_shoup(*y, w, ws);
                    *x = q.add(u, v);
                    *y = q.sub(u, v);
                }
            }
            m <<= 1;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = &self.modulus;
        let mut t = 1;
        let mut m = self.n;
        while m > 1 {
            let h = m >> 1;
            let mut j1 = 0;
            for i in 0..h {
                let w = self.psi_inv_rev[h + i];
                let ws = self.psi_inv_rev_shoup[h + i];
                let (lo, hi) = a[j1..j1 + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = *y;
                    *x = q.add(u, v);
                    *y = q.mul_shoup(q.sub(u, v), w, ws);
                }
                j1 += 2 * t;
            }
            t <<= 1;
            m = h;
        }
        for x in a.iter_mut() {
            *x = q.mul_shoup(*x, self.n_inv, self.n_inv_shoup);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::ntt_primes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Schoolbook product in Z_q[X]/(X^n + 1).
    fn negacyclic_naive(a: &[u64], b: &[u64], q: &Modulus) -> Vec<u64> {
        let n = a.len();
        let mut out = vec![0u64; n];
        for i in 0..n {
            for j in 0..n {
                let p = q.mul(a[i], b[j]);
                let k = i + j;
                if k < n {
                    out[k] = q.add(out[k], p);
                } else {
                    out[k - n] = q.sub(out[k - n], p);
                }
            }
        }
        out
    }

    #[test]
    fn roundtrip_and_convolution_match_schoolbook() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[8usize, 64, 256] {
            for &bits in &[30u32, 40, 60] {
                let q = Modulus::new(ntt_primes(bits, n, 1, &[])[0]);
                let table = NttTable::new(q, n).unwrap();
                let a: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q.value())).collect();
                let b: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q.value())).collect();

                let mut fa = a.clone();
                table.forward(&mut fa);
                let mut back = fa.clone();
                table.inverse(&mut back);
                assert_eq!(back, a);

                let mut fb = b.clone();
                table.forward(&mut fb);
                let mut prod: Vec<u64> = fa.iter().zip(&fb).map(|(&x, &y)| q.mul(x, y)).collect();
                table.inverse(&mut prod);
                assert_eq!(prod, negacyclic_naive(&a, &b, &q), "n={n} bits={bits}");
            }
        }
    }

    #[test]
    fn rejects_unfriendly_modulus() {
        assert!(NttTable::new(Modulus::new(97), 64).is_err());
        assert!(NttTable::new(Modulus::new(97), 12).is_err());
    }
}
