//! Word-sized modular arithmetic for NTT-friendly primes below 2^62.
//!
//! Products are reduced with a 128-bit Barrett constant; multiplications by a
//! fixed operand (NTT twiddles) use Shoup's precomputed quotient.

/// An odd prime modulus `q < 2^62` with its Barrett constant `floor(2^128 / q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modulus {
    value: u64,
    ratio_lo: u64,
    ratio_hi: u64,
}

impl Modulus {
    pub fn new(value: u64) -> Self {
        assert!(value > 2 && value < (1 << 62), "modulus out of range: {value}");
        let ratio = u128::MAX / value as u128;
        Self {
            value,
            ratio_lo: ratio as u64,
            ratio_hi: (ratio >> 64) as u64,
        }
    }

    #[inline]
    pub fn value(&self) -> u64 {
        self.value
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        // branch-free: the wrapped difference is huge when s < q
        let s = a + b;
        s.min(s.wrapping_sub(self.value))
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        let d = a.wrapping_sub(b);
        d.min(d.wrapping_add(self.value))
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.value - a
        }
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        self.reduce_u128(a as u128 * b as u128)
    }

    /// Barrett reduction of any `x`; the quotient estimate is off by at most a few.
    #[inline]
    pub fn reduce_u128(&self, x: u128) -> u64 {
        let x_lo = x as u64;
        let x_hi = (x >> 64) as u64;
        let lo_lo = (x_lo as u128 * self.ratio_lo as u128) >> 64;
        let lo_hi = x_lo as u128 * self.ratio_hi as u128;
        let hi_lo = x_hi as u128 * self.ratio_lo as u128;
        let hi_hi = x_hi as u128 * self.ratio_hi as u128;
        let mid = lo_lo + (lo_hi as u64) as u128 + (hi_lo as u64) as u128;
        let quot = hi_hi + (lo_hi >> 64) + (hi_lo >> 64) + (mid >> 64);
        let mut r = x.wrapping_sub(quot.wrapping_mul(self.value as u128)) as u64;
        while r >= self.value {
            r -= self.value;
        }
        r
    }

    #[inline]
    pub fn reduce(&self, x: u64) -> u64 {
        if x >= self.value << 1 {
            x % self.value
        } else {
            x.min(x.wrapping_sub(self.value))
        }
    }

    #[inline]
    pub fn from_i64(&self, x: i64) -> u64 {
        let r = (x as i128).rem_euclid(self.value as i128);
        r as u64
    }

    #[inline]
    pub fn from_i128(&self, x: i128) -> u64 {
        x.rem_euclid(self.value as i128) as u64
    }

    /// Representative of `a` in `(-q/2, q/2]`.
    #[inline]
    pub fn center(&self, a: u64) -> i64 {
        if a > self.value / 2 {
            a as i64 - self.value as i64
        } else {
            a as i64
        }
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base = self.reduce(base);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Inverse modulo a prime modulus; `None` for zero.
    pub fn inv(&self, a: u64) -> Option<u64> {
        let a = self.reduce(a);
        if a == 0 {
            None
        } else {
            Some(self.pow(a, self.value - 2))
        }
    }

    /// Shoup companion `floor(w * 2^64 / q)` for a fixed multiplicand `w < q`.
    #[inline]
    pub fn shoup(&self, w: u64) -> u64 {
        (((w as u128) << 64) / self.value as u128) as u64
    }

    #[inline]
    pub fn mul_shoup(&self, x: u64, w: u64, w_shoup: u64) -> u64 {
        let q_est = ((x as u128 * w_shoup as u128) >> 64) as u64;
        let r = x.wrapping_mul(w).wrapping_sub(q_est.wrapping_mul(self.value));
        r.min(r.wrapping_sub(self.value))
    }
}

fn mul_mod_u64(a: u64, b: u64, m: u64) -> u64 {
    (a as u128 * b as u128 % m as u128) as u64
}

fn pow_mod_u64(mut b: u64, mut e: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    b %= m;
    while e > 0 {
        if e & 1 == 1 {
            acc = mul_mod_u64(acc, b, m);
        }
        b = mul_mod_u64(b, b, m);
        e >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &p in &BASES {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut r = 0;
    while d % 2 == 0 {
        d /= 2;
        r += 1;
    }
    'witness: for &a in &BASES {
        let mut x = pow_mod_u64(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..r {
            x = mul_mod_u64(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// The first `count` primes above `2^bits` congruent to 1 mod `2n`, skipping
/// anything in `exclude`.
pub fn ntt_primes(bits: u32, n: usize, count: usize, exclude: &[u64]) -> Vec<u64> {
    assert!(bits >= 4 && bits <= 61, "prime size out of range: {bits}");
    let step = 2 * n as u64;
    let start = 1u64 << bits;
    let mut candidate = (start / step + 1) * step + 1;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        assert!(candidate < (1 << 62), "ran out of {bits}-bit NTT primes");
        if is_prime(candidate) && !exclude.contains(&candidate) {
            out.push(candidate);
        }
        candidate += step;
    }
    out
}

/// A primitive `2n`-th root of unity modulo prime `q` (requires `q = 1 mod 2n`).
pub fn primitive_root_2n(q: &Modulus, n: usize) -> Option<u64> {
    let two_n = 2 * n as u64;
    if (q.value() - 1) % two_n != 0 {
        return None;
    }
    let cofactor = (q.value() - 1) / two_n;
    (2..q.value().min(1 << 20))
        .map(|g| q.pow(g, cofactor))
        .find(|&w| q.pow(w, n as u64) == q.value() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const Q: u64 = 0x3fff_ffff_000a_0001; // not necessarily prime, arithmetic only

    proptest! {
        #[test]
        fn barrett_matches_u128_remainder(a in 0..Q, b in 0..Q) {
            let m = Modulus::new(Q);
            prop_assert_eq!(m.mul(a, b), (a as u128 * b as u128 % Q as u128) as u64);
        }

        #[test]
        fn barrett_reduces_full_width_sums(hi in any::<u64>(), lo in any::<u64>()) {
            let m = Modulus::new(Q);
            let x = ((hi as u128) << 64) | lo as u128;
            prop_assert_eq!(m.reduce_u128(x) as u128, x % Q as u128);
        }

        #[test]
        fn add_sub_stay_reduced(a in 0..Q, b in 0..Q) {
            let m = Modulus::new(Q);
            prop_assert_eq!(m.add(a, b) as u128, (a as u128 + b as u128) % Q as u128);
            prop_assert_eq!(m.sub(m.add(a, b), b), a);
        }

        #[test]
        fn shoup_matches_plain_product(a in 0..Q, w in 0..Q) {
            let m = Modulus::new(Q);
            prop_assert_eq!(m.mul_shoup(a, w, m.shoup(w)), m.mul(a, w));
        }
    }

    #[test]
    fn primes_are_ntt_friendly() {
        let ps = ntt_primes(40, 4096, 4, &[]);
        assert_eq!(ps.len(), 4);
        for &p in &ps {
            assert!(is_prime(p));
            assert!(p > 1 << 40);
            assert_eq!(p % 8192, 1);
            let m = Modulus::new(p);
            let psi = primitive_root_2n(&m, 4096).unwrap();
            assert_eq!(m.pow(psi, 4096), p - 1);
        }
        assert!(ps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn small_known_primes() {
        assert!(is_prime(97));
        assert!(!is_prime(91));
        assert!(is_prime(0xffff_ffff_0000_0001));
        assert!(!is_prime(1));
    }

    #[test]
    fn inverse_and_center() {
        let m = Modulus::new(97);
        assert_eq!(m.mul(m.inv(5).unwrap(), 5), 1);
        assert_eq!(m.inv(0), None);
        assert_eq!(m.center(96), -1);
        assert_eq!(m.center(48), 48);
        assert_eq!(m.from_i64(-3), 94);
    }
}
