//! Polynomials in residue form, one length-N row per modulus.

use serde::{Deserialize, Serialize};

/// Residues of a ring element over an ordered list of moduli. Which moduli
/// the rows belong to is decided by the owner (ciphertext level, key basis).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnsPoly {
    n: usize,
    data: Vec<u64>,
}

impl RnsPoly {
    pub fn zero(n: usize, num_moduli: usize) -> Self {
        Self {
            n,
            data: vec![0; n * num_moduli],
        }
    }

    pub fn from_rows(n: usize, data: Vec<u64>) -> Self {
        assert_eq!(data.len() % n, 0);
        Self { n, data }
    }

    pub fn degree(&self) -> usize {
        self.n
    }

    pub fn num_moduli(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.data.chunks_exact(self.n)
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut [u64]> {
        self.data.chunks_exact_mut(self.n)
    }

    /// Keeps only the first `k` rows.
    pub fn truncate(&mut self, k: usize) {
        self.data.truncate(k * self.n);
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            n: self.n,
            data: self.data[..k * self.n].to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[u64]) {
        assert_eq!(row.len(), self.n);
        self.data.extend_from_slice(row);
    }

    pub fn raw(&self) -> &[u64] {
        &self.data
    }
}
