//! Leveled CKKS-style homomorphic encryption.
//!
//! Two interchangeable backends implement [`HeBackend`]:
//!
//! - [`CkksBackend`]: RNS-CKKS over `Z_Q[X]/(X^N + 1)` with a prime modulus
//!   chain, canonical-embedding encoding, rescaling, and key switching for
//!   relinearization and Galois rotations.
//! - [`SimBackend`]: exact `f64` slot vectors with identical level/scale
//!   bookkeeping, used as a correctness oracle.
//!
//! ```
//! use std::sync::Arc;
//! use ckks::{keygen, CkksBackend, CkksContext, HeBackend, HeParams};
//! use rand::SeedableRng;
//!
//! let ctx = Arc::new(CkksContext::new(HeParams::toy(64, 2).unwrap()).unwrap());
//! let mut rng = rand::rngs::StdRng::seed_from_u64(0);
//! let keys = keygen(&ctx, &[1], &mut rng);
//! let he = CkksBackend::new(ctx, Arc::new(keys.public), Some(Arc::new(keys.secret))).unwrap();
//! let ct = he.encode_encrypt(&[1.0, 2.0, 3.0], &mut rng).unwrap();
//! let sq = he.rescale(&he.mult(&ct, &ct).unwrap()).unwrap();
//! let out = he.decrypt_decode(&sq).unwrap();
//! assert!((out[2] - 9.0).abs() < 1e-3);
//! ```

pub mod arith;
pub mod backend;
pub mod container;
pub mod context;
pub mod encoding;
pub mod error;
pub mod keys;
pub mod ntt;
pub mod params;
pub mod poly;
pub mod scheme;
pub mod sim;

pub use backend::{scales_match, HasMeta, HeBackend, Meta};
pub use context::CkksContext;
pub use error::{HeError, Result};
pub use keys::{keygen, KeySet, PublicKeys, SecretKey};
pub use params::{tolerance, HeParams};
pub use scheme::{Ciphertext, CkksBackend, Plaintext};
pub use sim::{SimBackend, SimCiphertext, SimPlaintext};
