//! File-level plumbing shared by the command-line tool and the integration
//! tests: key directories, sharded ciphertext batches, and plans from
//! checkpoints.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ckks::container::{self, Container};
use ckks::{CkksBackend, CkksContext, HeParams, KeySet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, HePlan};
use crate::model;
use crate::packing::{self, PackedTensor};
use crate::store::Checkpoint;

pub const PARAMS_FILE: &str = "params.bin";
pub const SECRET_FILE: &str = "secret.key";
pub const PUBLIC_FILE: &str = "public.keys";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_keys(dir: &Path, ctx: &CkksContext, keys: &KeySet) -> Result<()> {
    fs::create_dir_all(dir)?;
    container::params_to_container(ctx.params()).save(dir.join(PARAMS_FILE))?;
    container::secret_key_to_container(ctx, &keys.secret).save(dir.join(SECRET_FILE))?;
    container::public_keys_to_container(ctx, &keys.public).save(dir.join(PUBLIC_FILE))?;
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<HeParams> {
    Ok(container::params_from_container(Container::load(
        dir.join(PARAMS_FILE),
    )?)?)
}

/// Backend from a key directory. The secret key is read only if asked for
/// and present, so a server-side copy of the directory may omit it.
pub fn load_backend(dir: &Path, with_secret: bool) -> Result<CkksBackend> {
    let ctx = Arc::new(CkksContext::new(load_params(dir)?)?);
    let public = container::public_keys_from_container(&ctx, Container::load(dir.join(PUBLIC_FILE))?)?;
    let secret = if with_secret {
        let c = Container::load(dir.join(SECRET_FILE))
            .map_err(|e| Error::Config(format!("{}: {e}", dir.join(SECRET_FILE).display())))?;
        Some(Arc::new(container::secret_key_from_container(&ctx, c)?))
    } else {
        None
    };
    Ok(CkksBackend::new(ctx, Arc::new(public), secret)?)
}

/// Index of a sharded encrypted batch: one file per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub shape: (usize, usize, usize),
    pub batch: usize,
    pub fingerprint: u64,
    pub shards: Vec<String>,
    /// Plaintext labels travelling with the batch, if known.
    #[serde(default)]
    pub labels: Vec<usize>,
}

pub fn write_encrypted(
    dir: &Path,
    ctx: &CkksContext,
    packed: &PackedTensor<ckks::Ciphertext>,
    labels: &[usize],
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let (c, h, w) = packed.shape;
    let mut shards = Vec::with_capacity(c);
    for ch in 0..c {
        let part = PackedTensor {
            shape: (1, h, w),
            batch: packed.batch,
            cells: packed.channels(ch, ch + 1).to_vec(),
        };
        let name = format!("channel_{ch:04}.ct");
        packing::packed_to_container(ctx, &part).save(dir.join(&name))?;
        shards.push(name);
    }
    let manifest = Manifest {
        shape: packed.shape,
        batch: packed.batch,
        fingerprint: ctx.params().fingerprint(),
        shards,
        labels: labels.to_vec(),
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("plain data"),
    )?;
    Ok(manifest)
}

pub fn read_encrypted(dir: &Path, ctx: &CkksContext) -> Result<(Manifest, PackedTensor<ckks::Ciphertext>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.fingerprint != ctx.params().fingerprint() {
        return Err(Error::He(ckks::HeError::ParamMismatch));
    }
    let (c, h, w) = manifest.shape;
    if manifest.shards.len() != c {
        return Err(Error::Format("manifest lists the wrong number of shards".into()));
    }
    let mut cells = Vec::with_capacity(c * h * w);
    for name in &manifest.shards {
        let part = packing::packed_from_container(ctx, Container::load(dir.join(name))?)?;
        if part.shape != (1, h, w) || part.batch != manifest.batch {
            return Err(Error::Format(format!("{name}: shard shape does not match manifest")));
        }
        cells.extend(part.cells);
    }
    let packed = PackedTensor {
        shape: manifest.shape,
        batch: manifest.batch,
        cells,
    };
    Ok((manifest, packed))
}

/// Folds batch norms and compiles the checkpoint for `params`.
pub fn plan_for(ck: &Checkpoint, params: &HeParams) -> Result<HePlan> {
    let (spec, weights) = model::fold_batchnorm(&ck.spec, &ck.weights)?;
    inference::compile(&spec, &weights, params)
}
