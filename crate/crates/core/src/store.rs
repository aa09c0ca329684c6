//! Model checkpoints in the shared container format.
//!
//! Meta carries the topology and input normalization; blob 0 holds the
//! trainable parameters and blob 1 the batch-norm running statistics, both
//! as little-endian `f64` bit patterns so a save/load cycle is exact.

use std::path::Path;

use ckks::container::{self, Container, Kind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelWeights, NetworkSpec};
use crate::training::{flatten, unflatten};

/// Per-channel input standardization recorded with a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub weights: ModelWeights,
    pub norm: InputNorm,
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    container::u64s_to_bytes(&v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
}

fn bytes_to_f64s(b: &[u8]) -> Result<Vec<f64>> {
    Ok(container::bytes_to_u64s(b)?.into_iter().map(f64::from_bits).collect())
}

fn running_stats(w: &ModelWeights) -> Vec<f64> {
    w.layers
        .iter()
        .filter_map(|l| match l {
            LayerWeights::BatchNorm(b) => {
                Some(b.running_mean.iter().chain(&b.running_var).copied().collect::<Vec<_>>())
            }
            _ => None,
        })
        .flatten()
        .collect()
}

pub fn checkpoint_to_container(ck: &Checkpoint) -> Container {
    let mut c = Container::new(
        Kind::Model,
        json!({
            "topology": container::to_value(&ck.spec),
            "input_norm": container::to_value(&ck.norm),
            "num_params": ck.weights.num_params(),
        }),
    );
    c.blobs.push(f64s_to_bytes(&flatten(&ck.weights)));
    c.blobs.push(f64s_to_bytes(&running_stats(&ck.weights)));
    c
}

pub fn checkpoint_from_container(c: Container) -> Result<Checkpoint> {
    let c = c.expect_kind(Kind::Model)?;
    let spec: NetworkSpec = c.meta_field("topology")?;
    spec.validate()?;
    let norm: InputNorm = c.meta_field("input_norm")?;
    if c.blobs.len() != 2 {
        return Err(Error::Format(format!(
            "model container has {} blobs, expected 2",
            c.blobs.len()
        )));
    }
    // shapes come from the topology; values are overwritten below
    let mut weights = ModelWeights::init(&spec, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
    let params = bytes_to_f64s(&c.blobs[0])?;
    if params.len() != weights.num_params() {
        return Err(Error::Format(format!(
            "{} parameters stored, topology needs {}",
            params.len(),
            weights.num_params()
        )));
    }
    unflatten(&mut weights, &params);
    let stats = bytes_to_f64s(&c.blobs[1])?;
    if stats.len() != running_stats(&weights).len() {
        return Err(Error::Format("running statistics do not match the topology".into()));
    }
    let mut off = 0;
    for l in &mut weights.layers {
        if let LayerWeights::BatchNorm(b) = l {
            let n = b.running_mean.len();
            b.running_mean
                .iter_mut()
                .zip(&stats[off..off + n])
                .for_each(|(d, s)| *d = *s);
            b.running_var
                .iter_mut()
                .zip(&stats[off + n..off + 2 * n])
                .for_each(|(d, s)| *d = *s);
            off += 2 * n;
        }
    }
    Ok(Checkpoint { spec, weights, norm })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    Ok(checkpoint_to_container(ck).save(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_container(Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Granularity;
    use crate::model::{build_squeezenet_opt, ActivationKind};
    use rand::Rng;

    fn sample() -> Checkpoint {
        let spec = build_squeezenet_opt(
            10,
            (3, 16, 16),
            ActivationKind::Poly {
                granularity: Granularity::Element,
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut weights = ModelWeights::init(&spec, 0.3, &mut rng).unwrap();
        for l in &mut weights.layers {
            if let LayerWeights::BatchNorm(b) = l {
                b.running_mean.mapv_inplace(|_| rng.gen());
                b.running_var.mapv_inplace(|_| rng.gen_range(0.1..3.0));
            }
        }
        Checkpoint {
            spec,
            weights,
            norm: InputNorm {
                mean: vec![0.4, 0.5, 0.6],
                std: vec![0.2, 0.25, 0.3],
            },
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let back = checkpoint_from_container(Container::from_bytes(&checkpoint_to_container(&ck).to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back, ck);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.beaa");
        save_checkpoint(&ck, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
    }

    #[test]
    fn truncated_parameters_are_rejected() {
        let mut c = checkpoint_to_container(&sample());
        let n = c.blobs[0].len();
        c.blobs[0].truncate(n - 8);
        assert!(matches!(checkpoint_from_container(c), Err(Error::Format(_))));
        let mut c = checkpoint_to_container(&sample());
        c.kind = Kind::Ciphertext;
        assert!(checkpoint_from_container(c).is_err());
    }
}
