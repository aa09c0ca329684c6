//! Run configuration: one TOML file covers every command, and each command
//! writes the resolved copy next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use ckks::HeParams;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, ActivationKind, NetworkSpec};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    ImageDir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Side length images are resized to by the directory loader.
    pub image_size: u32,
    pub synthetic_samples: usize,
    pub synthetic_classes: usize,
    pub synthetic_shape: [usize; 3],
    pub synthetic_noise: f64,
    /// Caps per split, applied by seeded subsampling.
    pub max_train: Option<usize>,
    pub max_val: Option<usize>,
    pub max_test: Option<usize>,
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            image_size: 32,
            synthetic_samples: 600,
            synthetic_classes: 4,
            synthetic_shape: [3, 8, 8],
            synthetic_noise: 0.5,
            max_train: None,
            max_val: None,
            max_test: None,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeConfig {
    /// `desk`, `large`, or `toy-<N>-<levels>`.
    pub preset: String,
    /// Images per ciphertext batch.
    pub batch_size: usize,
}

impl Default for HeConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            batch_size: 64,
        }
    }
}

impl HeConfig {
    pub fn params(&self) -> Result<HeParams> {
        if let Some(rest) = self.preset.strip_prefix("toy-") {
            let parts: Vec<usize> = rest.split('-').filter_map(|p| p.parse().ok()).collect();
            if let [n, levels] = parts[..] {
                return Ok(HeParams::toy(n, levels)?);
            }
            return Err(Error::Config(format!("bad toy preset {:?}", self.preset)));
        }
        Ok(HeParams::preset(&self.preset)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    /// Repetitions per primitive when measuring op timings.
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![64, 256, 1024],
            reps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    /// `squeezenet`, `desk`, or a path to a topology JSON file.
    pub topology: String,
    /// Student activation, e.g. `poly-element`.
    pub activation: String,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub he: HeConfig,
    pub bench: BenchConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            topology: "desk".into(),
            activation: "poly-element".into(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            he: HeConfig::default(),
            bench: BenchConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        ActivationKind::parse(&self.activation)?;
        if self.he.batch_size == 0 {
            return Err(Error::Config("he.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// The training config with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let p = dir.join("resolved_config.toml");
        fs::write(&p, self.to_toml())?;
        Ok(p)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let need_path = || {
            d.path
                .clone()
                .ok_or_else(|| Error::Config("data.path is required for this source".into()))
        };
        let mut ds = match d.source {
            DataSource::Synthetic => {
                let [c, h, w] = d.synthetic_shape;
                data::synthetic(
                    d.synthetic_samples,
                    (c, h, w),
                    d.synthetic_classes,
                    d.synthetic_noise,
                    self.seed,
                )?
            }
            DataSource::Cifar10 => data::load_cifar10(&need_path()?)?,
            DataSource::ImageDir => data::load_image_dir(&need_path()?, d.image_size, self.seed)?,
        };
        if d.max_train.is_some() || d.max_val.is_some() || d.max_test.is_some() {
            let cap = |v: Option<usize>| v.unwrap_or(usize::MAX);
            ds = ds.subset(cap(d.max_train), cap(d.max_val), cap(d.max_test), self.seed);
        }
        if d.normalize {
            ds.normalize();
        }
        Ok(ds)
    }

    pub fn topology(
        &self,
        input: (usize, usize, usize),
        num_classes: usize,
        activation: ActivationKind,
    ) -> Result<NetworkSpec> {
        resolve_topology(&self.topology, input, num_classes, activation)
    }
}

/// Built-in topology names, or a JSON file whose activations are replaced
/// by `activation`.
pub fn resolve_topology(
    name: &str,
    input: (usize, usize, usize),
    num_classes: usize,
    activation: ActivationKind,
) -> Result<NetworkSpec> {
    match name {
        "squeezenet" => model::build_squeezenet_opt(num_classes, input, activation),
        "desk" => model::build_desk_net(num_classes, input, activation),
        path => {
            let spec = NetworkSpec::from_json(&fs::read_to_string(path)?)?;
            if spec.input != input || spec.num_classes != num_classes {
                return Err(Error::Config(format!(
                    "{path}: topology is for {:?} with {} classes, data is {:?} with {}",
                    spec.input, spec.num_classes, input, num_classes
                )));
            }
            Ok(spec.with_activation(activation))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("seed = 7\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.train.momentum, TrainConfig::default().momentum);
        assert_eq!(partial.train_config().seed, 7);
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [
            include_str!("../../../configs/quick.toml"),
            include_str!("../../../configs/cifar10.toml"),
        ] {
            let c = RunConfig::from_toml(text).unwrap();
            c.he.params().unwrap();
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nmomentum = 1.5\n").is_err());
        assert!(RunConfig::from_toml("activation = \"cubic\"\n").is_err());
        assert!(RunConfig::from_toml("unknown_key = 1\n").is_err());
    }

    #[test]
    fn presets_resolve() {
        let he = |p: &str| HeConfig {
            preset: p.into(),
            batch_size: 1,
        };
        assert_eq!(he("desk").params().unwrap().ring_degree, 4096);
        assert_eq!(he("large").params().unwrap().ring_degree, 32768);
        assert_eq!(he("toy-64-3").params().unwrap().max_level(), 3);
        assert!(he("toy-64").params().is_err());
        assert!(he("huge").params().is_err());
    }

    #[test]
    fn topology_files_are_checked() {
        let act = ActivationKind::Relu;
        let spec = resolve_topology("desk", (3, 8, 8), 4, act).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        fs::write(&p, spec.to_json()).unwrap();
        let poly = ActivationKind::parse("poly-channel").unwrap();
        let back = resolve_topology(p.to_str().unwrap(), (3, 8, 8), 4, poly).unwrap();
        assert_eq!(back, spec.with_activation(poly));
        assert!(resolve_topology(p.to_str().unwrap(), (3, 8, 8), 5, poly).is_err());
    }

    #[test]
    fn synthetic_dataset_from_config() {
        let c = RunConfig {
            data: DataConfig {
                synthetic_samples: 40,
                max_train: Some(10),
                ..Default::default()
            },
            ..Default::default()
        };
        let d = c.load_dataset().unwrap();
        assert_eq!(d.indices(data::Split::Train).len(), 10);
        assert_eq!(d.image_shape(), (3, 8, 8));
    }
}
