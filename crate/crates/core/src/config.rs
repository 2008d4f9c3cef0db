//! Run configuration: a flat `key = value` text format covering the dataset
//! choice, architecture, and optimizer, plus the shipped presets.
//!
//! The same canonical text is stored verbatim inside checkpoints, so a saved
//! model always carries the exact configuration that produced it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    generate_synthetic_split, load_mnist, load_synthetic_cache, save_synthetic_cache, Dataset,
    SyntheticSpec, MNIST_SIDE,
};
use crate::error::{Error, Result};
use crate::model::ArchitectureConfig;
use crate::train::TrainConfig;

/// Which dataset a run trains on, with its loading options.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Mnist {
        dir: PathBuf,
        /// Keep only the first N train / test items when set.
        train_subset: Option<usize>,
        test_subset: Option<usize>,
    },
    Synthetic {
        spec: SyntheticSpec,
        test_per_cell: usize,
        /// Optional on-disk cache so repeated runs skip rendering.
        cache: Option<PathBuf>,
    },
}

/// A fully resolved run: dataset plus training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

pub const PRESET_NAMES: [&str; 3] = ["mnist-desk", "synthetic-desk", "mnist-paper"];

/// The text of a shipped preset, compiled into the library so the binary
/// works without the `configs/` directory present.
pub fn builtin_preset(name: &str) -> Option<&'static str> {
    match name {
        "mnist-desk" => Some(include_str!("../../../configs/mnist-desk.cfg")),
        "synthetic-desk" => Some(include_str!("../../../configs/synthetic-desk.cfg")),
        "mnist-paper" => Some(include_str!("../../../configs/mnist-paper.cfg")),
        _ => None,
    }
}

/// Split one `key=value` override argument at the first `=`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!(
            "override `{s}` is not of the form key=value"
        ))),
    }
}

/// Line-oriented `key = value` map with `#` comments. Duplicate keys are an
/// error: silently keeping one of two values hides mistakes.
struct KvMap {
    map: BTreeMap<String, String>,
}

impl KvMap {
    fn from_text(text: &str) -> Result<KvMap> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: `{line}` is not key = value", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(KvMap { map })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn req(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("key `{key}`: bad value `{v}`: {e}"))),
        }
    }

    fn parse_req<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.parse_opt(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.map.keys().map(String::as_str).collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }
}

fn parse_channels(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("key `channels`: bad entry `{p}`: {e}")))
        })
        .collect()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig> {
        RunConfig::from_text_with_overrides(text, &[])
    }

    /// Parse `text`, then apply `overrides` on top (replacing whatever the
    /// file said) before interpreting any value.
    pub fn from_text_with_overrides(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<RunConfig> {
        let mut kv = KvMap::from_text(text)?;
        for (k, v) in overrides {
            kv.map.insert(k.clone(), v.clone());
        }
        RunConfig::from_kv(kv)
    }

    fn from_kv(mut kv: KvMap) -> Result<RunConfig> {
        let seed: u64 = kv.parse_req("seed")?;

        let dataset = match kv.req("dataset")?.as_str() {
            "mnist" => {
                let dir = PathBuf::from(
                    kv.take("mnist_dir")
                        .unwrap_or_else(|| "data/mnist".to_string()),
                );
                let train_subset: Option<usize> = kv.parse_opt("train_subset")?;
                let test_subset: Option<usize> = kv.parse_opt("test_subset")?;
                for (name, v) in [("train_subset", train_subset), ("test_subset", test_subset)] {
                    if v == Some(0) {
                        return Err(Error::Config(format!("key `{name}`: must be positive")));
                    }
                }
                DatasetConfig::Mnist {
                    dir,
                    train_subset,
                    test_subset,
                }
            }
            "synthetic" => {
                let spec = SyntheticSpec {
                    num_domains: kv.parse_req("num_domains")?,
                    num_styles: kv.parse_req("num_styles")?,
                    image_size: kv.parse_req("image_size")?,
                    samples_per_cell: kv.parse_req("samples_per_cell")?,
                    seed: kv.parse_or("data_seed", seed)?,
                };
                spec.validate()?;
                DatasetConfig::Synthetic {
                    spec,
                    test_per_cell: kv.parse_req("test_per_cell")?,
                    cache: kv.take("cache").map(PathBuf::from),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "key `dataset`: `{other}` is not mnist or synthetic"
                )))
            }
        };

        let (in_height, in_width) = match &dataset {
            DatasetConfig::Mnist { .. } => (MNIST_SIDE, MNIST_SIDE),
            DatasetConfig::Synthetic { spec, .. } => (spec.image_size, spec.image_size),
        };
        let arch = ArchitectureConfig {
            in_channels: 1,
            in_height,
            in_width,
            conv_channels: parse_channels(&kv.req("channels")?)?,
            kernel: kv.parse_or("kernel", 3)?,
            stride: kv.parse_or("stride", 2)?,
            dim_l: kv.parse_req("dim_l")?,
            dim_u: kv.parse_req("dim_u")?,
        };

        let grad_clip = match kv.take("grad_clip") {
            None => None,
            Some(v) if v == "none" => None,
            Some(v) => Some(v.parse::<f64>().map_err(|e| {
                Error::Config(format!("key `grad_clip`: bad value `{v}`: {e}"))
            })?),
        };

        let train = TrainConfig {
            arch,
            beta: kv.parse_req("beta")?,
            learning_rate: kv.parse_req("learning_rate")?,
            batch_size: kv.parse_req("batch_size")?,
            epochs: kv.parse_req("epochs")?,
            adam_beta1: kv.parse_or("adam_beta1", 0.9)?,
            adam_beta2: kv.parse_or("adam_beta2", 0.999)?,
            adam_epsilon: kv.parse_or("adam_epsilon", 1e-8)?,
            grad_clip,
            seed,
            provenance: String::new(),
        };
        kv.finish()?;

        let mut cfg = RunConfig { dataset, train };
        cfg.train.validate()?;
        cfg.train.provenance = cfg.to_text();
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text_with_overrides(&text, overrides)
    }

    /// Canonical text: parsing it reproduces this config exactly, including
    /// the copy embedded as checkpoint provenance.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        match &self.dataset {
            DatasetConfig::Mnist {
                dir,
                train_subset,
                test_subset,
            } => {
                kv("dataset", "mnist".into());
                kv("mnist_dir", dir.display().to_string());
                if let Some(n) = train_subset {
                    kv("train_subset", n.to_string());
                }
                if let Some(n) = test_subset {
                    kv("test_subset", n.to_string());
                }
            }
            DatasetConfig::Synthetic {
                spec,
                test_per_cell,
                cache,
            } => {
                kv("dataset", "synthetic".into());
                kv("num_domains", spec.num_domains.to_string());
                kv("num_styles", spec.num_styles.to_string());
                kv("image_size", spec.image_size.to_string());
                kv("samples_per_cell", spec.samples_per_cell.to_string());
                kv("test_per_cell", test_per_cell.to_string());
                kv("data_seed", spec.seed.to_string());
                if let Some(p) = cache {
                    kv("cache", p.display().to_string());
                }
            }
        }
        let arch = &self.train.arch;
        kv(
            "channels",
            arch.conv_channels
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("kernel", arch.kernel.to_string());
        kv("stride", arch.stride.to_string());
        kv("dim_l", arch.dim_l.to_string());
        kv("dim_u", arch.dim_u.to_string());
        kv("beta", self.train.beta.to_string());
        kv("learning_rate", self.train.learning_rate.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("adam_beta1", self.train.adam_beta1.to_string());
        kv("adam_beta2", self.train.adam_beta2.to_string());
        kv("adam_epsilon", self.train.adam_epsilon.to_string());
        if let Some(c) = self.train.grad_clip {
            kv("grad_clip", c.to_string());
        }
        kv("seed", self.train.seed.to_string());
        s
    }
}

/// Materialize the train/test datasets a config describes.
///
/// For synthetic data with a cache path: an existing cache is loaded (and its
/// hash and spec verified — corruption is an error, not a silent regenerate),
/// a missing one is rendered and then written.
pub fn load_dataset(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    match cfg {
        DatasetConfig::Mnist {
            dir,
            train_subset,
            test_subset,
        } => {
            let (mut train, mut test) = load_mnist(dir)?;
            if let Some(n) = train_subset {
                train = train.take(*n);
            }
            if let Some(n) = test_subset {
                test = test.take(*n);
            }
            Ok((train, test))
        }
        DatasetConfig::Synthetic {
            spec,
            test_per_cell,
            cache,
        } => {
            if let Some(path) = cache {
                if path.exists() {
                    return load_synthetic_cache(path, spec);
                }
            }
            let (train, test) = generate_synthetic_split(spec, *test_per_cell)?;
            if let Some(path) = cache {
                save_synthetic_cache(path, spec, &train, &test)?;
            }
            Ok((train, test))
        }
    }
}

/// Number of classes a dataset config will produce, without loading it.
pub fn num_classes(cfg: &DatasetConfig) -> usize {
    match cfg {
        DatasetConfig::Mnist { .. } => 10,
        DatasetConfig::Synthetic { spec, .. } => spec.num_domains,
    }
}

/// Smallest usable synthetic config, handy for fast tests.
pub fn tiny_synthetic_text() -> String {
    [
        "dataset = synthetic",
        "num_domains = 2",
        "num_styles = 2",
        "image_size = 16",
        "samples_per_cell = 6",
        "test_per_cell = 2",
        "channels = 4,8",
        "dim_l = 6",
        "dim_u = 4",
        "beta = 0.001",
        "learning_rate = 0.001",
        "batch_size = 8",
        "epochs = 1",
        "seed = 7",
    ]
    .join("\n")
}
