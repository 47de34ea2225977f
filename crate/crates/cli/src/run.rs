//! Everything a training run needs beyond [`TrainConfig`]: architecture and
//! data source. A manifest is this config rendered with every key resolved,
//! so feeding one back as `--config` repeats the run.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use jrlab::config::{parse_value, render_kv, unknown_key, KeyValues};
use jrlab::data::{load_mnist_dir, mnist_present, synthetic_blobs, Dataset, SyntheticConfig};
use jrlab::train::TrainConfig;
use jrlab::{Activation, Mlp};

pub const DATA_ENV: &str = "JRLAB_DATA_DIR";

pub const RUN_KEYS: &[&str] = &["hidden", "activation", "data", "synthetic_train", "synthetic_test", "synthetic_seed"];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// MNIST if `JRLAB_DATA_DIR` holds it, otherwise synthetic.
    Auto,
    Synthetic,
    Mnist(PathBuf),
}

impl DataSource {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => DataSource::Auto,
            "synthetic" => DataSource::Synthetic,
            other => match other.strip_prefix("mnist:") {
                Some(dir) => DataSource::Mnist(PathBuf::from(dir)),
                None if other == "mnist" => match std::env::var_os(DATA_ENV) {
                    Some(dir) => DataSource::Mnist(PathBuf::from(dir)),
                    None => bail!("data = mnist needs {DATA_ENV} or the form mnist:<dir>"),
                },
                None => bail!("unknown data source {other:?}; expected auto, synthetic, mnist or mnist:<dir>"),
            },
        })
    }

    pub fn render(&self) -> String {
        match self {
            DataSource::Auto => "auto".into(),
            DataSource::Synthetic => "synthetic".into(),
            DataSource::Mnist(p) => format!("mnist:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub data: DataSource,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            hidden: vec![128, 64],
            activation: Activation::Tanh,
            data: DataSource::Auto,
            synthetic: SyntheticConfig::default(),
        }
    }
}

pub fn all_keys() -> Vec<&'static str> {
    TrainConfig::KEYS.iter().chain(RUN_KEYS).copied().collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|w| parse_value(key, w.trim())).collect::<Result<_, _>>()?
                }
            }
            "activation" => self.activation = Activation::parse(value)?,
            "data" => self.data = DataSource::parse(value)?,
            "synthetic_train" => self.synthetic.train = parse_value(key, value)?,
            "synthetic_test" => self.synthetic.test = parse_value(key, value)?,
            "synthetic_seed" => self.synthetic.seed = parse_value(key, value)?,
            k if TrainConfig::KEYS.contains(&k) => self.train.set(k, value)?,
            other => return Err(unknown_key(other, &all_keys()).into()),
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv {
            self.set(k, v).with_context(|| format!("config key {k}"))?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> String {
        let hidden = self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        let mut pairs = self.train.to_kv();
        pairs.extend([
            ("hidden", hidden),
            ("activation", self.activation.name().to_string()),
            ("data", self.data.render()),
            ("synthetic_train", self.synthetic.train.to_string()),
            ("synthetic_test", self.synthetic.test.to_string()),
            ("synthetic_seed", self.synthetic.seed.to_string()),
        ]);
        render_kv(pairs)
    }

    /// Pins `Auto` to whichever source is actually available.
    pub fn resolve_data(&mut self) {
        if self.data == DataSource::Auto {
            self.data = match std::env::var_os(DATA_ENV).map(PathBuf::from) {
                Some(dir) if mnist_present(&dir) => DataSource::Mnist(dir),
                _ => {
                    eprintln!("note: no MNIST under ${DATA_ENV}; using the synthetic blob dataset");
                    DataSource::Synthetic
                }
            };
        }
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Auto => bail!("data source not resolved"),
            DataSource::Synthetic => Ok(synthetic_blobs(&self.synthetic)?),
            DataSource::Mnist(dir) => load_mnist_dir(dir).with_context(|| format!("loading MNIST from {}", dir.display())),
        }
    }

    pub fn model_dims(&self, inputs: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![inputs];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }

    pub fn init_model(&self, inputs: usize, classes: usize) -> Result<Mlp> {
        Ok(Mlp::xavier_uniform_hidden(&self.model_dims(inputs, classes), self.activation, self.train.seed)?)
    }
}
