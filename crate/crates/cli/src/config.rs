//! One key-value file configures a run; flags override single keys.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ihd_core::ensemble::SnapConfig;
use ihd_core::kv::KeyValues;
use ihd_core::model::ModelConfig;
use ihd_core::preprocess::PreprocessConfig;
use ihd_core::ssl::SslConfig;
use ihd_core::synth::{SplitFractions, SynthSpec};
use ihd_core::training::TrainConfig;

/// Configuration keys plus the command-line overrides applied on top.
pub struct RunConfig {
    pub kv: KeyValues,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>, sets: &[String]) -> Result<Self> {
        let mut kv = match path {
            Some(p) => KeyValues::read(p).with_context(|| format!("reading config {}", p.display()))?,
            None => KeyValues::parse("", "<defaults>")?,
        };
        for s in sets {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects key=value, got `{s}`");
            };
            kv.set(k.trim(), v.trim());
        }
        if let Some(seed) = seed {
            kv.set("seed", seed);
        }
        Ok(Self { kv })
    }

    pub fn set_if(&mut self, key: &str, value: Option<f64>) {
        if let Some(v) = value {
            self.kv.set(key, v);
        }
    }

    pub fn seed(&self) -> Result<u64> {
        Ok(self.kv.get_or("seed", 0u64)?)
    }

    /// The run seed also initializes the model unless `init_seed` is given.
    pub fn model(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut c = ModelConfig::from_kv(&self.kv, base)?;
        if !self.kv.contains("init_seed") {
            c.init_seed = self.seed()?;
        }
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig::from_kv(&self.kv, &TrainConfig::default())?)
    }

    pub fn ssl(&self) -> Result<SslConfig> {
        Ok(SslConfig::from_kv(&self.kv, &SslConfig::default())?)
    }

    pub fn synth(&self) -> Result<SynthSpec> {
        Ok(SynthSpec::from_kv(&self.kv)?)
    }

    pub fn fractions(&self) -> Result<SplitFractions> {
        Ok(SplitFractions::new(
            self.kv.get_or("train_fraction", 0.6)?,
            self.kv.get_or("validation_fraction", 0.2)?,
            self.kv.get_or("unlabeled_fraction", 0.2)?,
        )?)
    }

    pub fn preprocess(&self) -> Result<PreprocessConfig> {
        Ok(PreprocessConfig::from_kv(&self.kv, &PreprocessConfig::with_size(32))?)
    }

    pub fn snap(&self) -> Result<SnapConfig> {
        let d = SnapConfig::default();
        Ok(SnapConfig {
            tau_h: self.kv.get_or("tau_h", d.tau_h)?,
            tau_l: self.kv.get_or("tau_l", d.tau_l)?,
            epsilon: self.kv.get_or("epsilon", d.epsilon)?,
        })
    }
}
