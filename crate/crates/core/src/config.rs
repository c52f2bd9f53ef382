//! `key = value` run configuration covering training, model and corpus.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nets::GeneratorConfig;
use crate::sparsity::SparsityConfig;
use crate::synth::CorpusSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub sparsity_steps: usize,
    /// Defaults to twice the latent channels.
    pub sparsity_atoms: Option<usize>,
    pub sparsity_theta: f64,
    pub sparsity_lambda: f64,
    pub corpus: CorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::desk();
        let sp = SparsityConfig::for_latent(generator.latent_channels);
        RunConfig {
            train: TrainConfig::default(),
            generator,
            sparsity_steps: sp.steps,
            sparsity_atoms: None,
            sparsity_theta: sp.theta_init,
            sparsity_lambda: sp.lambda,
            corpus: CorpusSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::arg(format!("{key}: cannot parse {value:?}")))
}

pub const KEYS: &[&str] = &[
    "mode",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "lambda_re",
    "lambda_adv",
    "lambda_sp",
    "input_side",
    "latent_channels",
    "base_channels",
    "sparsity_steps",
    "sparsity_atoms",
    "sparsity_theta",
    "sparsity_lambda",
    "train_normal",
    "val_normal",
    "val_anomalous",
    "test_normal",
    "test_anomalous",
    "side",
    "layers_min",
    "layers_max",
    "speckle_sigma",
    "lesion_radius_min",
    "lesion_radius_max",
    "intensity_delta",
    "master_seed",
];

impl RunConfig {
    pub fn sparsity(&self) -> SparsityConfig {
        SparsityConfig {
            steps: self.sparsity_steps,
            atoms: self.sparsity_atoms.unwrap_or(2 * self.generator.latent_channels),
            theta_init: self.sparsity_theta,
            lambda: self.sparsity_lambda,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (t, g, c) = (&mut self.train, &mut self.generator, &mut self.corpus);
        match key {
            "mode" => t.mode = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "lambda_re" => t.lambda_re = parse(key, value)?,
            "lambda_adv" => t.lambda_adv = parse(key, value)?,
            "lambda_sp" => t.lambda_sp = parse(key, value)?,
            "input_side" => g.input_side = parse(key, value)?,
            "latent_channels" => g.latent_channels = parse(key, value)?,
            "base_channels" => g.base_channels = parse(key, value)?,
            "sparsity_steps" => self.sparsity_steps = parse(key, value)?,
            "sparsity_atoms" => self.sparsity_atoms = Some(parse(key, value)?),
            "sparsity_theta" => self.sparsity_theta = parse(key, value)?,
            "sparsity_lambda" => self.sparsity_lambda = parse(key, value)?,
            "train_normal" => c.train_normal = parse(key, value)?,
            "val_normal" => c.val_normal = parse(key, value)?,
            "val_anomalous" => c.val_anomalous = parse(key, value)?,
            "test_normal" => c.test_normal = parse(key, value)?,
            "test_anomalous" => c.test_anomalous = parse(key, value)?,
            "side" => c.side = parse(key, value)?,
            "layers_min" => c.layers_min = parse(key, value)?,
            "layers_max" => c.layers_max = parse(key, value)?,
            "speckle_sigma" => c.speckle_sigma = parse(key, value)?,
            "lesion_radius_min" => c.lesion_radius_min = parse(key, value)?,
            "lesion_radius_max" => c.lesion_radius_max = parse(key, value)?,
            "intensity_delta" => c.intensity_delta = parse(key, value)?,
            "master_seed" => c.master_seed = parse(key, value)?,
            _ => return Err(Error::arg(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::arg(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        self.sparsity().validate()?;
        self.corpus.validate()
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (t, g, c) = (&self.train, &self.generator, &self.corpus);
        Ok(match key {
            "mode" => t.mode.to_string(),
            "seed" => t.seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "beta1" => t.beta1.to_string(),
            "lambda_re" => t.lambda_re.to_string(),
            "lambda_adv" => t.lambda_adv.to_string(),
            "lambda_sp" => t.lambda_sp.to_string(),
            "input_side" => g.input_side.to_string(),
            "latent_channels" => g.latent_channels.to_string(),
            "base_channels" => g.base_channels.to_string(),
            "sparsity_steps" => self.sparsity_steps.to_string(),
            "sparsity_atoms" => self.sparsity().atoms.to_string(),
            "sparsity_theta" => self.sparsity_theta.to_string(),
            "sparsity_lambda" => self.sparsity_lambda.to_string(),
            "train_normal" => c.train_normal.to_string(),
            "val_normal" => c.val_normal.to_string(),
            "val_anomalous" => c.val_anomalous.to_string(),
            "test_normal" => c.test_normal.to_string(),
            "test_anomalous" => c.test_anomalous.to_string(),
            "side" => c.side.to_string(),
            "layers_min" => c.layers_min.to_string(),
            "layers_max" => c.layers_max.to_string(),
            "speckle_sigma" => c.speckle_sigma.to_string(),
            "lesion_radius_min" => c.lesion_radius_min.to_string(),
            "lesion_radius_max" => c.lesion_radius_max.to_string(),
            "intensity_delta" => c.intensity_delta.to_string(),
            "master_seed" => c.master_seed.to_string(),
            _ => return Err(Error::arg(format!("unknown config key {key:?}"))),
        })
    }

    /// Every effective value, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }
}
