//! Run configuration.
//!
//! Files are TOML restricted in practice to `key = value` lines with dotted
//! keys (`stage1.epochs = 200`); section headers work too. Every key is
//! typed and unknown keys are rejected. Missing keys keep their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ToyDatasetConfig;
use crate::net::NetConfig;
use crate::ot::{CostWeights, SinkhornConfig};
use crate::paths::PriorSpec;
use crate::sampler::SamplerConfig;
use crate::train::{StageConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Coverage threshold (Å).
    pub delta: f64,
    /// Drop hydrogens before alignment.
    pub heavy_only: bool,
    /// Generated conformers per reference conformer when `sample` is asked
    /// for a size relative to the reference set.
    pub ratio: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            delta: 0.5,
            heavy_only: false,
            ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardConfig {
    pub divergence_factor: f64,
    pub window: usize,
}

impl Default for GuardConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        GuardConfig {
            divergence_factor: t.divergence_factor,
            window: t.guard_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub net: NetConfig,
    pub prior: PriorSpec,
    pub sinkhorn: SinkhornConfig,
    pub cost: CostWeights,
    pub guard: GuardConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub sampler: SamplerConfig,
    pub toy: ToyDatasetConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            net: NetConfig::default(),
            prior: PriorSpec::default(),
            sinkhorn: SinkhornConfig::default(),
            cost: CostWeights::default(),
            guard: GuardConfig::default(),
            stage1: StageConfig::new(1),
            stage2: StageConfig::new(2),
            stage3: StageConfig::new(3),
            sampler: SamplerConfig::default(),
            toy: ToyDatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Overlays `patch` onto `base`, table by table.
fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Config {
    /// Parses configuration text on top of the defaults. `source` names the
    /// file in error messages.
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        let patch: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_error(source, text, &e))?;
        let mut merged = toml::Value::try_from(Config::default()).expect("defaults serialize");
        merge(&mut merged, toml::Value::Table(patch));
        let text = toml::to_string(&merged).expect("merged table serializes");
        let config: Config = toml::from_str(&text).map_err(|e| Error::Parse {
            location: source.to_string(),
            message: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Config::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Points every random stream at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.net.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.stage3.seed = seed;
        self.sampler.seed = seed;
        self.toy.seed = seed;
    }

    pub fn stage(&self, k: u8) -> Result<&StageConfig> {
        match k {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            3 => Ok(&self.stage3),
            _ => Err(Error::validation(format!("stage must be 1, 2 or 3, got {k}"))),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            prior: self.prior.clone(),
            sinkhorn: self.sinkhorn,
            cost_weights: self.cost,
            divergence_factor: self.guard.divergence_factor,
            guard_window: self.guard.window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train_options().validate()?;
        for (k, s) in [(1, &self.stage1), (2, &self.stage2), (3, &self.stage3)] {
            if s.stage != k {
                return Err(Error::validation(format!("stage{k}.stage must be {k}, got {}", s.stage)));
            }
            s.validate()?;
        }
        self.sampler.validate()?;
        self.toy.validate()?;
        if !(self.eval.delta > 0.0) || self.eval.ratio == 0 {
            return Err(Error::validation("eval.delta must be positive and eval.ratio at least 1"));
        }
        Ok(())
    }
}

fn parse_error(source: &str, text: &str, e: &toml::de::Error) -> Error {
    let location = match e.span() {
        Some(span) => format!("{source}:{}", text[..span.start].matches('\n').count() + 1),
        None => source.to_string(),
    };
    Error::Parse {
        location,
        message: e.message().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::from_toml("", "t").unwrap(), Config::default());
    }

    #[test]
    fn flat_dotted_keys_override() {
        let c = Config::from_toml("stage1.epochs = 7\nsampler.method = \"rk4\"\nprior.sigma_torsion = 1.0\n", "t").unwrap();
        assert_eq!(c.stage1.epochs, 7);
        assert_eq!(c.stage2.epochs, 1);
        assert_eq!(c.sampler.method, crate::sampler::Method::Rk4);
        assert_eq!(c.prior.sigma_torsion, Some(1.0));
        assert_eq!(c.stage1.learning_rate, 1e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = Config::from_toml("stage1.epoch = 7\n", "cfg.toml").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("epoch"), "{e}");
        assert!(Config::from_toml("bogus = 1\n", "t").is_err());
    }

    #[test]
    fn wrong_types_are_rejected() {
        let e = Config::from_toml("stage1.epochs = \"many\"\n", "t").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn syntax_errors_name_the_line() {
        let e = Config::from_toml("net.hidden_dim = 4\nthis is not toml\n", "cfg.toml").unwrap_err();
        assert!(e.to_string().contains("cfg.toml:2"), "{e}");
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(Config::from_toml("stage2.stage = 3\n", "t").is_err());
        assert!(Config::from_toml("prior.sigma_rot = 0.0\n", "t").is_err());
        assert!(Config::from_toml("sampler.steps = 0\n", "t").is_err());
    }

    #[test]
    fn reseed_reaches_every_stream() {
        let mut c = Config::default();
        c.reseed(17);
        assert_eq!(
            [c.net.seed, c.stage1.seed, c.stage2.seed, c.stage3.seed, c.sampler.seed, c.toy.seed],
            [17; 6]
        );
    }

    #[test]
    fn roundtrips_through_text() {
        let mut c = Config::default();
        c.stage1.grad_clip = Some(5.0);
        c.prior.sigma_torsion = Some(0.8);
        assert_eq!(Config::from_toml(&c.to_toml(), "t").unwrap(), c);
    }
}
