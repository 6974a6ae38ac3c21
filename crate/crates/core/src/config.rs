//! Run configuration read from TOML. Every key has a default, so an empty
//! document is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::imputer::ImputeConfig;
use crate::sampler::SamplerConfig;
use crate::vae::VaeConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub schema: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub vae: VaeConfig,
    pub diffusion: DiffusionConfig,
    pub sampler: SamplerConfig,
    pub imputer: ImputeConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.paths.schema,
                &mut cfg.paths.data,
                &mut cfg.paths.test,
                &mut cfg.paths.out,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.diffusion.validate()?;
        self.sampler.validate()?;
        self.imputer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SamplerMode;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.vae.d, 4);
        assert_eq!(cfg.vae.hidden, 128);
        assert_eq!(cfg.vae.beta_max, 0.01);
        assert_eq!(cfg.vae.beta_min, 1e-5);
        assert_eq!(cfg.vae.lambda, 0.7);
        assert_eq!(cfg.sampler.steps, 20);
    }

    #[test]
    fn sections_override() {
        let cfg = RunConfig::from_toml_str(
            "seed = 9\n[paths]\ndata = \"a.csv\"\n[vae]\nepochs = 3\n[sampler]\nmode = \"sde\"\nsteps = 50\n[imputer]\nresample = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.vae.epochs, 3);
        assert_eq!(cfg.sampler.mode, SamplerMode::Sde);
        assert_eq!(cfg.imputer.resample, 2);
        assert_eq!(cfg.paths.data.as_deref(), Some(Path::new("a.csv")));
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        for doc in [
            "[vae]\nd = 0",
            "[vae]\nbogus = 1",
            "seed = \"x\"",
            "[sampler]\nsteps = 0",
            "[[",
            "[imputer]\nresample = 0",
        ] {
            assert!(matches!(RunConfig::from_toml_str(doc), Err(Error::Config(_))), "{doc}");
        }
    }
}
