//! Flat `key=value` run configuration with named profiles and overrides.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. A
//! `profile = name` line applies that profile's values at that point, so
//! later lines override it.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "SLOTGRAPH_SEED";
pub const PROFILES: [&str; 3] = ["atis", "snips", "toy"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_dir: Option<PathBuf>,
    pub dev_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub train_dep: Option<PathBuf>,
    pub dev_dep: Option<PathBuf>,
    pub test_dep: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_profile(name)?;
        Ok(c)
    }

    pub fn apply_profile(&mut self, name: &str) -> Result<()> {
        let values: &[(&str, &str)] = match name {
            "atis" => &[
                ("gamma", "0.6"),
                ("batch_size", "16"),
                ("lr", "1e-5"),
                ("gat_heads", "4"),
                ("gat_dropout", "0.4"),
                ("d_g", "256"),
            ],
            "snips" => &[
                ("gamma", "0.5"),
                ("batch_size", "14"),
                ("lr", "1e-5"),
                ("gat_heads", "2"),
                ("gat_dropout", "0.5"),
                ("d_g", "512"),
            ],
            "toy" => &[
                ("d", "32"),
                ("d_g", "32"),
                ("gat_heads", "2"),
                ("gat_dropout", "0"),
                ("encoder_layers", "1"),
                ("encoder_heads", "2"),
                ("ffn_dim", "64"),
                ("gamma", "0.5"),
                ("batch_size", "8"),
                ("lr", "1e-2"),
                ("epochs", "300"),
            ],
            other => {
                return Err(Error::Config(format!(
                    "unknown profile `{other}` (expected one of {})",
                    PROFILES.join(", ")
                )))
            }
        };
        for (k, v) in values {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Sets one key. `seed` sets both the initialization and training seeds.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        let path = || Some(PathBuf::from(value));
        match key {
            "profile" => return self.apply_profile(value),
            "seed" => {
                self.model.set("seed", value)?;
                self.train.set("train_seed", value)?;
                return Ok(());
            }
            "train_dir" => self.train_dir = path(),
            "dev_dir" => self.dev_dir = path(),
            "test_dir" => self.test_dir = path(),
            "train_dep" => self.train_dep = path(),
            "dev_dep" => self.dev_dep = path(),
            "test_dep" => self.test_dep = path(),
            "descriptions" => self.descriptions = path(),
            "checkpoint" => self.checkpoint = path(),
            "output" => self.output = path(),
            _ => {
                if !self.model.set(key, value)? && !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(c)
    }

    /// Applies the seed environment override when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            self.set("seed", &seed)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every setting, one `key=value` per line, in a form `apply_text` reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.pairs().into_iter().chain(self.train.pairs()) {
            out.push_str(&format!("{k}={v}\n"));
        }
        let paths = [
            ("train_dir", &self.train_dir),
            ("dev_dir", &self.dev_dir),
            ("test_dir", &self.test_dir),
            ("train_dep", &self.train_dep),
            ("dev_dep", &self.dev_dep),
            ("test_dep", &self.test_dep),
            ("descriptions", &self.descriptions),
            ("checkpoint", &self.checkpoint),
            ("output", &self.output),
        ];
        for (k, v) in paths {
            if let Some(p) = v {
                out.push_str(&format!("{k}={}\n", p.display()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atis_profile() {
        let c = RunConfig::profile("atis").unwrap();
        assert_eq!(c.train.gamma, 0.6);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.lr, 1e-5);
        assert_eq!(c.model.gat_heads, 4);
        assert_eq!(c.model.gat_dropout, 0.4);
        assert_eq!(c.model.d_g, 256);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn snips_profile() {
        let c = RunConfig::profile("snips").unwrap();
        assert_eq!(c.train.gamma, 0.5);
        assert_eq!(c.train.batch_size, 14);
        assert_eq!(c.train.lr, 1e-5);
        assert_eq!(c.model.gat_heads, 2);
        assert_eq!(c.model.gat_dropout, 0.5);
        assert_eq!(c.model.d_g, 512);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nprofile = snips\n\nbatch_size=3\nseed=7\ntrain_dir=data/x\n").unwrap();
        assert_eq!((c.train.batch_size, c.train.gamma), (3, 0.5));
        assert_eq!((c.model.seed, c.train.seed), (7, 7));
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(c.set_pair("nope=1").is_err());
        assert!(c.set_pair("gamma").is_err());
        assert!(c.apply_text("epochs=ten").is_err());
        assert!(RunConfig::profile("other").is_err());
    }
}
