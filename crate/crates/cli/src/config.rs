//! Layered run configuration: profile defaults, then the TOML file, then
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crossloc_core::encoders::{EncoderConfig, Modality};
use crossloc_core::evaluation::Protocol;
use crossloc_core::losses::LossPreset;
use crossloc_core::training::{Paradigm, TrainConfig};

use crate::UsageError;

/// Named starting point the file and flags are layered on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Library defaults: NetVLAD heads, paper augmentation, step 1e-3.
    #[default]
    Default,
    /// Tuned for synthbench worlds: MLP heads, no augmentation, step 3e-3.
    Synthbench,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Standard.name().into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub runs_dir: Option<PathBuf>,
    pub regions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: Profile,
    /// Overrides `train.seed` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: Paths,
}

impl Config {
    pub fn for_profile(profile: Profile) -> Self {
        let (encoder, train) = match profile {
            Profile::Default => (EncoderConfig::default(), TrainConfig::default()),
            Profile::Synthbench => (
                EncoderConfig::synthbench(),
                TrainConfig::synthbench(Paradigm::Combined),
            ),
        };
        Self {
            profile,
            seed: None,
            encoder,
            train,
            eval: EvalSection::default(),
            paths: Paths::default(),
        }
    }

    /// Reads `path` (if any) over the defaults of the profile it names.
    pub fn load(path: Option<&Path>, profile: Option<Profile>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| UsageError(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let named = match file.get("profile") {
            Some(v) => Some(
                v.clone()
                    .try_into::<Profile>()
                    .map_err(|e| UsageError(format!("bad profile: {e}")))?,
            ),
            None => None,
        };
        let profile = profile.or(named).unwrap_or_default();
        let mut table = toml::Table::try_from(Self::for_profile(profile))
            .context("default config does not serialize")?;
        merge(&mut table, file);
        table.insert("profile".into(), toml::Value::try_from(profile)?);
        let cfg: Self = table
            .try_into()
            .map_err(|e| UsageError(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    /// Switches paradigm; a changed paradigm also resets the loss preset
    /// to the one that fits it.
    pub fn set_paradigm(&mut self, paradigm: Paradigm) {
        if self.train.paradigm == paradigm {
            return;
        }
        self.train.paradigm = paradigm;
        self.train.preset = match paradigm {
            Paradigm::TeacherStudent => LossPreset::TeacherStudent,
            Paradigm::Combined => LossPreset::SmCmJe,
        };
    }

    pub fn validate(&mut self) -> Result<()> {
        if let Some(s) = self.seed {
            self.train.seed = s;
        }
        self.encoder
            .validate()
            .map_err(|e| UsageError(format!("encoder config: {e}")))?;
        let (a, b) = (
            self.encoder.ev_len(Modality::Image),
            self.encoder.ev_len(Modality::Cloud),
        );
        if a != b {
            return Err(UsageError(format!(
                "image and cloud embeddings must have the same length K (got {a} and {b})"
            ))
            .into());
        }
        self.train
            .validate()
            .map_err(|e| UsageError(format!("train config: {e}")))?;
        self.protocol()?;
        Ok(())
    }

    pub fn protocol(&self) -> Result<Protocol> {
        Ok(self
            .eval
            .protocol
            .parse()
            .map_err(|e| UsageError(format!("{e}")))?)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("c.toml");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn missing_file_gives_profile_defaults() {
        let c = Config::load(None, None).unwrap();
        assert_eq!(c, Config::for_profile(Profile::Default));
        let s = Config::load(None, Some(Profile::Synthbench)).unwrap();
        assert_eq!(s.encoder, EncoderConfig::synthbench());
    }

    #[test]
    fn file_overrides_single_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "profile = \"synthbench\"\nseed = 9\n[train]\nepochs = 3\n[train.adam]\nlr = 0.01\n",
        );
        let mut c = Config::load(Some(&p), None).unwrap();
        c.validate().unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.train.seed, 9);
        // untouched fields keep the profile's values
        assert_eq!(c.encoder, EncoderConfig::synthbench());
        assert_eq!(c.train.adam.beta1, 0.9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            "bogus = 1\n",
            "[eval]\nprotocol = \"dense\"\n",
            "[train]\nmargin = -1.0\n",
        ] {
            let p = write(dir.path(), text);
            let err = Config::load(Some(&p), None).and_then(|mut c| c.validate().map(|_| c));
            let err = err.unwrap_err();
            assert!(
                err.downcast_ref::<UsageError>().is_some(),
                "{text}: {err:#}"
            );
        }
    }

    #[test]
    fn mismatched_embedding_lengths_are_rejected() {
        let mut c = Config::for_profile(Profile::Default);
        c.encoder.cloud_head = crossloc_core::encoders::HeadKind::Mlp;
        c.encoder.mlp_out = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn paradigm_switch_keeps_preset_consistent() {
        let mut c = Config::for_profile(Profile::Synthbench);
        c.set_paradigm(Paradigm::TeacherStudent);
        c.validate().unwrap();
        c.set_paradigm(Paradigm::Combined);
        c.validate().unwrap();
        assert_eq!(c.train.preset, LossPreset::SmCmJe);
    }
}
