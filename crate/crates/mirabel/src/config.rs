//! Flat TOML run configuration for the CLI.
//!
//! Precedence: command-line flag > config file > documented default.
//! Unknown keys are rejected so typos fail loudly.

use std::path::Path;

use serde::Deserialize;

use crate::attacksim::{AttackStyle, AttackerMode, SyntheticSpec, TrialCounts};
use crate::defense::DefenseConfig;
use crate::detector::ThresholdVariant;
use crate::error::{Error, Result};

/// Raw file contents; every field optional so a partial file works.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub topics: Option<usize>,
    pub docs_per_topic: Option<usize>,
    pub dim: Option<usize>,
    pub doc_token_len: Option<usize>,
    pub seed: Option<u64>,
    pub member_fraction: Option<f64>,
    pub rho: Option<f64>,
    pub variant: Option<String>,
    pub k: Option<usize>,
    pub defense: Option<bool>,
    pub attack_style: Option<String>,
    pub mask_tokens: Option<usize>,
    pub attacker_mode: Option<String>,
    pub member_trials: Option<usize>,
    pub non_member_trials: Option<usize>,
    pub benign_trials: Option<usize>,
    pub out_dir: Option<String>,
}

impl ConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: SyntheticSpec,
    pub defense: DefenseConfig,
    pub style: AttackStyle,
    pub mode: AttackerMode,
    pub counts: TrialCounts,
    pub out_dir: std::path::PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            spec: SyntheticSpec::default(),
            defense: DefenseConfig::default(),
            style: AttackStyle::default(),
            mode: AttackerMode::ContainTopK,
            counts: TrialCounts::default(),
            out_dir: std::path::PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Apply a config file on top of the defaults.
    pub fn with_file(file: &ConfigFile) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let ConfigFile {
            topics,
            docs_per_topic,
            dim,
            doc_token_len,
            seed,
            member_fraction,
            rho,
            variant,
            k,
            defense,
            attack_style,
            mask_tokens,
            attacker_mode,
            member_trials,
            non_member_trials,
            benign_trials,
            out_dir,
        } = file.clone();
        macro_rules! set {
            ($target:expr, $value:expr) => {
                if let Some(v) = $value {
                    $target = v;
                }
            };
        }
        set!(cfg.spec.topics, topics);
        set!(cfg.spec.docs_per_topic, docs_per_topic);
        set!(cfg.spec.dim, dim);
        set!(cfg.spec.doc_token_len, doc_token_len);
        set!(cfg.spec.seed, seed);
        set!(cfg.spec.member_fraction, member_fraction);
        set!(cfg.defense.rho, rho);
        if let Some(v) = variant {
            cfg.defense.variant = v.parse::<ThresholdVariant>()?;
        }
        set!(cfg.defense.k, k);
        set!(cfg.defense.enabled, defense);
        if let Some(s) = attack_style {
            cfg.style = s.parse::<AttackStyle>()?;
        }
        if let Some(m) = mask_tokens {
            match cfg.style {
                AttackStyle::Masked { .. } => cfg.style = AttackStyle::Masked { removed: m },
                _ => {
                    return Err(Error::Config(
                        "mask_tokens only applies to attack_style = \"masked\"".into(),
                    ))
                }
            }
        }
        if let Some(m) = attacker_mode {
            cfg.mode = m.parse::<AttackerMode>()?;
        }
        set!(cfg.counts.member, member_trials);
        set!(cfg.counts.non_member, non_member_trials);
        set!(cfg.counts.benign, benign_trials);
        if let Some(d) = out_dir {
            cfg.out_dir = d.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.defense.validate()
    }
}
