//! Run configuration: defaults, then a `key = value` file, then overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ProposalConfig, SynthConfig};
use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::losses::ConditionMode;
use crate::model::{LossMode, TrainConfig};

/// Everything that affects a run's outputs. Paths are deliberately absent so
/// that two runs in different directories echo the same configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Governs data generation and training; copied into `train.seed`.
    pub seed: u64,
    pub threads: usize,
    pub synth: SynthConfig,
    pub proposals: ProposalConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            synth: SynthConfig::default(),
            proposals: ProposalConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

/// Values given on the command line. `None` leaves the file value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub loss: Option<LossMode>,
    pub condition_mode: Option<ConditionMode>,
    /// `section.key=value` assignments, applied after the file.
    pub set: Vec<String>,
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(origin, e.message().to_string()))
}

/// Parses the right-hand side of an assignment as a TOML value, falling back
/// to a bare string so `train.loss_mode=kl_l1` works unquoted.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn assign(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "expected key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(
        parts[parts.len() - 1].to_string(),
        parse_value(value.trim()),
    );
    Ok(())
}

impl RunConfig {
    /// Resolves defaults < `path` < `overrides`, then validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_table(&text, &p.display().to_string())?
            }
            None => toml::Table::new(),
        };
        for a in &overrides.set {
            assign(&mut table, a)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(t) = overrides.threads {
            cfg.threads = t;
        }
        if let Some(l) = overrides.loss {
            cfg.train.loss_mode = l;
        }
        if let Some(m) = overrides.condition_mode {
            cfg.train.condition_mode = m;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads", "must be ≥ 1"));
        }
        let prefix = |section: &'static str| {
            move |e: Error| match e {
                Error::Config { field, reason } => Error::Config {
                    field: format!("{section}.{field}"),
                    reason,
                },
                other => other,
            }
        };
        self.synth.validate().map_err(prefix("synth"))?;
        self.proposals.validate().map_err(prefix("proposals"))?;
        self.train.validate().map_err(prefix("train"))?;
        self.detect.validate().map_err(prefix("detect"))?;
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::resolve(None, &Overrides::default()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.threads, 1);
    }

    #[test]
    fn file_values_with_dotted_keys() {
        let f = file(
            "seed = 7\ntrain.lr = 0.001\ntrain.loss_mode = \"kl_l1\"\n[detect]\nnms_thr = 0.4\n",
        );
        let cfg = RunConfig::resolve(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.loss_mode, LossMode::KlL1);
        assert_eq!(cfg.detect.nms_thr, 0.4);
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn flags_beat_file_and_set_beats_file() {
        let f = file("seed = 7\ntrain.epochs = 3\n");
        let o = Overrides {
            seed: Some(9),
            loss: Some(LossMode::L1),
            condition_mode: Some(ConditionMode::Paper),
            set: vec![
                "train.epochs=5".into(),
                "train.loss_mode=expected_l1".into(),
            ],
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(f.path()), &o).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.loss_mode, LossMode::L1);
        assert_eq!(cfg.train.condition_mode, ConditionMode::Paper);
    }

    #[test]
    fn unknown_keys_are_named() {
        let f = file("train.lrr = 0.1\n");
        let err = RunConfig::resolve(Some(f.path()), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("lrr"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn invalid_values_name_their_section() {
        let o = Overrides {
            set: vec!["proposals.overlap=1.5".into()],
            ..Overrides::default()
        };
        let err = RunConfig::resolve(None, &o).unwrap_err();
        assert!(err.to_string().contains("proposals.overlap"), "{err}");
        let o = Overrides {
            threads: Some(0),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(None, &o).is_err());
    }

    #[test]
    fn malformed_file_is_a_config_error() {
        let f = file("train.lr = = 3\n");
        let err = RunConfig::resolve(Some(f.path()), &Overrides::default()).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_value(cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }
}
