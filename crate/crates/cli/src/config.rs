//! Run configuration: one `key = value` file whose keys carry a section
//! prefix (`model.`, `train.`, `synth.`), plus `preset` and `synth.count`.

use std::fs;
use std::path::Path;

use cfbt_core::kv::{self, KvConfig, KvEntry};
use cfbt_core::synth::SynthConfig;
use cfbt_core::train::TrainConfig;
use cfbt_core::{CfbtError, ModelConfig, Result};

pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub synth_count: usize,
    /// `model.*` entries as given, replayed over a checkpoint's own config.
    pub model_overrides: Vec<KvEntry>,
}

impl RunConfig {
    /// Starts from `default_preset` (or a `preset` entry), then applies the
    /// file and the overrides in order. Unknown keys are errors.
    pub fn resolve(default_preset: &str, file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut entries = match file {
            Some(p) => kv::parse_file(p)?,
            None => Vec::new(),
        };
        for o in overrides {
            entries.push(kv::parse_override(o)?);
        }
        let preset = entries
            .iter()
            .rev()
            .find(|e| e.key == "preset")
            .map(|e| e.value.clone())
            .unwrap_or_else(|| default_preset.to_string());
        let mut cfg = Self {
            model: ModelConfig::preset(&preset)?,
            preset,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            synth_count: 8,
            model_overrides: Vec::new(),
        };
        for e in &entries {
            let known = match e.key.split_once('.') {
                _ if e.key == "preset" => true,
                Some(("synth", "count")) => {
                    cfg.synth_count = kv::value(&e.key, &e.value)?;
                    true
                }
                Some(("model", k)) => {
                    cfg.model_overrides.push(KvEntry {
                        key: k.to_string(),
                        ..e.clone()
                    });
                    cfg.model.apply(k, &e.value)?
                }
                Some(("train", k)) => cfg.train.apply(k, &e.value)?,
                Some(("synth", k)) => cfg.synth.apply(k, &e.value)?,
                _ => false,
            };
            if !known {
                return Err(kv::unknown_key(e));
            }
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset);
        for (prefix, entries) in [
            ("model", self.model.entries()),
            ("train", self.train.entries()),
            ("synth", self.synth.entries()),
        ] {
            for (k, v) in entries {
                out.push_str(&format!("{prefix}.{k} = {v}\n"));
            }
        }
        out.push_str(&format!("synth.count = {}\n", self.synth_count));
        out
    }

    pub fn write_snapshot(&self, dir: &Path, command: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CfbtError::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        let text = format!("# resolved configuration of `cfbt {command}`\n{}", self.to_kv_string());
        fs::write(&path, text).map_err(|e| CfbtError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefixed_keys_route_to_sections() {
        let sets = ["model.update_interval=25".to_string(), "train.batch_size=4".into(), "synth.frames=30".into()];
        let cfg = RunConfig::resolve("tiny", None, &sets, Some(9)).unwrap();
        assert_eq!(cfg.model.update_interval, 25);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.synth.frames, 30);
        assert_eq!((cfg.train.seed, cfg.synth.seed), (9, 9));
        assert_eq!(cfg.model_overrides.len(), 1);
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::resolve("desk", None, &["preset=tiny".into(), "train.base_lr=0.001".into()], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, cfg.to_kv_string()).unwrap();
        let again = RunConfig::resolve("desk", Some(&path), &[], None).unwrap();
        assert_eq!(again.to_kv_string(), cfg.to_kv_string());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["model.nope=1", "bogus=1", "train=3"] {
            let err = RunConfig::resolve("tiny", None, &[bad.to_string()], None).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}");
        }
    }
}
