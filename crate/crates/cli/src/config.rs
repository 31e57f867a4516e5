//! Run configuration: a preset, then the TOML file, then `--set`
//! overrides, then `--seed`.

use std::path::Path;

use clap::ValueEnum;
use p2p_core::data::synthetic::SyntheticSceneConfig;
use p2p_core::eval::{CvConfig, EmptyCropFallback, DEFAULT_SPARSITY_EDGES};
use p2p_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size networks and schedules.
    #[default]
    Default,
    /// Smaller point network, lighter clutter and a 40-epoch schedule that
    /// fits a single CPU core.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fallback: EmptyCropFallback,
    pub sparsity_edges: Vec<usize>,
    pub cv: CvConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fallback: EmptyCropFallback::default(),
            sparsity_edges: DEFAULT_SPARSITY_EDGES.to_vec(),
            cv: CvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seeds scene generation, initialization, sampling and inference.
    pub seed: u64,
    pub synthetic: SyntheticSceneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Default)
    }
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let (synthetic, train) = match preset {
            Preset::Default => (SyntheticSceneConfig::default(), TrainConfig::default()),
            Preset::Desk => (SyntheticSceneConfig::desk(), TrainConfig::desk()),
        };
        Self {
            preset,
            seed: 0,
            synthetic,
            train,
            eval: EvalConfig::default(),
        }
    }

    /// Resolves the layered configuration. `preset` on the command line
    /// wins over the file's `preset` key.
    pub fn load(
        file: Option<&Path>,
        preset: Option<Preset>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self, Usage> {
        let file_table: Table = match file {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| Usage(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let preset = match (preset, file_table.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.clone().try_into().map_err(|e| Usage(format!("preset: {e}")))?,
            (None, None) => Preset::Default,
        };
        let mut root = Value::try_from(Self::from_preset(preset)).map_err(|e| Usage(e.to_string()))?;
        merge(&mut root, Value::Table(file_table));
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Usage(format!("override `{o}` is not KEY=VALUE")))?;
            set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
        }
        if let Some(s) = seed {
            set_path(&mut root, "seed", Value::Integer(s as i64))?;
        }
        if let Some(t) = root.as_table_mut() {
            t.insert(
                "preset".into(),
                Value::try_from(preset).map_err(|e| Usage(e.to_string()))?,
            );
        }
        let mut cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Usage(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.synthetic.seed = cfg.seed;
        cfg.synthetic.validate().map_err(|e| Usage(e.to_string()))?;
        cfg.train.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
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

/// A TOML literal when it parses as one, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), Usage> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Usage(format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    Err(Usage(format!("empty key in `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "preset = \"desk\"\nseed = 4\n[train]\nepochs = 7\nlr = 0.01\n").unwrap();
        let cfg = RunConfig::load(Some(&path), None, &["train.epochs=3".into()], Some(9)).unwrap();
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.model.n_points, 256);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.synthetic.clutter_points_per_frame, 300);
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::load(
            None,
            Some(Preset::Desk),
            &["eval.fallback=constant_velocity".into()],
            None,
        )
        .unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.eval.fallback, EmptyCropFallback::ConstantVelocity);
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        assert!(RunConfig::load(None, None, &["train.epochs".into()], None).is_err());
        assert!(RunConfig::load(None, None, &["bogus=1".into()], None).is_err());
        assert!(RunConfig::load(None, None, &["train.batch_size=1".into()], None).is_err());
        assert!(RunConfig::load(None, None, &["seed.x=1".into()], None).is_err());
    }
}
