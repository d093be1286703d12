//! Flat `key = value` run configuration. `[section]` headers prefix the keys
//! that follow them, so `[train]\nsteps = 5` and `train.steps = 5` agree.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vim_core::aggregation::{AggregationConfig, ProviderMode, Strategy, TopK, WeightSharing};
use vim_core::backbone::{Backbone, BackboneConfig};
use vim_core::tasks::TaskSpec;
use vim_core::training::{DownstreamOptions, OptimizerKind, TrainConfig};
use vim_core::vim_module::ModuleGeometry;
use vim_core::zoo::DEFAULT_MAX_MODULE_RATIO;

use crate::error::CliError;

/// Every accepted key with its default. Empty means "unset".
const DEFAULTS: &[(&str, &str)] = &[
    ("agg.share", "per-site"),
    ("agg.strategy", "ensemble"),
    ("agg.top_k", "all"),
    ("agg.weights", "vector"),
    ("backbone", ""),
    ("backbone.preset", "tiny"),
    ("backbone.seed", "0"),
    ("down.freeze_modules", "false"),
    ("down.freeze_zero_module", "false"),
    ("module.squeeze_ratio", "8"),
    ("sweep.axis", "zoo-size"),
    ("sweep.seeds", "3"),
    ("sweep.values", "1,2,4"),
    ("task", "cls-shape:v0"),
    ("task.classes", ""),
    ("task.seed", "0"),
    ("train.batch_size", "32"),
    ("train.eval_every", "0"),
    ("train.lr", "0.001"),
    ("train.optimizer", "adam"),
    ("train.seed", "0"),
    ("train.steps", "300"),
    ("train.train_size", "512"),
    ("train.val_size", "256"),
    ("train.weight_decay", "0"),
    ("train.weight_lr_scale", "1"),
    ("warmup.task", "pretext-rotation:v0"),
    ("zoo", ""),
    ("zoo.max_module_ratio", ""),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        let key = key.trim();
        if !self.values.contains_key(key) {
            return Err(CliError::Usage(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.into().trim().to_string());
        Ok(())
    }

    /// `KEY=VALUE`, as given to `--set`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        self.set(k, v)
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v).map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Makes file keys absolute so a saved configuration works from any
    /// working directory.
    pub fn absolutize_paths(&mut self) -> Result<(), CliError> {
        for key in ["backbone", "zoo"] {
            if let Some(p) = self.path(key) {
                let abs = std::path::absolute(&p).map_err(|e| CliError::io(&p, e))?;
                self.values.insert(key.to_string(), abs.display().to_string());
            }
        }
        Ok(())
    }

    /// The fully resolved configuration, one sorted `key = value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {v:?}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" | "" => Ok(false),
            other => Err(CliError::Usage(format!("config key {key}: expected true/false, got {other:?}"))),
        }
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            steps: self.parse("train.steps")?,
            batch_size: self.parse("train.batch_size")?,
            learning_rate: self.parse("train.lr")?,
            optimizer: self.get("train.optimizer").parse::<OptimizerKind>()?,
            weight_decay: self.parse("train.weight_decay")?,
            weight_lr_scale: self.parse("train.weight_lr_scale")?,
            seed: self.parse("train.seed")?,
            eval_every: self.parse("train.eval_every")?,
            train_size: self.parse("train.train_size")?,
            val_size: self.parse("train.val_size")?,
        })
    }

    pub fn aggregation(&self) -> Result<AggregationConfig, CliError> {
        Ok(AggregationConfig {
            strategy: self.get("agg.strategy").parse::<Strategy>()?,
            top_k: self.get("agg.top_k").parse::<TopK>()?,
            mode: self.get("agg.weights").parse::<ProviderMode>()?,
            sharing: self.get("agg.share").parse::<WeightSharing>()?,
        })
    }

    pub fn downstream_options(&self) -> Result<DownstreamOptions, CliError> {
        Ok(DownstreamOptions {
            freeze_modules: self.flag("down.freeze_modules")?,
            freeze_zero_module: self.flag("down.freeze_zero_module")?,
        })
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig, CliError> {
        Ok(BackboneConfig::preset(self.get("backbone.preset"))?)
    }

    /// The backbone file when one is configured, otherwise the preset's
    /// deterministic random initialization.
    pub fn backbone(&self) -> Result<Backbone, CliError> {
        match self.path("backbone") {
            Some(p) => Ok(Backbone::load(p)?),
            None => Ok(Backbone::build(self.backbone_config()?, self.parse("backbone.seed")?)?),
        }
    }

    pub fn task_spec(&self, key: &str, backbone: &BackboneConfig) -> Result<TaskSpec, CliError> {
        let mut spec = TaskSpec::parse(self.get(key), backbone.image_size, backbone.patch_size)?;
        spec = spec.with_seed(self.parse("task.seed")?);
        if key == "task" && !self.get("task.classes").is_empty() {
            spec = spec.with_classes(self.parse("task.classes")?);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn geometry(&self, backbone: &BackboneConfig) -> Result<ModuleGeometry, CliError> {
        Ok(ModuleGeometry::for_backbone(backbone, self.parse("module.squeeze_ratio")?)?)
    }

    pub fn max_module_ratio(&self) -> Result<f64, CliError> {
        if self.get("zoo.max_module_ratio").is_empty() {
            Ok(DEFAULT_MAX_MODULE_RATIO)
        } else {
            self.parse("zoo.max_module_ratio")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_flat_keys_agree() {
        let mut a = Config::default();
        a.merge_text("[train]\nsteps = 7  # short\n\n[agg]\nstrategy = reparam\n", "a").unwrap();
        let mut b = Config::default();
        b.merge_text("train.steps=7\nagg.strategy = reparam", "b").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train().unwrap().steps, 7);
        assert_eq!(a.aggregation().unwrap().strategy, Strategy::Reparam);
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut a = Config::default();
        a.set_pair("train.lr=0.003").unwrap();
        a.set("zoo", "/tmp/z.vimz").unwrap();
        let mut b = Config::default();
        b.merge_text(&a.to_text(), "config.txt").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let mut c = Config::default();
        assert!(matches!(c.set_pair("train.stepz=3"), Err(CliError::Usage(_))));
        assert!(matches!(c.merge_text("no equals sign", "x"), Err(CliError::Usage(_))));
        c.set("train.steps", "many").unwrap();
        assert!(c.train().is_err());
    }
}
