//! Run configuration: built-in profiles, TOML files and `key=value` overrides.
//!
//! A config file is a TOML table merged over a profile. The optional top-level
//! `profile` key picks the base (`"toy"` when absent); every other key overrides
//! the corresponding profile field, so files only need to list what they change.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::BackboneConfig;
use crate::data::{Normalization, SyntheticSpec};
use crate::error::{Error, Result};
use crate::finetune::ScheduleConfig;
use crate::head::{HeadConfig, TokenMode};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::reid::EvalOptions;

pub const PROFILES: [&str; 2] = ["toy", "paper"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSettings {
    /// Blockwise fine-tuning; when false every block is trainable from the start.
    pub blockwise: bool,
    pub epochs_per_unfreeze: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub train_stem: bool,
    /// Require `epochs >= epochs_per_unfreeze * num_blocks`.
    pub require_full_unfreeze: bool,
}

/// Exactly one of `synthetic` and `directory` must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Root of a Market-1501-style tree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// Placeholder statistics: mean/std 0.5 by default; ImageNet values suit real photographs.
    #[serde(default)]
    pub normalization: Normalization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub max_rank: usize,
    pub exclude_same_camera: bool,
    /// Evaluate every this many epochs (the last epoch is always evaluated); 0 disables.
    pub every: usize,
    /// Report the checkpoint with the best validation rank-1 instead of the last one.
    pub select_best: bool,
}

impl EvalSettings {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            max_rank: self.max_rank,
            exclude_same_camera: self.exclude_same_camera,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub schedule: ScheduleSettings,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub data: DataSettings,
    pub training: TrainingSettings,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
    /// Single-threaded execution.
    #[serde(default)]
    pub deterministic: bool,
}

impl RunConfig {
    /// 224×224 input, 16×16 patches, ViT-Base, 14 rows, 751 identities.
    pub fn paper() -> Self {
        Self {
            backbone: BackboneConfig::vit_base(),
            head: HeadConfig {
                grid_rows: 14,
                grid_cols: 14,
                lambda: 0.8,
                embed_dim: 768,
                num_classes: 751,
                fc_hidden_dim: 512,
                token_mode: TokenMode::Gelt,
            },
            schedule: ScheduleSettings {
                blockwise: true,
                epochs_per_unfreeze: 2,
                initial_lr: 3e-5,
                lr_decay: 0.8,
                train_stem: false,
                require_full_unfreeze: false,
            },
            optimizer: AdamConfig::default(),
            data: DataSettings {
                synthetic: None,
                directory: Some(PathBuf::from("data/market1501")),
                normalization: Normalization::imagenet(),
            },
            training: TrainingSettings {
                batch_size: 32,
                epochs: 30,
                seed: 0,
            },
            eval: EvalSettings {
                max_rank: 10,
                exclude_same_camera: true,
                every: 1,
                select_best: false,
            },
            output_dir: PathBuf::from("runs/paper"),
            deterministic: false,
        }
    }

    /// 32×32 input, 8×8 patches, D=16, two blocks, a 4×4 grid, synthetic data.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            head: HeadConfig {
                grid_rows: 4,
                grid_cols: 4,
                lambda: 0.8,
                embed_dim: 16,
                num_classes: 8,
                fc_hidden_dim: 32,
                token_mode: TokenMode::Gelt,
            },
            schedule: ScheduleSettings {
                blockwise: true,
                epochs_per_unfreeze: 2,
                initial_lr: 3e-3,
                lr_decay: 0.8,
                train_stem: false,
                require_full_unfreeze: false,
            },
            optimizer: AdamConfig::default(),
            data: DataSettings {
                synthetic: Some(SyntheticSpec::toy()),
                directory: None,
                normalization: Normalization::default(),
            },
            training: TrainingSettings {
                batch_size: 16,
                epochs: 60,
                seed: 0,
            },
            eval: EvalSettings {
                max_rank: 10,
                exclude_same_camera: true,
                every: 5,
                select_best: false,
            },
            output_dir: PathBuf::from("runs/toy"),
            deterministic: false,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(vec![format!(
                "unknown profile {other:?}; expected one of {PROFILES:?}"
            )])),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            epochs_per_unfreeze: self.schedule.epochs_per_unfreeze,
            num_blocks: self.backbone.num_blocks,
            initial_lr: self.schedule.initial_lr,
            lr_decay: self.schedule.lr_decay,
            total_epochs: self.training.epochs,
            train_stem: self.schedule.train_stem,
        }
    }

    /// Every inconsistency, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model().problems();
        out.extend(self.schedule_config().problems());
        let s = &self.schedule;
        if s.blockwise && s.require_full_unfreeze {
            let needed = s.epochs_per_unfreeze * self.backbone.num_blocks;
            if self.training.epochs < needed {
                out.push(format!(
                    "training.epochs {} < epochs_per_unfreeze × num_blocks = {needed} while full unfreezing is required",
                    self.training.epochs
                ));
            }
        }
        let b = &self.optimizer;
        if !(0.0..1.0).contains(&b.beta1) || !(0.0..1.0).contains(&b.beta2) {
            out.push(format!("optimizer betas must lie in [0, 1), got {} and {}", b.beta1, b.beta2));
        }
        if !(b.eps > 0.0) {
            out.push(format!("optimizer.eps must be positive, got {}", b.eps));
        }
        if self.training.batch_size < 2 {
            out.push(format!(
                "training.batch_size must be at least 2 for batch norm, got {}",
                self.training.batch_size
            ));
        }
        if self.eval.max_rank == 0 {
            out.push("eval.max_rank must be at least 1".into());
        }
        out.extend(self.data.normalization.problems());
        match (&self.data.synthetic, &self.data.directory) {
            (Some(_), Some(_)) => out.push("data: set only one of synthetic and directory".into()),
            (None, None) => out.push("data: set one of synthetic or directory".into()),
            (Some(spec), None) => {
                out.extend(spec.problems());
                if (spec.height, spec.width) != (self.backbone.image_height, self.backbone.image_width) {
                    out.push(format!(
                        "synthetic images are {}×{} but the backbone expects {}×{}",
                        spec.height, spec.width, self.backbone.image_height, self.backbone.image_width
                    ));
                }
                if spec.num_identities != self.head.num_classes {
                    out.push(format!(
                        "synthetic.num_identities {} differs from head.num_classes {}",
                        spec.num_identities, self.head.num_classes
                    ));
                }
            }
            (None, Some(_)) => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Profile (from the file's `profile` key, else `default_profile`), then the
    /// file, then `key=value` overrides; validated.
    pub fn load(path: Option<&Path>, default_profile: &str, overrides: &[String]) -> Result<Self> {
        let mut file = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(vec![format!("{}: {e}", p.display())]))?
            }
            None => Table::new(),
        };
        let profile = match file.remove("profile") {
            Some(Value::String(s)) => s,
            Some(other) => return Err(Error::Config(vec![format!("profile must be a string, got {other}")])),
            None => default_profile.to_string(),
        };
        let mut tree = to_table(&Self::profile(&profile)?)?;
        merge(&mut tree, file);
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// This config with `key=value` overrides applied; validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = to_table(self)?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    match Value::try_from(cfg).map_err(|e| Error::Config(vec![e.to_string()]))? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("a struct serializes to a table"),
    }
}

/// Recursive merge; tables merge key by key, anything else replaces.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is parsed as TOML, falling back to a bare string.
pub fn apply_override(tree: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override {assignment:?} is not key=value")]))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(vec![format!("override key {key:?} is malformed")]));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(vec![format!("override key {key:?}: {part} is not a table")])),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        for name in PROFILES {
            let cfg = RunConfig::profile(name).unwrap();
            assert_eq!(cfg.problems(), Vec::<String>::new(), "{name}");
        }
        assert!(RunConfig::profile("huge").is_err());
    }

    #[test]
    fn paper_profile_constants() {
        let c = RunConfig::paper();
        assert_eq!((c.backbone.image_height, c.backbone.kernel_height, c.backbone.stride), (224, 16, 16));
        assert_eq!((c.backbone.embed_dim, c.backbone.num_blocks), (768, 12));
        assert_eq!((c.head.grid_rows, c.head.lambda), (14, 0.8));
        assert_eq!((c.training.epochs, c.training.batch_size), (30, 32));
        assert_eq!(c.model().head.embedding_dim(), 10752);
    }

    #[test]
    fn file_and_overrides_merge_over_profile() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "profile = \"toy\"\n[training]\nepochs = 7\n[head]\nlambda = 0.5\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            "paper",
            &["training.seed=42".into(), "head.token_mode=local_only".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.training.epochs, 7);
        assert_eq!(cfg.training.seed, 42);
        assert_eq!(cfg.head.lambda, 0.5);
        assert_eq!(cfg.head.token_mode, TokenMode::LocalOnly);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.backbone, BackboneConfig::toy());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::toy();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, "toy", &["head.lamda=0.3".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn with(f: impl FnOnce(&mut RunConfig)) -> Vec<String> {
        let mut c = RunConfig::toy();
        f(&mut c);
        c.problems()
    }

    #[test]
    fn negative_table() {
        let cases: Vec<(&str, Box<dyn FnOnce(&mut RunConfig)>)> = vec![
            ("lambda", Box::new(|c| c.head.lambda = -0.1)),
            ("grid", Box::new(|c| c.head.grid_rows = 2)),
            ("embed_dim", Box::new(|c| c.head.embed_dim = 8)),
            ("heads", Box::new(|c| c.backbone.num_heads = 3)),
            ("square", Box::new(|c| {
                c.backbone.image_width = 64;
                c.data.synthetic.as_mut().unwrap().width = 64;
            })),
            ("stride geometry", Box::new(|c| c.backbone.stride = 5)),
            ("t", Box::new(|c| c.schedule.epochs_per_unfreeze = 0)),
            ("lr", Box::new(|c| c.schedule.initial_lr = 0.0)),
            ("decay", Box::new(|c| c.schedule.lr_decay = 1.5)),
            ("full unfreeze", Box::new(|c| {
                c.schedule.require_full_unfreeze = true;
                c.training.epochs = 3;
            })),
            ("batch", Box::new(|c| c.training.batch_size = 1)),
            ("beta", Box::new(|c| c.optimizer.beta1 = 1.0)),
            ("max_rank", Box::new(|c| c.eval.max_rank = 0)),
            ("norm", Box::new(|c| c.data.normalization.std = [0.0, 1.0, 1.0])),
            ("two sources", Box::new(|c| c.data.directory = Some("x".into()))),
            ("no source", Box::new(|c| c.data.synthetic = None)),
            ("synthetic size", Box::new(|c| c.data.synthetic.as_mut().unwrap().height = 16)),
            ("synthetic classes", Box::new(|c| c.head.num_classes = 9)),
        ];
        for (name, f) in cases {
            assert!(!with(f).is_empty(), "{name} accepted");
        }
    }

    #[test]
    fn all_problems_reported_at_once() {
        let p = with(|c| {
            c.head.lambda = -1.0;
            c.training.batch_size = 0;
            c.eval.max_rank = 0;
        });
        assert_eq!(p.len(), 3, "{p:?}");
    }
}
