//! Run configuration: an optional TOML file plus command-line overrides,
//! resolved against the dataset manifest into concrete settings.
//!
//! Sections mirror the config types: `[model]`, `[train]`, `[contrastive]`.
//! Top-level keys carry the run plumbing (manifest, output directory, view
//! toggles, optional init checkpoint). Every field is optional; flags win
//! over file values, and anything still unset falls back to defaults. The
//! fully resolved configuration is echoed into the output directory so a
//! run can be reproduced from its artifacts alone.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ViewMode};
use crate::train::{ContrastiveConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub enable_cross_view: Option<bool>,
    pub enable_roi_view: Option<bool>,
    pub enable_conn_view: Option<bool>,
    pub pretrain_init: Option<PathBuf>,
    pub model: Option<ModelSection>,
    pub train: Option<TrainSection>,
    pub contrastive: Option<ContrastiveSection>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub m: Option<usize>,
    pub patch_size: Option<usize>,
    pub d_model: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_ratio: Option<usize>,
    pub layers: Option<usize>,
    pub num_classes: Option<usize>,
    pub fusion_every: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs_pretrain: Option<usize>,
    pub epochs_finetune: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSection {
    pub tau: Option<f64>,
    pub head_hidden: Option<usize>,
    pub head_out: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Command-line values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub init: Option<PathBuf>,
    pub no_cross_view: bool,
    pub roi_only: bool,
    pub conn_only: bool,
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out: Option<PathBuf>,
    pub mode: ViewMode,
    pub init: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
}

/// The manifest path must be known before anything else: the model's token
/// count and class count come from the dataset, not the config file.
pub fn manifest_path(file: &FileConfig, flags: &Overrides) -> Result<PathBuf> {
    flags
        .manifest
        .clone()
        .or_else(|| file.manifest.clone())
        .ok_or_else(|| Error::Config("no dataset manifest given (use --manifest or the config file)".into()))
}

impl RunConfig {
    pub fn resolve(
        file: &FileConfig,
        flags: &Overrides,
        roi_count: usize,
        num_classes: usize,
    ) -> Result<RunConfig> {
        let manifest = manifest_path(file, flags)?;
        let out = flags.out.clone().or_else(|| file.out.clone());
        let init = flags.init.clone().or_else(|| file.pretrain_init.clone());

        if flags.roi_only && flags.conn_only {
            return Err(Error::Config("--roi-only and --conn-only are mutually exclusive".into()));
        }
        let mut mode = ViewMode {
            roi: file.enable_roi_view.unwrap_or(true),
            conn: file.enable_conn_view.unwrap_or(true),
            cross: file.enable_cross_view.unwrap_or(true),
        };
        if flags.no_cross_view {
            mode.cross = false;
        }
        if flags.roi_only {
            mode = ViewMode::roi_only();
        }
        if flags.conn_only {
            mode = ViewMode::conn_only();
        }
        mode.validate()?;

        let ms = file.model.clone().unwrap_or_default();
        if let Some(m) = ms.m {
            if m != roi_count {
                return Err(Error::Config(format!(
                    "config sets m = {m} but the manifest has roi_count = {roi_count}"
                )));
            }
        }
        if let Some(c) = ms.num_classes {
            if c != num_classes {
                return Err(Error::Config(format!(
                    "config sets num_classes = {c} but the manifest has num_classes = {num_classes}"
                )));
            }
        }
        let defaults = ModelConfig::defaults_for(roi_count);
        let model = ModelConfig {
            m: roi_count,
            patch_size: ms.patch_size.unwrap_or(defaults.patch_size),
            d_model: ms.d_model.unwrap_or(defaults.d_model),
            num_heads: ms.num_heads.unwrap_or(defaults.num_heads),
            ffn_ratio: ms.ffn_ratio.unwrap_or(defaults.ffn_ratio),
            layers: ms.layers.unwrap_or(defaults.layers),
            num_classes,
            fusion_every: ms.fusion_every.unwrap_or(defaults.fusion_every),
        };
        model.validate()?;

        let ts = file.train.clone().unwrap_or_default();
        let td = TrainConfig::default();
        let train = TrainConfig {
            lr: ts.lr.unwrap_or(td.lr),
            momentum: ts.momentum.unwrap_or(td.momentum),
            batch_size: ts.batch_size.unwrap_or(td.batch_size),
            epochs_pretrain: ts.epochs_pretrain.unwrap_or(td.epochs_pretrain),
            epochs_finetune: ts.epochs_finetune.unwrap_or(td.epochs_finetune),
            lambda: flags.lambda.or(ts.lambda).unwrap_or(td.lambda),
            seed: flags.seed.or(ts.seed).unwrap_or(td.seed),
        };
        train.validate()?;

        let cs = file.contrastive.clone().unwrap_or_default();
        let cd = ContrastiveConfig::default();
        let contrastive = ContrastiveConfig {
            tau: cs.tau.unwrap_or(cd.tau),
            head_hidden: cs.head_hidden.unwrap_or(cd.head_hidden),
            head_out: cs.head_out.unwrap_or(cd.head_out),
        };
        contrastive.validate()?;

        Ok(RunConfig { manifest, out, mode, init, model, train, contrastive })
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given (use --out or the config file)".into()))
    }

    /// The resolved configuration as TOML, for the provenance echo.
    pub fn effective_toml(&self) -> String {
        let echo = FileConfig {
            manifest: Some(self.manifest.clone()),
            out: self.out.clone(),
            enable_cross_view: Some(self.mode.cross),
            enable_roi_view: Some(self.mode.roi),
            enable_conn_view: Some(self.mode.conn),
            pretrain_init: self.init.clone(),
            model: Some(ModelSection {
                m: Some(self.model.m),
                patch_size: Some(self.model.patch_size),
                d_model: Some(self.model.d_model),
                num_heads: Some(self.model.num_heads),
                ffn_ratio: Some(self.model.ffn_ratio),
                layers: Some(self.model.layers),
                num_classes: Some(self.model.num_classes),
                fusion_every: Some(self.model.fusion_every),
            }),
            train: Some(TrainSection {
                lr: Some(self.train.lr),
                momentum: Some(self.train.momentum),
                batch_size: Some(self.train.batch_size),
                epochs_pretrain: Some(self.train.epochs_pretrain),
                epochs_finetune: Some(self.train.epochs_finetune),
                lambda: Some(self.train.lambda),
                seed: Some(self.train.seed),
            }),
            contrastive: Some(ContrastiveSection {
                tau: Some(self.contrastive.tau),
                head_hidden: Some(self.contrastive.head_hidden),
                head_out: Some(self.contrastive.head_out),
            }),
        };
        toml::to_string(&echo).expect("static shape always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_every_gap() {
        let file = FileConfig::default();
        let flags = Overrides { manifest: Some("data/manifest.txt".into()), ..Overrides::default() };
        let rc = RunConfig::resolve(&file, &flags, 90, 2).unwrap();
        assert_eq!(rc.model.m, 90);
        assert_eq!(rc.model.d_model, 64);
        assert_eq!(rc.train.batch_size, 16);
        assert_eq!(rc.train.epochs_pretrain, 30);
        assert_eq!(rc.train.epochs_finetune, 50);
        assert!((rc.contrastive.tau - 0.5).abs() < 1e-12);
        assert!(rc.mode.roi && rc.mode.conn && rc.mode.cross);
        assert!(rc.out.is_none());
        assert!(rc.out_dir().is_err());
    }

    #[test]
    fn file_values_parse_and_flags_override() {
        let text = r#"
manifest = "data/manifest.txt"
out = "runs/a"
enable_cross_view = false

[model]
d_model = 32
layers = 1

[train]
lambda = 0.3
seed = 4

[contrastive]
tau = 0.2
"#;
        let file: FileConfig = toml::from_str(text).unwrap();
        let flags = Overrides { seed: Some(9), lambda: Some(0.05), ..Overrides::default() };
        let rc = RunConfig::resolve(&file, &flags, 90, 2).unwrap();
        assert_eq!(rc.model.d_model, 32);
        assert_eq!(rc.model.layers, 1);
        assert_eq!(rc.model.patch_size, 30);
        assert!(!rc.mode.cross);
        assert_eq!(rc.train.seed, 9);
        assert!((rc.train.lambda - 0.05).abs() < 1e-12);
        assert!((rc.contrastive.tau - 0.2).abs() < 1e-12);
        assert_eq!(rc.out_dir().unwrap(), Path::new("runs/a"));
    }

    #[test]
    fn mode_flags_map_to_single_views() {
        let file = FileConfig::default();
        let base = Overrides { manifest: Some("m".into()), ..Overrides::default() };

        let rc = RunConfig::resolve(
            &file,
            &Overrides { roi_only: true, ..base.clone() },
            90,
            2,
        )
        .unwrap();
        assert!(rc.mode.roi && !rc.mode.conn && !rc.mode.cross);

        let rc = RunConfig::resolve(
            &file,
            &Overrides { conn_only: true, ..base.clone() },
            90,
            2,
        )
        .unwrap();
        assert!(!rc.mode.roi && rc.mode.conn && !rc.mode.cross);

        let rc = RunConfig::resolve(
            &file,
            &Overrides { no_cross_view: true, ..base.clone() },
            90,
            2,
        )
        .unwrap();
        assert!(rc.mode.roi && rc.mode.conn && !rc.mode.cross);

        let err = RunConfig::resolve(
            &file,
            &Overrides { roi_only: true, conn_only: true, ..base },
            90,
            2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn mismatched_data_shape_is_rejected() {
        let mut file = FileConfig::default();
        file.model = Some(ModelSection { m: Some(116), ..ModelSection::default() });
        let flags = Overrides { manifest: Some("m".into()), ..Overrides::default() };
        let err = RunConfig::resolve(&file, &flags, 90, 2).unwrap_err();
        assert!(err.to_string().contains("roi_count"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<FileConfig>("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn effective_echo_round_trips() {
        let file = FileConfig::default();
        let flags = Overrides {
            manifest: Some("data/manifest.txt".into()),
            out: Some("runs/x".into()),
            seed: Some(3),
            ..Overrides::default()
        };
        let rc = RunConfig::resolve(&file, &flags, 90, 2).unwrap();
        let echoed: FileConfig = toml::from_str(&rc.effective_toml()).unwrap();
        let rc2 = RunConfig::resolve(&echoed, &Overrides::default(), 90, 2).unwrap();
        assert_eq!(rc2.train.seed, 3);
        assert_eq!(rc2.model.d_model, rc.model.d_model);
        assert_eq!(rc2.manifest, rc.manifest);
        assert_eq!(rc.effective_toml(), rc2.effective_toml());
    }
}
