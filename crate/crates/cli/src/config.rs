//! Run configuration: a TOML file plus command-line overrides resolve into
//! one concrete, echoable description of the run.
//!
//! Resolution order is profile preset, then file values, then flags. The
//! resolved form serializes back to TOML; its fnv1a64 hash stamps every
//! artifact, so any output can be traced to the exact configuration that
//! produced it. Unknown keys in the file are rejected by name.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use learngene_core::checkpoint::fnv1a64;
use learngene_core::pool::{validate_rows, PathMode, TmOrientation};
use learngene_core::vit::{base_ancestry, mini_ancestry, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Looked for in the working directory when no `--config` is given; absent
/// is fine and means pure defaults.
pub const DEFAULT_CONFIG_FILE: &str = "learngene.toml";

/// Scale preset. The full-scale profile exists for cost accounting at the
/// published geometry and refuses any stage that would materialize weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Mini,
    #[serde(alias = "deit")]
    #[value(alias = "deit")]
    DeitScaleAccountingOnly,
}

impl Profile {
    pub fn training_allowed(self) -> bool {
        matches!(self, Profile::Mini)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StitchInitMode {
    /// Oriented average of the learned transformation matrices.
    Tm,
    /// Least squares fit on calibration activations.
    Ls,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OrientationMode {
    Transpose,
    PseudoInverse,
}

impl OrientationMode {
    pub fn to_core(self) -> TmOrientation {
        match self {
            OrientationMode::Transpose => TmOrientation::Transpose,
            OrientationMode::PseudoInverse => TmOrientation::PseudoInverse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PathModeArg {
    Table,
    General,
}

impl PathModeArg {
    pub fn to_core(self) -> PathMode {
        match self {
            PathModeArg::Table => PathMode::Table,
            PathModeArg::General => PathMode::General,
        }
    }
}

/// Which model `distill-aux` trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AuxKind {
    /// Supervised pretraining of the ancestry model.
    Ancestry,
    /// Narrow auxiliary, distilled at several depths.
    Low,
    /// Ancestry-width auxiliary, distilled at the final block only.
    High,
}

impl AuxKind {
    pub fn name(self) -> &'static str {
        match self {
            AuxKind::Ancestry => "ancestry",
            AuxKind::Low => "low",
            AuxKind::High => "high",
        }
    }
}

// ── file form ───────────────────────────────────────────────────────

/// The config file as written: every field optional, unknown keys rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub profile: Option<Profile>,
    #[serde(default)]
    pub model: ModelFile,
    #[serde(default)]
    pub hyper: HyperFile,
    #[serde(default)]
    pub stitch: StitchFile,
    #[serde(default)]
    pub pipeline: PipelineFile,
    #[serde(default)]
    pub paths: PathsFile,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub in_channels: Option<usize>,
    pub classes: Option<usize>,
    pub ancestry_depth: Option<usize>,
    pub ancestry_width: Option<usize>,
    pub ancestry_heads: Option<usize>,
    pub aux_depth: Option<usize>,
    pub low_width: Option<usize>,
    pub low_heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperFile {
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub lr: Option<f64>,
    pub pretrain_epochs: Option<usize>,
    pub distill_epochs: Option<usize>,
    pub finetune_epochs: Option<usize>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchFile {
    pub init: Option<StitchInitMode>,
    pub orientation: Option<OrientationMode>,
    pub ls_samples: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineFile {
    pub teacher: Option<bool>,
    pub freeze_instances: Option<bool>,
    pub path_mode: Option<PathModeArg>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsFile {
    pub dir: Option<String>,
    pub data: Option<String>,
    pub ancestry: Option<String>,
    pub aux_low: Option<String>,
    pub aux_high: Option<String>,
    pub pool: Option<String>,
    pub pool_tuned: Option<String>,
}

// ── flag form ───────────────────────────────────────────────────────

/// Command-line overrides, valid on every subcommand. A flag beats its
/// config-file counterpart.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Config file; defaults to learngene.toml when present.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Scale preset.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,

    /// Directory artifacts are written to.
    #[arg(long, global = true, value_name = "DIR")]
    pub dir: Option<String>,

    /// Supervised weight in the distillation mix, in [0, 1].
    #[arg(long, global = true)]
    pub alpha: Option<f64>,

    /// Soft-logit temperature.
    #[arg(long, global = true)]
    pub tau: Option<f64>,

    /// Learning rate for every training stage.
    #[arg(long, global = true)]
    pub lr: Option<f64>,

    /// Batch size for training and evaluation.
    #[arg(long, global = true)]
    pub batch: Option<usize>,

    /// Master seed; each stage derives its own streams from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Supervised epochs for the ancestry model.
    #[arg(long, global = true)]
    pub pretrain_epochs: Option<usize>,

    /// Distillation epochs for each auxiliary.
    #[arg(long, global = true)]
    pub distill_epochs: Option<usize>,

    /// Pool finetuning epochs.
    #[arg(long, global = true)]
    pub finetune_epochs: Option<usize>,

    /// How stitch layers get their initial values.
    #[arg(long, global = true, value_enum)]
    pub stitch_init: Option<StitchInitMode>,

    /// How the averaged transformation matrix is oriented into a stitch.
    #[arg(long, global = true, value_enum)]
    pub orientation: Option<OrientationMode>,

    /// Distill from the ancestry checkpoint (true) or train supervised.
    #[arg(long, global = true, value_name = "BOOL")]
    pub teacher: Option<bool>,

    /// Keep harvested instances frozen during pool finetuning.
    #[arg(long, global = true, value_name = "BOOL")]
    pub freeze_instances: Option<bool>,

    /// Which slice of the path space finetuning samples from.
    #[arg(long, global = true, value_enum)]
    pub path_mode: Option<PathModeArg>,
}

// ── resolved form ───────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelSettings,
    pub hyper: HyperSettings,
    pub stitch: StitchSettings,
    pub pipeline: PipelineSettings,
    pub paths: PathsSettings,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelSettings {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub ancestry_depth: usize,
    pub ancestry_width: usize,
    pub ancestry_heads: usize,
    pub aux_depth: usize,
    pub low_width: usize,
    pub low_heads: usize,
    pub mlp_ratio: usize,
}

impl ModelSettings {
    pub fn ancestry(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            in_channels: self.in_channels,
            embed_dim: self.ancestry_width,
            depth: self.ancestry_depth,
            num_heads: self.ancestry_heads,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.classes,
        }
    }

    pub fn aux_low(&self) -> ModelConfig {
        self.ancestry()
            .with_depth(self.aux_depth)
            .with_width(self.low_width, self.low_heads)
    }

    /// The high row keeps the ancestry width by construction.
    pub fn aux_high(&self) -> ModelConfig {
        self.ancestry().with_depth(self.aux_depth)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HyperSettings {
    pub alpha: f64,
    pub tau: f64,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub distill_epochs: usize,
    pub finetune_epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StitchSettings {
    pub init: StitchInitMode,
    pub orientation: OrientationMode,
    /// Calibration rows for the least squares init; capped at the dataset.
    pub ls_samples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineSettings {
    pub teacher: bool,
    pub freeze_instances: bool,
    pub path_mode: PathModeArg,
}

#[derive(Clone, Debug, Serialize)]
pub struct PathsSettings {
    pub dir: String,
    pub data: String,
    pub ancestry: String,
    pub aux_low: String,
    pub aux_high: String,
    pub pool: String,
    pub pool_tuned: String,
}

impl PathsSettings {
    /// Relative names live under `dir`; absolute names stand alone.
    pub fn join(&self, name: &str) -> PathBuf {
        let p = Path::new(name);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            Path::new(&self.dir).join(p)
        }
    }

    pub fn data_file(&self) -> PathBuf {
        self.join(&self.data)
    }

    pub fn ancestry_file(&self) -> PathBuf {
        self.join(&self.ancestry)
    }

    pub fn aux_low_file(&self) -> PathBuf {
        self.join(&self.aux_low)
    }

    pub fn aux_high_file(&self) -> PathBuf {
        self.join(&self.aux_high)
    }

    pub fn pool_file(&self) -> PathBuf {
        self.join(&self.pool)
    }

    pub fn pool_tuned_file(&self) -> PathBuf {
        self.join(&self.pool_tuned)
    }

    pub fn descendant_file(&self, path_id: &str) -> PathBuf {
        self.join(&format!("descendant_{path_id}.lgpk"))
    }
}

struct Preset {
    ancestry: ModelConfig,
    aux_depth: usize,
    low_width: usize,
    low_heads: usize,
}

impl Profile {
    fn preset(self) -> Preset {
        match self {
            Profile::Mini => Preset {
                ancestry: mini_ancestry(),
                aux_depth: 3,
                low_width: 16,
                low_heads: 4,
            },
            Profile::DeitScaleAccountingOnly => Preset {
                ancestry: base_ancestry(),
                aux_depth: 6,
                low_width: 192,
                low_heads: 3,
            },
        }
    }
}

impl RunConfig {
    pub fn resolve(file: FileConfig, ov: &Overrides) -> Result<RunConfig, CliError> {
        let profile = ov.profile.or(file.profile).unwrap_or(Profile::Mini);
        let preset = profile.preset();
        let m = file.model;
        let model = ModelSettings {
            image_size: m.image_size.unwrap_or(preset.ancestry.image_size),
            patch_size: m.patch_size.unwrap_or(preset.ancestry.patch_size),
            in_channels: m.in_channels.unwrap_or(preset.ancestry.in_channels),
            classes: m.classes.unwrap_or(preset.ancestry.num_classes),
            ancestry_depth: m.ancestry_depth.unwrap_or(preset.ancestry.depth),
            ancestry_width: m.ancestry_width.unwrap_or(preset.ancestry.embed_dim),
            ancestry_heads: m.ancestry_heads.unwrap_or(preset.ancestry.num_heads),
            aux_depth: m.aux_depth.unwrap_or(preset.aux_depth),
            low_width: m.low_width.unwrap_or(preset.low_width),
            low_heads: m.low_heads.unwrap_or(preset.low_heads),
            mlp_ratio: m.mlp_ratio.unwrap_or(preset.ancestry.mlp_ratio),
        };
        let h = file.hyper;
        let hyper = HyperSettings {
            alpha: ov.alpha.or(h.alpha).unwrap_or(0.5),
            tau: ov.tau.or(h.tau).unwrap_or(1.0),
            lr: ov.lr.or(h.lr).unwrap_or(1e-3),
            pretrain_epochs: ov.pretrain_epochs.or(h.pretrain_epochs).unwrap_or(8),
            distill_epochs: ov.distill_epochs.or(h.distill_epochs).unwrap_or(5),
            finetune_epochs: ov.finetune_epochs.or(h.finetune_epochs).unwrap_or(2),
            batch: ov.batch.or(h.batch).unwrap_or(8),
            seed: ov.seed.or(h.seed).unwrap_or(7),
        };
        let s = file.stitch;
        let stitch = StitchSettings {
            init: ov.stitch_init.or(s.init).unwrap_or(StitchInitMode::Tm),
            orientation: ov
                .orientation
                .or(s.orientation)
                .unwrap_or(OrientationMode::Transpose),
            ls_samples: s.ls_samples.unwrap_or(64),
        };
        let p = file.pipeline;
        let pipeline = PipelineSettings {
            teacher: ov.teacher.or(p.teacher).unwrap_or(true),
            freeze_instances: ov.freeze_instances.or(p.freeze_instances).unwrap_or(true),
            path_mode: ov.path_mode.or(p.path_mode).unwrap_or(PathModeArg::General),
        };
        let f = file.paths;
        let paths = PathsSettings {
            dir: ov.dir.clone().or(f.dir).unwrap_or_else(|| "runs".into()),
            data: f.data.unwrap_or_else(|| "data.lgds".into()),
            ancestry: f.ancestry.unwrap_or_else(|| "ancestry.lgpk".into()),
            aux_low: f.aux_low.unwrap_or_else(|| "aux_low.lgpk".into()),
            aux_high: f.aux_high.unwrap_or_else(|| "aux_high.lgpk".into()),
            pool: f.pool.unwrap_or_else(|| "pool.lgpk".into()),
            pool_tuned: f.pool_tuned.unwrap_or_else(|| "pool_tuned.lgpk".into()),
        };
        let cfg = RunConfig { profile, model, hyper, stitch, pipeline, paths };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every constraint error names the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: &str| CliError::Validation(format!("{key}: {why}"));
        let h = &self.hyper;
        if !h.alpha.is_finite() || !(0.0..=1.0).contains(&h.alpha) {
            return Err(bad("hyper.alpha", "must lie in [0, 1]"));
        }
        if !(h.tau > 0.0) || !h.tau.is_finite() {
            return Err(bad("hyper.tau", "must be positive and finite"));
        }
        if !(h.lr > 0.0) || !h.lr.is_finite() {
            return Err(bad("hyper.lr", "must be positive and finite"));
        }
        if h.batch == 0 {
            return Err(bad("hyper.batch", "must be positive"));
        }
        if self.stitch.ls_samples == 0 {
            return Err(bad("stitch.ls_samples", "must be positive"));
        }
        if self.model.aux_depth == 0 {
            return Err(bad("model.aux_depth", "must be positive"));
        }
        for (key, cfg) in [
            ("model (ancestry)", self.model.ancestry()),
            ("model (low row)", self.model.aux_low()),
            ("model (high row)", self.model.aux_high()),
        ] {
            cfg.validate().map_err(|e| bad(key, &e.to_string()))?;
        }
        validate_rows(&self.model.aux_low(), &self.model.aux_high())
            .map_err(|e| bad("model", &e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config has no unserializable values")
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }
}

/// Reads the config file. An explicitly named file must exist; the default
/// file is optional.
pub fn load_file(explicit: Option<&Path>) -> Result<FileConfig, CliError> {
    let (path, required) = match explicit {
        Some(p) => (p.to_path_buf(), true),
        None => (PathBuf::from(DEFAULT_CONFIG_FILE), false),
    };
    if !path.exists() {
        if required {
            return Err(CliError::Validation(format!(
                "config file not found: {}",
                path.display()
            )));
        }
        return Ok(FileConfig::default());
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}
