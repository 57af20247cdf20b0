//! TOML run configuration with fail-fast validation.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::augment::Transform;
use crate::data::CsvSchema;
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::losses::SmoothingConfig;
use crate::metrics::MetricsMode;
use crate::train::{AugmentMode, StageConfig, TrainConfig};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// Two generated domains: one for pretraining, one for the main stage.
    Synthetic {
        #[serde(default = "default_n_pretrain")]
        n_pretrain: usize,
        #[serde(default = "default_n_main")]
        n_main: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
        /// Side length after preprocessing; omit to skip preprocessing.
        preprocess_size: Option<usize>,
    },
    /// Labels CSV plus an image directory per domain.
    Csv {
        pretrain_labels: PathBuf,
        pretrain_images: PathBuf,
        main_labels: PathBuf,
        main_images: PathBuf,
        #[serde(default = "default_id_column")]
        id_column: String,
        #[serde(default = "default_grade_column")]
        grade_column: String,
        #[serde(default = "default_image_size")]
        preprocess_size: usize,
    },
}

fn default_n_pretrain() -> usize {
    2000
}
fn default_n_main() -> usize {
    1000
}
fn default_image_size() -> usize {
    64
}
fn default_id_column() -> String {
    "id_code".into()
}
fn default_grade_column() -> String {
    "diagnosis".into()
}

impl DataSection {
    pub fn csv_schema(&self) -> CsvSchema {
        match self {
            DataSection::Csv { id_column, grade_column, .. } => CsvSchema {
                id_column: id_column.clone(),
                grade_column: grade_column.clone(),
            },
            DataSection::Synthetic { .. } => CsvSchema::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataSection::Synthetic { n_pretrain, n_main, image_size, preprocess_size } => {
                if *n_pretrain < 5 || *n_main < 5 {
                    return Err(Error::Config(
                        "synthetic domains need at least 5 samples each".into(),
                    ));
                }
                if *image_size < 8 {
                    return Err(Error::Config("image_size must be >= 8".into()));
                }
                if let Some(p) = preprocess_size {
                    if *p < 2 || p > image_size {
                        return Err(Error::Config(
                            "preprocess_size must be in [2, image_size]".into(),
                        ));
                    }
                }
                Ok(())
            }
            DataSection::Csv {
                pretrain_labels,
                main_labels,
                preprocess_size,
                ..
            } => {
                for p in [pretrain_labels, main_labels] {
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "labels file not found: {}",
                            p.display()
                        )));
                    }
                }
                if *preprocess_size < 2 {
                    return Err(Error::Config("preprocess_size must be >= 2".into()));
                }
                Ok(())
            }
        }
    }
}

/// Augmentation mode for one stage: "none", "geometric", or "full".
#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AugmentSection {
    None,
    Geometric,
    Full,
}

impl From<AugmentSection> for AugmentMode {
    fn from(a: AugmentSection) -> AugmentMode {
        match a {
            AugmentSection::None => AugmentMode::None,
            AugmentSection::Geometric => AugmentMode::Geometric,
            AugmentSection::Full => AugmentMode::Full,
        }
    }
}

fn augment_section(m: AugmentMode) -> AugmentSection {
    match m {
        AugmentMode::None => AugmentSection::None,
        AugmentMode::Geometric => AugmentSection::Geometric,
        AugmentMode::Full => AugmentSection::Full,
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub augment: AugmentSection,
}

impl From<&StageSection> for StageConfig {
    fn from(s: &StageSection) -> StageConfig {
        StageConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr_max: s.lr_max,
            lr_min: s.lr_min,
            weight_decay: s.weight_decay,
            augment: s.augment.into(),
        }
    }
}

fn stage_section(cfg: &StageConfig) -> StageSection {
    StageSection {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        weight_decay: cfg.weight_decay,
        augment: augment_section(cfg.augment),
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub pretrain: StageSection,
    pub main: StageSection,
    pub posttrain_epochs: usize,
    pub posttrain_lr: f64,
    pub freeze_epochs: usize,
    pub n_folds: usize,
    pub holdout_fraction: f64,
    pub label_smoothing_cls: f64,
    pub label_smoothing_ord: f64,
    pub regression_noise_halfwidth: f64,
    pub jobs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            pretrain: stage_section(&d.pretrain),
            main: stage_section(&d.main),
            posttrain_epochs: d.posttrain_epochs,
            posttrain_lr: d.posttrain_lr,
            freeze_epochs: d.freeze_epochs,
            n_folds: d.n_folds,
            holdout_fraction: d.holdout_fraction,
            label_smoothing_cls: d.smoothing.eps_cls,
            label_smoothing_ord: d.smoothing.eps_ord,
            regression_noise_halfwidth: d.smoothing.reg_halfwidth,
            jobs: d.jobs,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            pretrain: (&self.pretrain).into(),
            main: (&self.main).into(),
            posttrain_epochs: self.posttrain_epochs,
            posttrain_lr: self.posttrain_lr,
            freeze_epochs: self.freeze_epochs,
            n_folds: self.n_folds,
            holdout_fraction: self.holdout_fraction,
            smoothing: SmoothingConfig {
                eps_cls: self.label_smoothing_cls,
                eps_ord: self.label_smoothing_ord,
                reg_halfwidth: self.regression_noise_halfwidth,
            },
            seed,
            jobs: self.jobs,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    /// Fraction trimmed from each tail before averaging.
    pub trim: f64,
    /// Transform names; `identity` is always prepended. Deterministic
    /// names only: hflip, vflip, transpose, rot90, rot180, rot270, and
    /// `zoom:<fraction>`.
    pub tta: Vec<String>,
    pub emit_raw: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let d = EnsembleConfig::default();
        EnsembleSection {
            trim: d.trim,
            tta: d.tta.iter().skip(1).map(|t| t.name()).collect(),
            emit_raw: false,
        }
    }
}

/// Parse a deterministic transform by name.
pub fn parse_transform(name: &str) -> Result<Transform> {
    let t = match name {
        "identity" => Transform::Identity,
        "hflip" => Transform::HFlip,
        "vflip" => Transform::VFlip,
        "transpose" => Transform::Transpose,
        "rot90" => Transform::Rot90,
        "rot180" => Transform::Rot180,
        "rot270" => Transform::Rot270,
        other => {
            if let Some(frac) = other.strip_prefix("zoom:") {
                let fraction: f64 = frac
                    .parse()
                    .map_err(|_| Error::Config(format!("bad zoom fraction '{frac}'")))?;
                Transform::Zoom { fraction }
            } else {
                return Err(Error::Config(format!("unknown transform '{other}'")));
            }
        }
    };
    Ok(t)
}

impl EnsembleSection {
    pub fn to_ensemble_config(&self) -> Result<EnsembleConfig> {
        let mut tta = Vec::with_capacity(self.tta.len());
        for name in &self.tta {
            tta.push(parse_transform(name)?);
        }
        let cfg = EnsembleConfig {
            tta: crate::augment::tta_set(&tta)?,
            trim: self.trim,
            emit_raw: self.emit_raw,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// `five_class` or `binary_screening`.
    pub mode: String,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { mode: "five_class".into() }
    }
}

impl MetricsSection {
    pub fn to_mode(&self) -> Result<MetricsMode> {
        match self.mode.as_str() {
            "five_class" => Ok(MetricsMode::FiveClass),
            "binary_screening" => Ok(MetricsMode::BinaryScreening),
            other => Err(Error::Config(format!("unknown metrics mode '{other}'"))),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.to_train_config(self.seed).validate()?;
        self.ensemble.to_ensemble_config()?;
        self.metrics.to_mode()?;
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"

[data]
kind = "synthetic"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.n_folds, 5);
        assert_eq!(cfg.train.pretrain.epochs, 20);
        assert_eq!(cfg.train.main.epochs, 75);
        assert_eq!(cfg.ensemble.trim, 0.25);
        let ens = cfg.ensemble.to_ensemble_config().unwrap();
        assert_eq!(ens.tta.len(), 7);
        assert_eq!(ens.tta[0], Transform::Identity);
        assert_eq!(cfg.metrics.to_mode().unwrap(), MetricsMode::FiveClass);
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
seed = 7
output_dir = "runs/a"

[data]
kind = "synthetic"
n_pretrain = 100
n_main = 50
image_size = 32
preprocess_size = 16

[train]
posttrain_epochs = 5
posttrain_lr = 0.05
freeze_epochs = 5
n_folds = 3
holdout_fraction = 0.2
label_smoothing_cls = 0.1
label_smoothing_ord = 0.1
regression_noise_halfwidth = 0.3333333333333333
jobs = 2

[train.pretrain]
epochs = 4
batch_size = 16
lr_max = 0.02
lr_min = 0.0001
weight_decay = 0.0001
augment = "none"

[train.main]
epochs = 6
batch_size = 16
lr_max = 0.002
lr_min = 0.00001
weight_decay = 0.0001
augment = "geometric"

[ensemble]
trim = 0.25
tta = ["hflip", "rot180", "zoom:0.9"]
emit_raw = true

[metrics]
mode = "binary_screening"
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        let tc = cfg.train.to_train_config(cfg.seed);
        assert_eq!(tc.n_folds, 3);
        assert_eq!(tc.pretrain.epochs, 4);
        assert_eq!(tc.seed, 7);
        let ens = cfg.ensemble.to_ensemble_config().unwrap();
        assert_eq!(ens.tta.len(), 4); // identity + 3
        assert!(ens.emit_raw);
        assert_eq!(cfg.metrics.to_mode().unwrap(), MetricsMode::BinaryScreening);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        let unknown = format!("{MINIMAL}\nbogus = 1\n");
        assert!(toml::from_str::<RunConfig>(&unknown).is_err());

        let bad_mode = format!("{MINIMAL}\n[metrics]\nmode = \"six_class\"\n");
        let cfg: RunConfig = toml::from_str(&bad_mode).unwrap();
        assert!(cfg.validate().is_err());

        let bad_tta = format!("{MINIMAL}\n[ensemble]\ntta = [\"spin\"]\n");
        let cfg: RunConfig = toml::from_str(&bad_tta).unwrap();
        assert!(cfg.validate().is_err());

        let bad_trim = format!("{MINIMAL}\n[ensemble]\ntrim = 0.5\n");
        let cfg: RunConfig = toml::from_str(&bad_trim).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn transform_parsing() {
        assert_eq!(parse_transform("rot90").unwrap(), Transform::Rot90);
        assert_eq!(
            parse_transform("zoom:0.8").unwrap(),
            Transform::Zoom { fraction: 0.8 }
        );
        assert!(parse_transform("zoom:x").is_err());
        assert!(parse_transform("warp").is_err());
    }

    #[test]
    fn missing_csv_files_fail_validation() {
        let text = r#"
output_dir = "out"

[data]
kind = "csv"
pretrain_labels = "/nonexistent/a.csv"
pretrain_images = "/nonexistent/a"
main_labels = "/nonexistent/b.csv"
main_images = "/nonexistent/b"
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert!(cfg.validate().is_err());
    }
}
