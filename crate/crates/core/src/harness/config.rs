//! Experiment configuration file.
//!
//! A TOML document; every key is optional and falls back to the default
//! listed next to it:
//!
//! ```toml
//! mode = "one_shot"        # one_shot | stage1 | stage2 | cascade
//! data_root = "data"       # class-per-folder image root (or `manifest`)
//! manifest = "m.csv"       # existing id,filepath,label manifest
//! output_dir = "runs/exp"  # default "runs/<mode>"
//! dataset_name = "synthetic"  # label for comparison tables; default: data folder name
//! seed = 0
//! n_per_class = 0          # balanced draw per class; 0 keeps every sample
//! stage1_per_side = 0      # stage-1 set size per side; 0 = largest balanced size
//! test_fraction = 0.2
//! val_fraction = 0.25      # only used when k < 2
//! k = 5                    # folds; 0 or 1 disables cross-validation
//!
//! [folders]                # class -> folder name overrides
//! opacity = "Lung_Opacity"
//!
//! [model]
//! kind = "baseline"        # baseline | transfer
//! input = [64, 64, 1]      # baseline input H, W, C
//! conv1 = 32
//! conv2 = 64
//! dense = 128
//! hidden = 48              # transfer head width
//! [model.backbone]         # transfer only
//! kind = "random_projection"
//! input_side = 32
//! feature_dim = 512
//! seed = 0
//!
//! [train]
//! epochs = 10
//! batch_size = 32
//! learning_rate = 0.05
//! loss = "categorical_cross_entropy"  # default follows the head; not allowed in cascade mode
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dataio::{LabelSchema, DEFAULT_VAL_FRACTION};
use crate::imaging::Shape3;
use crate::model::{
    build_baseline_cnn_with, build_transfer_head_with, BackboneSpec, CnnWidths, HeadMode, LossKind, ModelSpec,
    TrainConfig, DEFAULT_HEAD_HIDDEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OneShot,
    Stage1,
    Stage2,
    Cascade,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::OneShot => "one_shot",
            Mode::Stage1 => "stage1",
            Mode::Stage2 => "stage2",
            Mode::Cascade => "cascade",
        }
    }

    /// Accepts `one_shot`, `one-shot`, `stage1`, `stage2`, `cascade`.
    pub fn parse(s: &str) -> Option<Mode> {
        match s.replace('-', "_").as_str() {
            "one_shot" => Some(Mode::OneShot),
            "stage1" => Some(Mode::Stage1),
            "stage2" => Some(Mode::Stage2),
            "cascade" => Some(Mode::Cascade),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelChoice {
    pub kind: ModelKind,
    pub input: [usize; 3],
    pub conv1: usize,
    pub conv2: usize,
    pub dense: usize,
    pub hidden: usize,
    pub backbone: BackboneSpec,
}

impl Default for ModelChoice {
    fn default() -> Self {
        let w = CnnWidths::default();
        ModelChoice {
            kind: ModelKind::Baseline,
            input: [64, 64, 1],
            conv1: w.conv1,
            conv2: w.conv2,
            dense: w.dense,
            hidden: DEFAULT_HEAD_HIDDEN,
            backbone: BackboneSpec::RandomProjection { input_side: 32, feature_dim: 512, seed: 0 },
        }
    }
}

impl ModelChoice {
    pub fn build(&self, schema: &LabelSchema, head: HeadMode) -> Result<ModelSpec, HarnessError> {
        let spec = match self.kind {
            ModelKind::Baseline => build_baseline_cnn_with(
                schema,
                head,
                Shape3::from(self.input),
                CnnWidths { conv1: self.conv1, conv2: self.conv2, dense: self.dense },
            )?,
            ModelKind::Transfer => {
                let mut spec = build_transfer_head_with(self.backbone.feature_dim(), self.hidden, schema, head)?;
                spec.backbone = Some(self.backbone.clone());
                spec
            }
        };
        Ok(spec)
    }

    pub fn display_name(&self) -> String {
        match (&self.kind, &self.backbone) {
            (ModelKind::Baseline, _) => "baseline-cnn".into(),
            (ModelKind::Transfer, BackboneSpec::RandomProjection { feature_dim, .. }) => {
                format!("transfer(random-projection-{feature_dim})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 10, batch_size: 32, learning_rate: 0.05, loss: None }
    }
}

impl TrainSection {
    pub fn config(&self, head: HeadMode, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            loss: self.loss.unwrap_or(LossKind::for_head(head)),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_name: Option<String>,
    pub seed: u64,
    pub n_per_class: usize,
    pub stage1_per_side: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub k: usize,
    pub folders: BTreeMap<String, String>,
    pub model: ModelChoice,
    pub train: TrainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::OneShot,
            data_root: None,
            manifest: None,
            output_dir: None,
            dataset_name: None,
            seed: 0,
            n_per_class: 0,
            stage1_per_side: 0,
            test_fraction: 0.2,
            val_fraction: DEFAULT_VAL_FRACTION,
            k: 5,
            folders: BTreeMap::new(),
            model: ModelChoice::default(),
            train: TrainSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative data and output paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_root, &mut cfg.manifest, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(self.mode.name()))
    }

    pub fn cross_validation(&self) -> bool {
        self.k >= 2
    }

    pub fn dataset_label(&self) -> String {
        if let Some(n) = &self.dataset_name {
            return n.clone();
        }
        self.data_root
            .as_ref()
            .or(self.manifest.as_ref())
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }

    /// Heads used by the mode, as `(stage name, head)`.
    pub fn heads(&self) -> Vec<(&'static str, HeadMode)> {
        match self.mode {
            Mode::OneShot => vec![("one_shot", HeadMode::Multiclass)],
            Mode::Stage1 => vec![("stage1", HeadMode::Binary)],
            Mode::Stage2 => vec![("stage2", HeadMode::Multiclass)],
            Mode::Cascade => vec![("stage1", HeadMode::Binary), ("stage2", HeadMode::Multiclass)],
        }
    }

    /// Rejects configurations that cannot run.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        match (&self.data_root, &self.manifest) {
            (None, None) => return bad("one of data_root or manifest is required".into()),
            (Some(_), Some(_)) => return bad("data_root and manifest are mutually exclusive".into()),
            _ => {}
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} must be in (0,1)", self.test_fraction));
        }
        if !self.cross_validation() && !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} must be in (0,1)", self.val_fraction));
        }
        if self.mode == Mode::Cascade && self.train.loss.is_some() {
            return bad("train.loss cannot be set in cascade mode; each stage uses its own loss".into());
        }
        for (_, head) in self.heads() {
            let schema = match head {
                HeadMode::Binary => LabelSchema::stage1(),
                HeadMode::Multiclass if self.mode == Mode::OneShot => LabelSchema::multiclass4(),
                HeadMode::Multiclass => LabelSchema::stage2(),
            };
            let spec = self.model.build(&schema, head)?;
            spec.validate_for(&schema)?;
            self.train.config(head, self.seed).validate_for(head)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = ExperimentConfig::from_toml("mode = \"stage1\"\ndata_root = \"d\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.mode, Mode::Stage1);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.k, 5);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("modee = \"stage1\"").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3").is_err());
    }

    #[test]
    fn loss_head_mismatch_is_config_error() {
        let cfg = ExperimentConfig::from_toml(
            "mode = \"one_shot\"\ndata_root = \"d\"\n[train]\nloss = \"binary_cross_entropy\"\n",
        )
        .unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::from_toml(
            "mode = \"stage1\"\ndata_root = \"d\"\n[train]\nloss = \"binary_cross_entropy\"\n",
        )
        .unwrap();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut cfg = ExperimentConfig { data_root: Some("x".into()), ..Default::default() };
        cfg.folders.insert("opacity".into(), "Lung_Opacity".into());
        cfg.model.kind = ModelKind::Transfer;
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn mode_names() {
        assert_eq!(Mode::parse("one-shot"), Some(Mode::OneShot));
        assert_eq!(Mode::parse("cascade"), Some(Mode::Cascade));
        assert_eq!(Mode::parse("three"), None);
    }
}
