//! Committed experiment presets, one per ablation row: a rectilinear
//! baseline, the fisheye model, its shared-encoder variant, and the
//! shared variant plus static-scene augmentation. The four differ only
//! in camera model, encoder sharing, and augmentation, so each pairwise
//! comparison isolates one factor. Every preset is evaluated on the
//! test split of the same fisheye dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fisheyemod::model::ModelConfig;
use fisheyemod::synth::{mix_seed, DatasetConfig};
use fisheyemod::train::{AugmentationConfig, ClassWeightMode, TrainConfig};

/// Training knobs bundled in a preset; paths and seeds are resolved at
/// run time against the experiment's output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTemplate {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub class_weight_mode: ClassWeightMode,
    pub eval_every: usize,
    pub model: ModelConfig,
    pub augmentation: Option<AugmentationConfig>,
}

/// One ablation row: the training-domain dataset, the fisheye dataset
/// whose test split serves as the shared evaluation set, and the
/// training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub eval_dataset: DatasetConfig,
    pub train: TrainTemplate,
}

pub const PRESET_NAMES: [&str; 4] =
    ["rect_baseline", "fisheye_base", "fisheye_shared", "fisheye_shared_aug"];

const PRESET_SOURCES: [(&str, &str); 4] = [
    ("rect_baseline", include_str!("../presets/rect_baseline.json")),
    ("fisheye_base", include_str!("../presets/fisheye_base.json")),
    ("fisheye_shared", include_str!("../presets/fisheye_shared.json")),
    ("fisheye_shared_aug", include_str!("../presets/fisheye_shared_aug.json")),
];

/// Loads a preset by name; `None` for unknown names.
pub fn load_preset(name: &str) -> Option<ExperimentPreset> {
    let (_, source) = PRESET_SOURCES.iter().find(|(n, _)| *n == name)?;
    let preset: ExperimentPreset =
        serde_json::from_str(source).expect("committed preset parses");
    assert_eq!(preset.name, name, "preset file name disagrees with its name field");
    Some(preset)
}

pub fn all_presets() -> Vec<ExperimentPreset> {
    PRESET_NAMES.iter().map(|n| load_preset(n).expect("known name")).collect()
}

impl ExperimentPreset {
    /// Applies a seed override to every seed the preset carries: the
    /// training seed, both dataset seeds, and the augmentation seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self.eval_dataset.seed = seed;
        if let Some(aug) = &mut self.train.augmentation {
            aug.seed = mix_seed(seed, 2);
        }
        self
    }

    /// True when the training dataset is the evaluation dataset, so one
    /// generation pass serves both.
    pub fn single_domain(&self) -> bool {
        serde_json::to_value(&self.dataset).unwrap()
            == serde_json::to_value(&self.eval_dataset).unwrap()
    }

    /// Resolves the training recipe against an experiment directory.
    pub fn train_config(
        &self,
        train_manifest: PathBuf,
        test_manifest: PathBuf,
        out: &Path,
    ) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            class_weight_mode: self.train.class_weight_mode.clone(),
            model: self.train.model.clone(),
            train_manifest,
            test_manifest,
            eval_every: self.train.eval_every,
            checkpoint: out.join("model.fmod"),
            run_log: Some(out.join("runlog.csv")),
            augmentation: self.train.augmentation.clone(),
        }
    }
}
