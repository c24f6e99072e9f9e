//! Deterministic training loop: inverse-frequency class weights, weighted
//! cross-entropy, Adam with L2 decay, optional static-scene augmentation,
//! checkpointing, and CSV run logs.
//!
//! Class weights follow w_c = T / (2 n_c) for class pixel count n_c out of
//! T total pixels, so the mean pixel weight is 1 and w1/w0 = n0/n1. A class
//! that never occurs would get an infinite weight; it is clamped to 100 and
//! the clamp is recorded as a warning.
//!
//! One run is a single logical thread: every step builds a fresh tape,
//! runs the two-stream forward in train mode, backpropagates the weighted
//! cross-entropy, and applies one Adam step. Sample order is a seeded
//! shuffle per epoch. Identical (config, seed) pairs produce bit-identical
//! weights, losses, and logs; only the wall-time column varies.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{batch_tensor, evaluate, scoring_mask, EvalError, EvalReport};
use crate::model::{
    build_param_nodes, config_hash, forward_on_tape, init_weights, ModelConfig, ModelError,
    ModelWeights,
};
use crate::raster::RgbRaster;
use crate::synth::{augment_static_scenes, mix_seed, DatasetManifest, SynthError};
use crate::tensor::{AdamConfig, AdamState, Mode, Tape, TensorError};

/// Clamp for the weight of a class that never occurs in the manifest.
pub const CLASS_WEIGHT_MAX: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("frame {scene_id}/{frame_index}: {message}")]
    Data { scene_id: String, frame_index: usize, message: String },
    #[error("numerical failure at epoch {epoch}, step {step}: {source}")]
    Numerical {
        epoch: usize,
        step: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// How the two class weights are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    /// w_c = T / (2 n_c) from the training masks.
    InverseFrequency,
    Uniform,
    /// Explicit [w0, w1].
    Manual([f64; 2]),
}

impl Default for ClassWeightMode {
    fn default() -> Self {
        ClassWeightMode::InverseFrequency
    }
}

/// Static-scene augmentation: append `round(ratio * n_samples)` all-static
/// samples generated from the manifest's scene template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub ratio: f64,
    pub seed: u64,
}

fn default_batch_size() -> usize {
    4
}

fn default_lr() -> f64 {
    1e-4
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub class_weight_mode: ClassWeightMode,
    /// Network architecture; encoder sharing is `model.share_encoders`.
    pub model: ModelConfig,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Evaluate on the test manifest every this many epochs.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub checkpoint: PathBuf,
    /// Where the CSV run log lands; skipped when unset.
    #[serde(default)]
    pub run_log: Option<PathBuf>,
    #[serde(default)]
    pub augmentation: Option<AugmentationConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".to_string());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return err(format!("lr must be non-negative and finite, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return err(format!(
                "weight_decay must be non-negative and finite, got {}",
                self.weight_decay
            ));
        }
        if self.eval_every == 0 {
            return err("eval_every must be at least 1".to_string());
        }
        if let ClassWeightMode::Manual([w0, w1]) = self.class_weight_mode {
            if !(w0 > 0.0 && w1 > 0.0) || !w0.is_finite() || !w1.is_finite() {
                return err(format!("manual class weights must be positive, got [{w0}, {w1}]"));
            }
        }
        if let Some(aug) = &self.augmentation {
            if !(aug.ratio >= 0.0) || !aug.ratio.is_finite() {
                return err(format!("augmentation ratio must be non-negative, got {}", aug.ratio));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let body =
            fs::read(path).map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })?;
        let cfg: TrainConfig = serde_json::from_slice(&body)
            .map_err(|e| TrainError::Json { path: path.to_path_buf(), source: e })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut body = serde_json::to_vec_pretty(self)
            .map_err(|e| TrainError::Json { path: path.to_path_buf(), source: e })?;
        body.push(b'\n');
        fs::write(path, body).map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })
    }
}

/// Class weights plus any clamp warnings that arose computing them.
#[derive(Debug, Clone)]
pub struct ClassWeights {
    pub weights: [f64; 2],
    pub warnings: Vec<String>,
}

/// Inverse-frequency weights over the manifest's training masks.
pub fn compute_class_weights(
    manifest: &DatasetManifest,
    root: &Path,
) -> Result<ClassWeights, TrainError> {
    if manifest.records.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    let mut moving = 0u64;
    let mut total = 0u64;
    for record in &manifest.records {
        let mask = scoring_mask(root, record)?;
        moving += mask.data().iter().filter(|&&b| b != 0).count() as u64;
        total += mask.data().len() as u64;
    }
    let counts = [total - moving, moving];
    let mut weights = [0.0; 2];
    let mut warnings = Vec::new();
    for c in 0..2 {
        if counts[c] == 0 {
            weights[c] = CLASS_WEIGHT_MAX;
            let message = format!(
                "class {c} has no pixels in the training manifest; weight clamped to {CLASS_WEIGHT_MAX}"
            );
            log::warn!("{message}");
            warnings.push(message);
        } else {
            weights[c] = total as f64 / (2.0 * counts[c] as f64);
        }
    }
    Ok(ClassWeights { weights, warnings })
}

/// Appends static scenes worth `round(ratio * n_samples)` extra samples,
/// delegating generation to the scene synthesizer. Appended records carry
/// the augmented flag as provenance. The scene count is rounded up to
/// cover the target; surplus records from the last scene are dropped so
/// the sample count is exact.
pub fn apply_augmentation(
    aug: &AugmentationConfig,
    manifest: &DatasetManifest,
    root: &Path,
) -> Result<DatasetManifest, TrainError> {
    let target = (aug.ratio * manifest.records.len() as f64).round() as usize;
    if target == 0 {
        return Ok(manifest.clone());
    }
    let per_scene = manifest.scene_template.samples_per_scene();
    let n_scenes = target.div_ceil(per_scene);
    let mut augmented = augment_static_scenes(manifest, root, n_scenes, aug.seed)?;
    augmented.records.truncate(manifest.records.len() + target);
    Ok(augmented)
}

/// One epoch's log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Present only on evaluation epochs.
    pub miou: Option<f64>,
    pub moving_iou: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,miou,moving_iou,seconds\n");
        for r in &self.records {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.epoch,
                r.train_loss,
                opt(r.miou),
                opt(r.moving_iou),
                r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_csv())
            .map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })
    }
}

/// Checkpoint sidecar written next to the FMOD weights. Carries the full
/// architecture so the weights file is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub model: ModelConfig,
    pub epoch: usize,
    pub train_manifest_sha256: String,
    pub test_manifest_sha256: String,
}

/// Loads FMOD weights using the architecture recorded in the sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(ModelWeights, CheckpointMeta), TrainError> {
    let meta_path = checkpoint_meta_path(path);
    let body = fs::read(&meta_path)
        .map_err(|e| TrainError::Io { path: meta_path.clone(), source: e })?;
    let meta: CheckpointMeta = serde_json::from_slice(&body)
        .map_err(|e| TrainError::Json { path: meta_path, source: e })?;
    let weights = ModelWeights::load(path, &meta.model)?;
    Ok((weights, meta))
}

fn sha256_hex(path: &Path) -> Result<String, TrainError> {
    let body = fs::read(path).map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })?;
    let digest = Sha256::digest(&body);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Path of the metadata sidecar for a checkpoint file.
pub fn checkpoint_meta_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    checkpoint.with_file_name(name)
}

#[derive(Debug)]
struct Sample {
    image_t: RgbRaster,
    image_prev: RgbRaster,
    labels: Vec<u8>,
}

fn load_samples(
    manifest: &DatasetManifest,
    root: &Path,
    model: &ModelConfig,
) -> Result<Vec<Sample>, TrainError> {
    if manifest.records.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    let mut samples = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let data_err = |message: String| TrainError::Data {
            scene_id: record.scene_id.clone(),
            frame_index: record.frame_index,
            message,
        };
        let image_t = RgbRaster::read_ppm(&root.join(&record.image_t))
            .map_err(|e| data_err(format!("reading {}: {e}", record.image_t)))?;
        let image_prev = RgbRaster::read_ppm(&root.join(&record.image_t_minus_1))
            .map_err(|e| data_err(format!("reading {}: {e}", record.image_t_minus_1)))?;
        let mask = scoring_mask(root, record)?;
        let (w, h) = (image_t.width(), image_t.height());
        if (h as usize, w as usize) != (model.input_height, model.input_width) {
            return Err(data_err(format!(
                "image is {w}x{h} but the model expects {}x{}",
                model.input_width, model.input_height
            )));
        }
        if (mask.width(), mask.height()) != (w, h) {
            return Err(data_err(format!(
                "mask is {}x{} but the image is {w}x{h}",
                mask.width(),
                mask.height()
            )));
        }
        samples.push(Sample { labels: mask.data().to_vec(), image_t, image_prev });
    }
    Ok(samples)
}

/// Result of a training run. The manifest is the train manifest after
/// augmentation, for provenance.
#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: RunLog,
    pub train_manifest: DatasetManifest,
    pub class_weights: ClassWeights,
    pub final_eval: EvalReport,
}

fn promote_nonfinite(err: TrainError, epoch: usize, step: usize) -> TrainError {
    match err {
        TrainError::Tensor(source @ TensorError::NonFinite { .. })
        | TrainError::Model(ModelError::Tensor(source @ TensorError::NonFinite { .. })) => {
            TrainError::Numerical { epoch, step, source }
        }
        other => other,
    }
}

fn run_step(
    cfg: &TrainConfig,
    weights: &mut ModelWeights,
    adam: &mut AdamState,
    batch: &[&Sample],
    class_weights: [f64; 2],
) -> Result<f64, TrainError> {
    let images_t: Vec<&RgbRaster> = batch.iter().map(|s| &s.image_t).collect();
    let images_prev: Vec<&RgbRaster> = batch.iter().map(|s| &s.image_prev).collect();
    let mut labels = Vec::with_capacity(batch.len() * batch[0].labels.len());
    for sample in batch {
        labels.extend_from_slice(&sample.labels);
    }

    let mut tape = Tape::new();
    let nodes = build_param_nodes(&mut tape, &weights.params, true);
    let ft = tape.leaf(batch_tensor(&images_t), false);
    let fp = tape.leaf(batch_tensor(&images_prev), false);
    let out =
        forward_on_tape(&mut tape, &cfg.model, &nodes, &mut weights.running, ft, fp, Mode::Train)?;
    let loss = tape.wce_loss(out.logits, &labels, class_weights)?;
    tape.backward(loss)?;

    let mut grads = BTreeMap::new();
    for (name, node) in &nodes {
        let grad = tape
            .grad(*node)
            .ok_or_else(|| TensorError::MissingGrad(name.clone()))?
            .clone();
        grads.insert(name.clone(), grad);
    }
    adam.step(&mut weights.params, &grads)?;
    Ok(tape.value(loss).item())
}

/// Trains per the config and returns the final weights, run log, and
/// final evaluation. The checkpoint (FMOD plus JSON metadata) and the
/// optional CSV log land on disk before returning.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_root = cfg.train_manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let test_root = cfg.test_manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut train_manifest = DatasetManifest::load(&cfg.train_manifest)?;
    let test_manifest = DatasetManifest::load(&cfg.test_manifest)?;

    if let Some(aug) = &cfg.augmentation {
        train_manifest = apply_augmentation(aug, &train_manifest, &train_root)?;
    }

    let class_weights = match cfg.class_weight_mode {
        ClassWeightMode::InverseFrequency => compute_class_weights(&train_manifest, &train_root)?,
        ClassWeightMode::Uniform => ClassWeights { weights: [1.0, 1.0], warnings: Vec::new() },
        ClassWeightMode::Manual(weights) => ClassWeights { weights, warnings: Vec::new() },
    };

    let samples = load_samples(&train_manifest, &train_root, &cfg.model)?;
    let mut weights = init_weights(&cfg.model, cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 1));

    let mut log = RunLog::default();
    let mut last_eval: Option<EvalReport> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut weighted_loss = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = run_step(cfg, &mut weights, &mut adam, &batch, class_weights.weights)
                .map_err(|e| promote_nonfinite(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(TrainError::Numerical {
                    epoch,
                    step,
                    source: TensorError::NonFinite { op: "train_loss" },
                });
            }
            weighted_loss += loss * batch.len() as f64;
        }
        let train_loss = weighted_loss / samples.len() as f64;

        let (miou, moving_iou) = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let report = evaluate(&weights, &cfg.model, &test_manifest, &test_root)?;
            let pair = (Some(report.miou), Some(report.iou_moving));
            last_eval = Some(report);
            pair
        } else {
            (None, None)
        };

        log.records.push(EpochRecord {
            epoch,
            train_loss,
            miou,
            moving_iou,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: loss {train_loss:.6}{}",
            miou.map(|m| format!(", miou {m:.4}")).unwrap_or_default()
        );
    }

    weights.save(&cfg.checkpoint)?;
    let meta = CheckpointMeta {
        config_hash: config_hash(&cfg.model),
        model: cfg.model.clone(),
        epoch: cfg.epochs,
        train_manifest_sha256: sha256_hex(&cfg.train_manifest)?,
        test_manifest_sha256: sha256_hex(&cfg.test_manifest)?,
    };
    let meta_path = checkpoint_meta_path(&cfg.checkpoint);
    let mut body = serde_json::to_vec_pretty(&meta)
        .map_err(|e| TrainError::Json { path: meta_path.clone(), source: e })?;
    body.push(b'\n');
    fs::write(&meta_path, body).map_err(|e| TrainError::Io { path: meta_path, source: e })?;
    if let Some(log_path) = &cfg.run_log {
        log.write_csv(log_path)?;
    }

    let final_eval = last_eval.expect("final epoch always evaluates");
    Ok(TrainOutcome { weights, log, train_manifest, class_weights, final_eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, FisheyeIntrinsics};
    use crate::synth::{generate_dataset, DatasetConfig, SceneConfig};
    use crate::tensor::Tensor;

    fn micro_camera() -> Camera {
        Camera::Fisheye(
            FisheyeIntrinsics::new(24, 16, 12.0, 8.0, 7.0, -0.5, 0.0, 0.0, 1.6).unwrap(),
        )
    }

    fn micro_dataset(dir: &Path, seed: u64) -> DatasetConfig {
        let cfg = DatasetConfig {
            seed,
            n_scenes: 3,
            train_fraction: 0.6,
            static_scene_fraction: 0.0,
            scene: SceneConfig {
                seed: 0,
                n_frames: 3,
                dt: 0.25,
                n_vehicles: 1,
                n_pedestrians: 1,
                moving_fraction: 0.5,
                camera: micro_camera(),
                ego_speed: 0.0,
                lidar_rays: 256,
                pair_stride: 1,
            },
        };
        generate_dataset(&cfg, dir).unwrap();
        cfg
    }

    fn micro_train_config(dir: &Path, seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            seed,
            epochs,
            batch_size: 2,
            lr: 1e-3,
            weight_decay: 5e-4,
            class_weight_mode: ClassWeightMode::InverseFrequency,
            model: ModelConfig::micro(),
            train_manifest: dir.join("manifest_train.json"),
            test_manifest: dir.join("manifest_test.json"),
            eval_every: 10,
            checkpoint: dir.join("model.fmod"),
            run_log: Some(dir.join("runlog.csv")),
            augmentation: None,
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_train_config(dir.path(), 1, 1);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        cfg = micro_train_config(dir.path(), 1, 1);
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
        cfg = micro_train_config(dir.path(), 1, 1);
        cfg.class_weight_mode = ClassWeightMode::Manual([0.0, 1.0]);
        assert!(cfg.validate().is_err());
        assert!(micro_train_config(dir.path(), 1, 1).validate().is_ok());
    }

    #[test]
    fn train_config_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_train_config(dir.path(), 5, 2);
        let path = dir.path().join("train.json");
        cfg.save(&path).unwrap();
        let loaded = TrainConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn class_weights_balanced_masks_are_uniform() {
        use crate::mask::SegmentationMask;
        use crate::synth::{SampleRecord, Split};
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("train/s0")).unwrap();
        let mut data = vec![0u8; 16];
        for bit in data.iter_mut().take(8) {
            *bit = 1;
        }
        let mask = SegmentationMask::from_data(4, 4, data).unwrap();
        mask.write_pgm(&dir.path().join("train/s0/frame_0001_gt.pgm")).unwrap();
        let record = SampleRecord {
            scene_id: "s0".to_string(),
            frame_index: 1,
            image_t: "train/s0/frame_0001.ppm".to_string(),
            image_t_minus_1: "train/s0/frame_0000.ppm".to_string(),
            lidar: "train/s0/frame_0001.txt".to_string(),
            meta: "train/s0/frame_0001.json".to_string(),
            gt_mask: "train/s0/frame_0001_gt.pgm".to_string(),
            label_mask: None,
            annotation: None,
            static_only: false,
            augmented: false,
        };
        let manifest = DatasetManifest {
            version: 1,
            split: Split::Train,
            camera: micro_camera(),
            scene_template: micro_dataset_template(),
            dataset_seed: 0,
            records: vec![record],
        };
        let cw = compute_class_weights(&manifest, dir.path()).unwrap();
        assert_eq!(cw.weights, [1.0, 1.0]);
        assert!(cw.warnings.is_empty());
    }

    fn micro_dataset_template() -> SceneConfig {
        SceneConfig {
            seed: 0,
            n_frames: 2,
            dt: 0.25,
            n_vehicles: 1,
            n_pedestrians: 0,
            moving_fraction: 0.0,
            camera: micro_camera(),
            ego_speed: 0.0,
            lidar_rays: 16,
            pair_stride: 1,
        }
    }

    #[test]
    fn absent_class_weight_is_clamped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_dataset(dir.path(), 17);
        cfg.scene.moving_fraction = 0.0;
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir2.path()).unwrap();
        let manifest = DatasetManifest::load(&dir2.path().join("manifest_train.json")).unwrap();
        let cw = compute_class_weights(&manifest, dir2.path()).unwrap();
        assert_eq!(cw.weights[1], CLASS_WEIGHT_MAX);
        assert_eq!(cw.warnings.len(), 1);
        assert!(cw.weights[0] > 0.49 && cw.weights[0] <= 0.51);
    }

    #[test]
    fn step_zero_loss_with_uniform_weights_is_near_ln_two() {
        let dir = tempfile::tempdir().unwrap();
        micro_dataset(dir.path(), 23);
        let mut cfg = micro_train_config(dir.path(), 23, 1);
        cfg.class_weight_mode = ClassWeightMode::Uniform;
        let outcome = train(&cfg).unwrap();
        let loss = outcome.log.records[0].train_loss;
        assert!(
            (loss - std::f64::consts::LN_2).abs() < 0.2,
            "step-0 loss {loss} strays from ln 2"
        );
    }

    #[test]
    fn inverse_frequency_penalizes_majority_collapse() {
        // All-static predictor on a crafted 99/1 batch: big static logit
        // everywhere. Inverse-frequency weights must hurt more than uniform.
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i == 0)).collect();
        let mut logits_data = Vec::with_capacity(200);
        logits_data.extend(std::iter::repeat(3.0).take(100));
        logits_data.extend(std::iter::repeat(-3.0).take(100));
        let logits = Tensor::from_vec(vec![1, 2, 10, 10], logits_data).unwrap();

        let loss_with = |weights: [f64; 2]| {
            let mut tape = Tape::new();
            let node = tape.leaf(logits.clone(), false);
            let loss = tape.wce_loss(node, &labels, weights).unwrap();
            tape.value(loss).item()
        };
        // Inverse-frequency weights for 99 static / 1 moving.
        let w0 = 100.0 / (2.0 * 99.0);
        let w1 = 100.0 / 2.0;
        assert!(
            loss_with([w0, w1]) > loss_with([1.0, 1.0]),
            "re-weighting should penalize the all-static collapse"
        );
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        micro_dataset(dir.path(), 29);
        let mut cfg = micro_train_config(dir.path(), 29, 2);
        cfg.lr = 0.0;
        let outcome = train(&cfg).unwrap();
        let fresh = init_weights(&cfg.model, cfg.seed).unwrap();
        for (name, tensor) in &fresh.params {
            assert_eq!(
                tensor.data(),
                outcome.weights.params[name].data(),
                "{name} moved under lr=0"
            );
        }
        // BN running stats do update by design.
        let moved = fresh.running.iter().any(|(name, stat)| {
            outcome.weights.running[name].mean != stat.mean
        });
        assert!(moved, "running stats should still update");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        micro_dataset(dir_a.path(), 31);
        micro_dataset(dir_b.path(), 31);
        let out_a = train(&micro_train_config(dir_a.path(), 31, 2)).unwrap();
        let out_b = train(&micro_train_config(dir_b.path(), 31, 2)).unwrap();
        for (ra, rb) in out_a.log.records.iter().zip(&out_b.log.records) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.miou, rb.miou);
        }
        for (name, tensor) in &out_a.weights.params {
            let other = &out_b.weights.params[name];
            for (x, y) in tensor.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} differs across runs");
            }
        }
    }

    #[test]
    fn loss_drops_on_the_micro_fixture() {
        let dir = tempfile::tempdir().unwrap();
        micro_dataset(dir.path(), 37);
        let mut cfg = micro_train_config(dir.path(), 37, 12);
        cfg.lr = 5e-3;
        let outcome = train(&cfg).unwrap();
        let first = outcome.log.records.first().unwrap().train_loss;
        let last = outcome.log.records.last().unwrap().train_loss;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_reproduces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        micro_dataset(dir.path(), 41);
        let cfg = micro_train_config(dir.path(), 41, 2);
        let outcome = train(&cfg).unwrap();

        let test_manifest = DatasetManifest::load(&cfg.test_manifest).unwrap();
        let (reloaded, meta) = load_checkpoint(&cfg.checkpoint).unwrap();
        let report = evaluate(&reloaded, &meta.model, &test_manifest, dir.path()).unwrap();
        assert_eq!(report.miou.to_bits(), outcome.final_eval.miou.to_bits());
        assert_eq!(report.iou_moving.to_bits(), outcome.final_eval.iou_moving.to_bits());

        assert_eq!(meta.epoch, cfg.epochs);
        assert_eq!(meta.model, cfg.model);
        assert_eq!(meta.config_hash, config_hash(&cfg.model));
        assert_eq!(meta.train_manifest_sha256.len(), 64);
    }

    #[test]
    fn run_log_csv_has_the_normative_header() {
        let log = RunLog {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                miou: Some(0.75),
                moving_iou: Some(0.5),
                seconds: 1.25,
            }],
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,train_loss,miou,moving_iou,seconds\n"));
        assert!(csv.contains("1,0.5,0.75,0.5,1.250"));
    }

    #[test]
    fn augmentation_disabled_and_zero_ratio_change_nothing() {
        let dir = tempfile::tempdir().unwrap();
        micro_dataset(dir.path(), 43);
        let manifest = DatasetManifest::load(&dir.path().join("manifest_train.json")).unwrap();
        let aug = AugmentationConfig { ratio: 0.0, seed: 7 };
        let out = apply_augmentation(&aug, &manifest, dir.path()).unwrap();
        assert_eq!(out.records.len(), manifest.records.len());
    }

    #[test]
    fn augmentation_appends_exactly_the_target_sample_count() {
        let dir = tempfile::tempdir().unwrap();
        micro_dataset(dir.path(), 47);
        let manifest = DatasetManifest::load(&dir.path().join("manifest_train.json")).unwrap();
        let n = manifest.records.len();
        let aug = AugmentationConfig { ratio: 0.75, seed: 7 };
        let out = apply_augmentation(&aug, &manifest, dir.path()).unwrap();
        let target = (0.75 * n as f64).round() as usize;
        assert_eq!(out.records.len(), n + target);
        for record in out.records.iter().skip(n) {
            assert!(record.augmented);
            assert!(record.static_only);
            assert!(record.label_mask.is_some());
        }
    }

    #[test]
    fn missing_image_reports_frame_identity() {
        let dir = tempfile::tempdir().unwrap();
        micro_dataset(dir.path(), 53);
        let manifest = DatasetManifest::load(&dir.path().join("manifest_train.json")).unwrap();
        let victim = dir.path().join(&manifest.records[0].image_t);
        fs::remove_file(&victim).unwrap();
        let err = load_samples(&manifest, dir.path(), &ModelConfig::micro()).unwrap_err();
        match err {
            TrainError::Data { scene_id, frame_index, .. } => {
                assert_eq!(scene_id, manifest.records[0].scene_id);
                assert_eq!(frame_index, manifest.records[0].frame_index);
            }
            other => panic!("expected Data error, got {other}"),
        }
    }

    #[test]
    fn moving_objects_do_appear_in_micro_scenes() {
        // Guards the fixtures above: at least one training mask has moving
        // pixels, otherwise the imbalance tests would be vacuous.
        let dir = tempfile::tempdir().unwrap();
        micro_dataset(dir.path(), 23);
        let manifest = DatasetManifest::load(&dir.path().join("manifest_train.json")).unwrap();
        let any_moving = manifest.records.iter().any(|r| {
            crate::eval::scoring_mask(dir.path(), r).unwrap().moving_pixel_count() > 0
        });
        assert!(any_moving);
    }
}
