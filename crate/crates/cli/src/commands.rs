//! Subcommand implementations. Every command is deterministic given its
//! config file: seeds live in configs (or the `--seed` override), never
//! in wall-clock state.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use fisheyemod::annotation::MotionConfig;
use fisheyemod::eval::{
    dataset_stats, evaluate, frame_tensor, logits_to_mask, round_sig, write_eval_report,
    write_per_frame_csv, DatasetStats, EvalError,
};
use fisheyemod::model::{
    config_hash, count_macs, count_params, infer, model_gradcheck, ModelError,
};
use fisheyemod::raster::{RasterError, RgbRaster};
use fisheyemod::synth::{
    annotate_dataset, generate_dataset, CombinedManifest, DatasetConfig, DatasetManifest,
    SynthError,
};
use fisheyemod::tensor::gradcheck::{check_all, GradCheckReport};
use fisheyemod::tensor::TensorError;
use fisheyemod::train::{
    checkpoint_meta_path, load_checkpoint, train, CheckpointMeta, TrainConfig, TrainError,
};

use crate::presets::{load_preset, ExperimentPreset, PRESET_NAMES};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Mask(#[from] fisheyemod::mask::MaskError),
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
    #[error("gradient check failed: {0} case(s) above tolerance")]
    GradcheckFailed(usize),
}

/// Process exit code for an error: 1 usage, 3 numerical, 2 otherwise.
pub fn exit_code(err: &CommandError) -> u8 {
    match err {
        CommandError::Usage(_) => 1,
        CommandError::GradcheckFailed(_) => 3,
        CommandError::Train(TrainError::Numerical { .. }) => 3,
        CommandError::Tensor(TensorError::NonFinite { .. }) => 3,
        CommandError::Train(TrainError::Tensor(TensorError::NonFinite { .. })) => 3,
        CommandError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => 3,
        _ => 2,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CommandError {
    CommandError::Io { path: path.to_path_buf(), source }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CommandError> {
    let body = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&body)
        .map_err(|e| CommandError::Json { path: path.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CommandError> {
    let mut body = serde_json::to_vec_pretty(value)
        .map_err(|e| CommandError::Json { path: path.to_path_buf(), source: e })?;
    body.push(b'\n');
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).to_path_buf()
}

/// `synth --config F --out DIR [--seed N]`
pub fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CommandError> {
    let mut cfg: DatasetConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let combined = generate_dataset(&cfg, out)?;
    println!(
        "synthesized {} train and {} test samples into {}",
        combined.train.records.len(),
        combined.test.records.len(),
        out.display()
    );
    Ok(())
}

/// `annotate --dataset DIR --out DIR [--v-min X]`
pub fn cmd_annotate(dataset: &Path, out: &Path, v_min: Option<f64>) -> Result<(), CommandError> {
    let mut cfg = MotionConfig::default();
    if let Some(v) = v_min {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(CommandError::Usage(format!(
                "--v-min must be non-negative and finite, got {v}"
            )));
        }
        cfg.v_min = v;
    }
    let combined = CombinedManifest::load(&dataset.join("manifest.json"))?;
    let train = annotate_dataset(&combined.train, dataset, out, &cfg)?;
    let test = annotate_dataset(&combined.test, dataset, out, &cfg)?;
    let annotated =
        train.records.iter().chain(&test.records).filter(|r| r.annotation.is_some()).count();
    train.save(&out.join("manifest_train.json"))?;
    test.save(&out.join("manifest_test.json"))?;
    CombinedManifest { version: combined.version, train, test }
        .save(&out.join("manifest.json"))?;
    println!("annotated {annotated} samples into {}", out.display());
    Ok(())
}

/// `train --config F --out DIR [--seed N]`
///
/// Relative manifest paths in the config resolve against the config
/// file's directory; the checkpoint and run log always land in `--out`.
pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CommandError> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let base = manifest_root(config);
    if cfg.train_manifest.is_relative() {
        cfg.train_manifest = base.join(&cfg.train_manifest);
    }
    if cfg.test_manifest.is_relative() {
        cfg.test_manifest = base.join(&cfg.test_manifest);
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    cfg.checkpoint = out.join("model.fmod");
    cfg.run_log = Some(out.join("runlog.csv"));
    cfg.save(&out.join("train_config.json"))?;

    let outcome = train(&cfg)?;
    for warning in &outcome.class_weights.warnings {
        eprintln!("warning: {warning}");
    }
    write_eval_report(&out.join("eval_report.json"), &outcome.final_eval)?;
    write_per_frame_csv(&out.join("per_frame.csv"), &outcome.final_eval)?;
    println!(
        "trained {} epochs: miou {:.4}, moving-iou {:.4} (checkpoint {})",
        cfg.epochs,
        outcome.final_eval.miou,
        outcome.final_eval.iou_moving,
        cfg.checkpoint.display()
    );
    Ok(())
}

/// `eval --weights F --manifest F --out F`
pub fn cmd_eval(weights: &Path, manifest: &Path, out: &Path) -> Result<(), CommandError> {
    let (model_weights, meta) = load_checkpoint(weights)?;
    let data = DatasetManifest::load(manifest)?;
    let report = evaluate(&model_weights, &meta.model, &data, &manifest_root(manifest))?;
    write_eval_report(out, &report)?;
    println!(
        "miou {:.4}, moving-iou {:.4}, static-iou {:.4}, static-scene fp rate {:.4}",
        report.miou, report.iou_moving, report.iou_static, report.fp_rate_static_scenes
    );
    Ok(())
}

/// `stats --manifest F`: dataset statistics as JSON on stdout.
pub fn cmd_stats(manifest: &Path) -> Result<(), CommandError> {
    let data = DatasetManifest::load(manifest)?;
    let stats = dataset_stats(&data, &manifest_root(manifest))?;
    let rounded = DatasetStats {
        avg_moving_objects_per_frame: round_sig(stats.avg_moving_objects_per_frame, 6),
        pct_moving_pixels: round_sig(stats.pct_moving_pixels, 6),
        pct_static_pixels: round_sig(stats.pct_static_pixels, 6),
        ..stats
    };
    let body = serde_json::to_string_pretty(&rounded)
        .map_err(|e| CommandError::Json { path: manifest.to_path_buf(), source: e })?;
    println!("{body}");
    Ok(())
}

/// `infer --weights F --frame-t F --frame-t1 F --out-mask F`
pub fn cmd_infer(
    weights: &Path,
    frame_t: &Path,
    frame_t1: &Path,
    out_mask: &Path,
) -> Result<(), CommandError> {
    let (model_weights, meta) = load_checkpoint(weights)?;
    let image_t = RgbRaster::read_ppm(frame_t)?;
    let image_p = RgbRaster::read_ppm(frame_t1)?;
    for image in [&image_t, &image_p] {
        if (image.height() as usize, image.width() as usize)
            != (meta.model.input_height, meta.model.input_width)
        {
            return Err(CommandError::Usage(format!(
                "frame is {}x{} but the model expects {}x{}",
                image.width(),
                image.height(),
                meta.model.input_width,
                meta.model.input_height
            )));
        }
    }
    let logits =
        infer(&model_weights, &meta.model, &frame_tensor(&image_t), &frame_tensor(&image_p))?;
    let mask = logits_to_mask(&logits)?;
    mask.write_pgm(out_mask)?;
    let fraction = mask.moving_fraction();
    println!("moving fraction {:.6} ({} pixels) -> {}", fraction, mask.moving_pixel_count(), out_mask.display());
    Ok(())
}

fn print_gradcheck_table(reports: &[GradCheckReport]) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{:<28} {:>12} {:>10}  status", "case", "max_rel_err", "tolerance");
    for r in reports {
        let _ = writeln!(
            stdout,
            "{:<28} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
}

/// `gradcheck [--op NAME]`: central-difference checks for every op and
/// the assembled model; exit 0 iff all cases pass.
pub fn cmd_gradcheck(op: Option<&str>) -> Result<(), CommandError> {
    let mut reports = check_all(op)?;
    let include_model = op.map_or(true, |f| "model".contains(f));
    if include_model {
        reports.push(model_gradcheck()?);
    }
    if reports.is_empty() {
        return Err(CommandError::Usage(format!(
            "no gradient-check case matches {:?}",
            op.unwrap_or("")
        )));
    }
    print_gradcheck_table(&reports);
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CommandError::GradcheckFailed(failed));
    }
    Ok(())
}

/// Provenance summary written by `experiment`, path-free so identical
/// runs produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub preset: String,
    pub seed: u64,
    pub config_hash: String,
    pub params_total: usize,
    pub params_encoder: usize,
    pub params_decoder: usize,
    pub macs: usize,
    pub class_weights: [f64; 2],
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_manifest_sha256: String,
    pub test_manifest_sha256: String,
    pub iou_moving: f64,
    pub iou_static: f64,
    pub miou: f64,
    pub fp_rate_static_scenes: f64,
}

/// `experiment --preset NAME --out DIR [--seed N]`: synth, annotate,
/// train, and evaluate end to end, leaving a provenance bundle (configs,
/// manifests, run log, checkpoint, metrics) in the output directory.
pub fn cmd_experiment(name: &str, out: &Path, seed: Option<u64>) -> Result<(), CommandError> {
    let mut preset = load_preset(name).ok_or_else(|| {
        CommandError::Usage(format!(
            "unknown preset {name:?}; expected one of {}",
            PRESET_NAMES.join(", ")
        ))
    })?;
    if let Some(s) = seed {
        preset = preset.with_seed(s);
    }
    run_experiment(&preset, out)?;
    Ok(())
}

/// The experiment pipeline on a resolved preset. Returns the summary so
/// callers can compare runs without re-reading files.
pub fn run_experiment(
    preset: &ExperimentPreset,
    out: &Path,
) -> Result<ExperimentSummary, CommandError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_json(&out.join("preset.json"), preset)?;

    let data_dir = out.join("data");
    generate_dataset(&preset.dataset, &data_dir)?;
    let test_manifest_path = if preset.single_domain() {
        data_dir.join("manifest_test.json")
    } else {
        let eval_dir = out.join("data_eval");
        generate_dataset(&preset.eval_dataset, &eval_dir)?;
        eval_dir.join("manifest_test.json")
    };

    // Annotation supplies the training labels; the test split keeps its
    // exact ground-truth masks as the scoring reference.
    let train_manifest_path = data_dir.join("manifest_train.json");
    let base_train = DatasetManifest::load(&train_manifest_path)?;
    let annotated = annotate_dataset(&base_train, &data_dir, &data_dir, &MotionConfig::default())?;
    annotated.save(&train_manifest_path)?;

    let cfg = preset.train_config(train_manifest_path, test_manifest_path, out);
    cfg.save(&out.join("train_config.json"))?;
    let outcome = train(&cfg)?;
    for warning in &outcome.class_weights.warnings {
        eprintln!("warning: {warning}");
    }
    write_eval_report(&out.join("eval_report.json"), &outcome.final_eval)?;
    write_per_frame_csv(&out.join("per_frame.csv"), &outcome.final_eval)?;

    let meta: CheckpointMeta = read_json(&checkpoint_meta_path(&cfg.checkpoint))?;
    let params = count_params(&cfg.model)?;
    let test_manifest = DatasetManifest::load(&cfg.test_manifest)?;
    let summary = ExperimentSummary {
        preset: preset.name.clone(),
        seed: preset.seed,
        config_hash: config_hash(&cfg.model),
        params_total: params.total,
        params_encoder: params.encoder,
        params_decoder: params.decoder,
        macs: count_macs(&cfg.model)?,
        class_weights: [
            round_sig(outcome.class_weights.weights[0], 6),
            round_sig(outcome.class_weights.weights[1], 6),
        ],
        train_samples: outcome.train_manifest.records.len(),
        test_samples: test_manifest.records.len(),
        train_manifest_sha256: meta.train_manifest_sha256,
        test_manifest_sha256: meta.test_manifest_sha256,
        iou_moving: round_sig(outcome.final_eval.iou_moving, 6),
        iou_static: round_sig(outcome.final_eval.iou_static, 6),
        miou: round_sig(outcome.final_eval.miou, 6),
        fp_rate_static_scenes: round_sig(outcome.final_eval.fp_rate_static_scenes, 6),
    };
    write_json(&out.join("experiment.json"), &summary)?;
    println!(
        "{} seed {}: miou {:.4}, moving-iou {:.4}, static-scene fp rate {:.4}",
        summary.preset, summary.seed, summary.miou, summary.iou_moving,
        summary.fp_rate_static_scenes
    );
    Ok(summary)
}
