//! Pixel-level evaluation: confusion matrices, per-class IoU, mIoU,
//! false-positive analysis on static scenes, and dataset statistics.
//!
//! The moving class is the positive class. For a confusion matrix with
//! counts tp, fp, fn, tn,
//!
//! ```text
//! iou_moving = tp / (tp + fp + fn)
//! iou_static = tn / (tn + fp + fn)
//! miou       = (iou_moving + iou_static) / 2
//! ```
//!
//! An empty denominator means both prediction and truth agree the class is
//! absent, which counts as perfect agreement: the IoU is defined as 1.
//! Dataset-level numbers are micro-averaged (counts are pooled over all
//! frames, then turned into IoU once); count addition commutes, so any
//! evaluation order produces the same report.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::MotionLabel;
use crate::mask::SegmentationMask;
use crate::model::{infer, ModelConfig, ModelError, ModelWeights};
use crate::raster::RgbRaster;
use crate::synth::{DatasetManifest, FrameAnnotationFile, SampleRecord};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask shapes differ: pred {pred_width}x{pred_height}, gt {gt_width}x{gt_height}")]
    Shape { pred_width: u32, pred_height: u32, gt_width: u32, gt_height: u32 },
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("frame {scene_id}/{frame_index}: {message}")]
    Data { scene_id: String, frame_index: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
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

fn data_err(record: &SampleRecord, message: String) -> EvalError {
    EvalError::Data {
        scene_id: record.scene_id.clone(),
        frame_index: record.frame_index,
        message,
    }
}

/// Pixel counts for the moving class; static is the complement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix2 {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix2 {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts pool across frames; addition is the micro-average monoid.
    pub fn merge(&mut self, other: &ConfusionMatrix2) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Exact per-pixel tally of prediction against ground truth.
pub fn confusion(
    pred: &SegmentationMask,
    gt: &SegmentationMask,
) -> Result<ConfusionMatrix2, EvalError> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(EvalError::Shape {
            pred_width: pred.width(),
            pred_height: pred.height(),
            gt_width: gt.width(),
            gt_height: gt.height(),
        });
    }
    let mut cm = ConfusionMatrix2::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// (iou_moving, iou_static, miou) with the empty-denominator-is-1 rule.
pub fn iou_from_confusion(cm: &ConfusionMatrix2) -> (f64, f64, f64) {
    let ratio = |num: u64, denom: u64| {
        if denom == 0 {
            1.0
        } else {
            num as f64 / denom as f64
        }
    };
    let iou_moving = ratio(cm.tp, cm.tp + cm.fp + cm.fn_);
    let iou_static = ratio(cm.tn, cm.tn + cm.fp + cm.fn_);
    (iou_moving, iou_static, 0.5 * (iou_moving + iou_static))
}

/// One frame's IoU figures, kept alongside the pooled report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameIou {
    pub scene_id: String,
    pub frame_index: usize,
    pub iou_moving: f64,
    pub iou_static: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_moving: f64,
    pub iou_static: f64,
    pub miou: f64,
    pub per_frame: Vec<FrameIou>,
    /// Fraction of static-scene pixels predicted moving; 0 when the
    /// manifest has no static-only scenes.
    pub fp_rate_static_scenes: f64,
}

/// One frame's prediction paired with its ground truth.
#[derive(Debug)]
pub struct PredictionRecord<'a> {
    pub scene_id: &'a str,
    pub frame_index: usize,
    pub pred: &'a SegmentationMask,
    pub gt: &'a SegmentationMask,
    pub static_only: bool,
}

/// Pools per-frame confusions into the dataset-level report.
pub fn report_from_predictions(records: &[PredictionRecord<'_>]) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    let mut pooled = ConfusionMatrix2::default();
    let mut per_frame = Vec::with_capacity(records.len());
    let mut static_pixels = 0u64;
    let mut static_predicted_moving = 0u64;
    for record in records {
        let cm = confusion(record.pred, record.gt)?;
        pooled.merge(&cm);
        let (iou_moving, iou_static, miou) = iou_from_confusion(&cm);
        per_frame.push(FrameIou {
            scene_id: record.scene_id.to_string(),
            frame_index: record.frame_index,
            iou_moving,
            iou_static,
            miou,
        });
        if record.static_only {
            static_pixels += cm.total();
            static_predicted_moving += cm.tp + cm.fp;
        }
    }
    let (iou_moving, iou_static, miou) = iou_from_confusion(&pooled);
    let fp_rate_static_scenes = if static_pixels == 0 {
        0.0
    } else {
        static_predicted_moving as f64 / static_pixels as f64
    };
    Ok(EvalReport { iou_moving, iou_static, miou, per_frame, fp_rate_static_scenes })
}

/// Scales an RGB raster into a [1, 3, H, W] tensor with values in [0, 1].
pub fn frame_tensor(image: &RgbRaster) -> Tensor {
    batch_tensor(&[image])
}

/// Stacks N rasters of equal size into an [N, 3, H, W] tensor in [0, 1].
pub fn batch_tensor(images: &[&RgbRaster]) -> Tensor {
    let (w, h) = (images[0].width() as usize, images[0].height() as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for image in images {
        for c in 0..3 {
            for v in 0..h {
                for u in 0..w {
                    data.push(image.get(u as u32, v as u32)[c] as f64 / 255.0);
                }
            }
        }
    }
    Tensor::from_vec(vec![images.len(), 3, h, w], data).expect("stacked raster dims")
}

/// Argmax over the two logit channels of a [1, 2, H, W] tensor. Ties go
/// to the static class.
pub fn logits_to_mask(logits: &Tensor) -> Result<SegmentationMask, ModelError> {
    let dims = logits.shape();
    if dims.len() != 4 || dims[0] != 1 || dims[1] != 2 {
        return Err(ModelError::Shape(format!(
            "expected logits of shape [1, 2, H, W], got {dims:?}"
        )));
    }
    let (h, w) = (dims[2], dims[3]);
    let data = logits.data();
    let mut mask = SegmentationMask::zeros(w as u32, h as u32);
    for v in 0..h {
        for u in 0..w {
            let static_logit = data[v * w + u];
            let moving_logit = data[h * w + v * w + u];
            if moving_logit > static_logit {
                mask.set(u as u32, v as u32, 1);
            }
        }
    }
    Ok(mask)
}

fn load_mask(root: &Path, record: &SampleRecord, rel: &str) -> Result<SegmentationMask, EvalError> {
    SegmentationMask::read_pgm(&root.join(rel))
        .map_err(|e| data_err(record, format!("reading mask {rel}: {e}")))
}

/// Ground truth for scoring: the annotated label when the record has one,
/// the analytic mask otherwise.
pub fn scoring_mask(root: &Path, record: &SampleRecord) -> Result<SegmentationMask, EvalError> {
    let rel = record.label_mask.as_deref().unwrap_or(&record.gt_mask);
    load_mask(root, record, rel)
}

/// Runs the model over every manifest record and pools the confusions.
///
/// Predictions come from argmax over the two logits; ground truth is the
/// annotated label mask (falling back to the analytic mask where no
/// annotation exists). The false-positive rate is measured over the
/// records flagged static_only.
pub fn evaluate(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    manifest: &DatasetManifest,
    root: &Path,
) -> Result<EvalReport, EvalError> {
    if manifest.records.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    let mut preds = Vec::with_capacity(manifest.records.len());
    let mut gts = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let image_t = RgbRaster::read_ppm(&root.join(&record.image_t))
            .map_err(|e| data_err(record, format!("reading {}: {e}", record.image_t)))?;
        let image_prev = RgbRaster::read_ppm(&root.join(&record.image_t_minus_1))
            .map_err(|e| data_err(record, format!("reading {}: {e}", record.image_t_minus_1)))?;
        let gt = scoring_mask(root, record)?;
        if image_t.width() != gt.width() || image_t.height() != gt.height() {
            return Err(data_err(
                record,
                format!(
                    "image is {}x{} but mask is {}x{}",
                    image_t.width(),
                    image_t.height(),
                    gt.width(),
                    gt.height()
                ),
            ));
        }
        let logits = infer(weights, cfg, &frame_tensor(&image_t), &frame_tensor(&image_prev))?;
        let pred = logits_to_mask(&logits)?;
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(data_err(
                record,
                format!(
                    "model output is {}x{} but mask is {}x{}",
                    pred.width(),
                    pred.height(),
                    gt.width(),
                    gt.height()
                ),
            ));
        }
        preds.push(pred);
        gts.push(gt);
    }
    let prediction_records: Vec<PredictionRecord<'_>> = manifest
        .records
        .iter()
        .zip(preds.iter().zip(&gts))
        .map(|(record, (pred, gt))| PredictionRecord {
            scene_id: &record.scene_id,
            frame_index: record.frame_index,
            pred,
            gt,
            static_only: record.static_only,
        })
        .collect();
    report_from_predictions(&prediction_records)
}

/// Aggregate statistics over one manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_frames: usize,
    pub n_scenes: usize,
    /// Moving-object annotations summed over the annotation sidecars.
    pub n_moving_annotations: usize,
    pub avg_moving_objects_per_frame: f64,
    pub pct_moving_pixels: f64,
    pub pct_static_pixels: f64,
}

/// Exact tallies over the manifest's masks and annotation sidecars.
/// Records without a sidecar contribute zero annotations.
pub fn dataset_stats(manifest: &DatasetManifest, root: &Path) -> Result<DatasetStats, EvalError> {
    if manifest.records.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    let mut scenes = BTreeSet::new();
    let mut n_moving_annotations = 0usize;
    let mut moving_fraction_sum = 0.0;
    for record in &manifest.records {
        scenes.insert(record.scene_id.clone());
        if let Some(rel) = &record.annotation {
            let path = root.join(rel);
            let body = fs::read(&path).map_err(|e| EvalError::Io { path: path.clone(), source: e })?;
            let sidecar: FrameAnnotationFile = serde_json::from_slice(&body)
                .map_err(|e| EvalError::Json { path, source: e })?;
            n_moving_annotations += sidecar
                .annotations
                .iter()
                .filter(|a| a.label == MotionLabel::Moving)
                .count();
        }
        let mask = scoring_mask(root, record)?;
        moving_fraction_sum += mask.moving_fraction();
    }
    let n_frames = manifest.records.len();
    let pct_moving_pixels = 100.0 * moving_fraction_sum / n_frames as f64;
    Ok(DatasetStats {
        n_frames,
        n_scenes: scenes.len(),
        n_moving_annotations,
        avg_moving_objects_per_frame: n_moving_annotations as f64 / n_frames as f64,
        pct_moving_pixels,
        pct_static_pixels: 100.0 - pct_moving_pixels,
    })
}

/// Rounds to `digits` significant digits; report files and printed
/// metrics all pass through this.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits - 1 - magnitude);
    (x * factor).round() / factor
}

fn rounded_report(report: &EvalReport) -> EvalReport {
    EvalReport {
        iou_moving: round_sig(report.iou_moving, 6),
        iou_static: round_sig(report.iou_static, 6),
        miou: round_sig(report.miou, 6),
        per_frame: report
            .per_frame
            .iter()
            .map(|f| FrameIou {
                scene_id: f.scene_id.clone(),
                frame_index: f.frame_index,
                iou_moving: round_sig(f.iou_moving, 6),
                iou_static: round_sig(f.iou_static, 6),
                miou: round_sig(f.miou, 6),
            })
            .collect(),
        fp_rate_static_scenes: round_sig(report.fp_rate_static_scenes, 6),
    }
}

/// Writes the report as JSON with all values at 6 significant digits.
pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut body = serde_json::to_vec_pretty(&rounded_report(report))
        .map_err(|e| EvalError::Json { path: path.to_path_buf(), source: e })?;
    body.push(b'\n');
    fs::write(path, body).map_err(|e| EvalError::Io { path: path.to_path_buf(), source: e })
}

/// Writes the per-frame IoU list as CSV
/// (`scene_id,frame_index,iou_moving,iou_static,miou`).
pub fn write_per_frame_csv(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut body = String::from("scene_id,frame_index,iou_moving,iou_static,miou\n");
    for f in &report.per_frame {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            f.scene_id,
            f.frame_index,
            round_sig(f.iou_moving, 6),
            round_sig(f.iou_static, 6),
            round_sig(f.miou, 6)
        ));
    }
    fs::write(path, body).map_err(|e| EvalError::Io { path: path.to_path_buf(), source: e })
}

/// Writes dataset statistics as JSON at 6 significant digits.
pub fn write_stats(path: &Path, stats: &DatasetStats) -> Result<(), EvalError> {
    let rounded = DatasetStats {
        n_frames: stats.n_frames,
        n_scenes: stats.n_scenes,
        n_moving_annotations: stats.n_moving_annotations,
        avg_moving_objects_per_frame: round_sig(stats.avg_moving_objects_per_frame, 6),
        pct_moving_pixels: round_sig(stats.pct_moving_pixels, 6),
        pct_static_pixels: round_sig(stats.pct_static_pixels, 6),
    };
    let mut body = serde_json::to_vec_pretty(&rounded)
        .map_err(|e| EvalError::Json { path: path.to_path_buf(), source: e })?;
    body.push(b'\n');
    fs::write(path, body).map_err(|e| EvalError::Io { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from_bits(width: u32, height: u32, bits: &[u8]) -> SegmentationMask {
        SegmentationMask::from_data(width, height, bits.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let m = mask_from_bits(4, 2, &[0, 1, 0, 1, 1, 0, 0, 0]);
        let cm = confusion(&m, &m).unwrap();
        assert_eq!(cm.fp, 0);
        assert_eq!(cm.fn_, 0);
        assert_eq!(cm.total(), 8);
        assert_eq!(iou_from_confusion(&cm), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_static_prediction_counts_misses() {
        let mut gt_bits = vec![0u8; 100];
        for bit in gt_bits.iter_mut().take(10) {
            *bit = 1;
        }
        let gt = mask_from_bits(10, 10, &gt_bits);
        let pred = SegmentationMask::zeros(10, 10);
        let cm = confusion(&pred, &gt).unwrap();
        assert_eq!((cm.tp, cm.fn_, cm.tn, cm.fp), (0, 10, 90, 0));
        let (iou_moving, iou_static, miou) = iou_from_confusion(&cm);
        assert_eq!(iou_moving, 0.0);
        assert!((iou_static - 0.9).abs() < 1e-15);
        assert!((miou - 0.45).abs() < 1e-15);
    }

    #[test]
    fn one_percent_moving_all_static_predictor_scores_near_half() {
        let cm = ConfusionMatrix2 { tp: 0, fp: 0, fn_: 10, tn: 990 };
        let (iou_moving, iou_static, miou) = iou_from_confusion(&cm);
        assert_eq!(iou_moving, 0.0);
        assert!((iou_static - 0.99).abs() < 1e-15);
        assert!((miou - 0.495).abs() < 1e-15);
    }

    #[test]
    fn confusion_rejects_mismatched_shapes() {
        let a = SegmentationMask::zeros(4, 4);
        let b = SegmentationMask::zeros(4, 5);
        assert!(matches!(confusion(&a, &b), Err(EvalError::Shape { .. })));
    }

    #[test]
    fn empty_denominators_mean_perfect_agreement() {
        let empty = SegmentationMask::zeros(6, 6);
        let cm = confusion(&empty, &empty).unwrap();
        assert_eq!(iou_from_confusion(&cm), (1.0, 1.0, 1.0));
    }

    #[test]
    fn class_flip_swaps_matrix_corners() {
        let pred = mask_from_bits(4, 1, &[1, 1, 0, 0]);
        let gt = mask_from_bits(4, 1, &[1, 0, 1, 0]);
        let cm = confusion(&pred, &gt).unwrap();
        let flip = |m: &SegmentationMask| {
            let bits: Vec<u8> = m.data().iter().map(|&b| 1 - b).collect();
            mask_from_bits(m.width(), m.height(), &bits)
        };
        let flipped = confusion(&flip(&pred), &flip(&gt)).unwrap();
        assert_eq!(flipped.tp, cm.tn);
        assert_eq!(flipped.tn, cm.tp);
        assert_eq!(flipped.fp, cm.fn_);
        assert_eq!(flipped.fn_, cm.fp);
    }

    #[test]
    fn oracle_predictions_score_one() {
        let gt_a = mask_from_bits(4, 2, &[0, 1, 1, 0, 0, 0, 1, 0]);
        let gt_b = SegmentationMask::zeros(4, 2);
        let records = vec![
            PredictionRecord {
                scene_id: "scene_0000",
                frame_index: 1,
                pred: &gt_a,
                gt: &gt_a,
                static_only: false,
            },
            PredictionRecord {
                scene_id: "scene_0001",
                frame_index: 1,
                pred: &gt_b,
                gt: &gt_b,
                static_only: true,
            },
        ];
        let report = report_from_predictions(&records).unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.fp_rate_static_scenes, 0.0);
        assert_eq!(report.per_frame.len(), 2);
    }

    #[test]
    fn report_aggregates_are_order_invariant() {
        let a = mask_from_bits(2, 2, &[1, 0, 0, 0]);
        let b = mask_from_bits(2, 2, &[1, 1, 0, 0]);
        let c = mask_from_bits(2, 2, &[0, 0, 0, 1]);
        let d = mask_from_bits(2, 2, &[0, 1, 0, 1]);
        let fwd = vec![
            PredictionRecord {
                scene_id: "s0",
                frame_index: 1,
                pred: &a,
                gt: &b,
                static_only: false,
            },
            PredictionRecord {
                scene_id: "s1",
                frame_index: 1,
                pred: &c,
                gt: &d,
                static_only: false,
            },
        ];
        let rev = vec![
            PredictionRecord {
                scene_id: "s1",
                frame_index: 1,
                pred: &c,
                gt: &d,
                static_only: false,
            },
            PredictionRecord {
                scene_id: "s0",
                frame_index: 1,
                pred: &a,
                gt: &b,
                static_only: false,
            },
        ];
        let r1 = report_from_predictions(&fwd).unwrap();
        let r2 = report_from_predictions(&rev).unwrap();
        assert_eq!(r1.miou, r2.miou);
        assert_eq!(r1.iou_moving, r2.iou_moving);
        assert_eq!(r1.fp_rate_static_scenes, r2.fp_rate_static_scenes);
    }

    #[test]
    fn micro_average_over_identical_frames_matches_single_frame() {
        let pred = mask_from_bits(4, 1, &[1, 0, 1, 0]);
        let gt = mask_from_bits(4, 1, &[1, 1, 0, 0]);
        let single = vec![PredictionRecord {
            scene_id: "s",
            frame_index: 1,
            pred: &pred,
            gt: &gt,
            static_only: false,
        }];
        let triple: Vec<PredictionRecord<'_>> = (0..3)
            .map(|k| PredictionRecord {
                scene_id: "s",
                frame_index: k,
                pred: &pred,
                gt: &gt,
                static_only: false,
            })
            .collect();
        let r1 = report_from_predictions(&single).unwrap();
        let r3 = report_from_predictions(&triple).unwrap();
        assert_eq!(r1.miou, r3.miou);
        assert_eq!(r1.iou_moving, r3.iou_moving);
    }

    #[test]
    fn fp_rate_counts_only_static_scene_pixels() {
        let zeros = SegmentationMask::zeros(2, 2);
        let pred_static = mask_from_bits(2, 2, &[1, 0, 0, 0]);
        let pred_dynamic = mask_from_bits(2, 2, &[1, 1, 1, 1]);
        let records = vec![
            PredictionRecord {
                scene_id: "static",
                frame_index: 1,
                pred: &pred_static,
                gt: &zeros,
                static_only: true,
            },
            PredictionRecord {
                scene_id: "dynamic",
                frame_index: 1,
                pred: &pred_dynamic,
                gt: &zeros,
                static_only: false,
            },
        ];
        let report = report_from_predictions(&records).unwrap();
        assert!((report.fp_rate_static_scenes - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_record_list_is_rejected() {
        assert!(matches!(report_from_predictions(&[]), Err(EvalError::EmptyManifest)));
    }

    #[test]
    fn logits_argmax_breaks_ties_toward_static() {
        let logits = Tensor::from_vec(
            vec![1, 2, 2, 2],
            vec![
                0.0, 1.0, //
                2.0, -1.0, // static channel
                0.0, 1.0, //
                3.0, -1.0, // moving channel
            ],
        )
        .unwrap();
        let mask = logits_to_mask(&logits).unwrap();
        assert_eq!(mask.get(0, 0), 0, "tie goes to static");
        assert_eq!(mask.get(1, 0), 0);
        assert_eq!(mask.get(0, 1), 1);
        assert_eq!(mask.get(1, 1), 0);
    }

    #[test]
    fn frame_tensor_scales_into_unit_range() {
        let mut image = RgbRaster::black(2, 1);
        image.set(0, 0, [255, 0, 51]);
        let t = frame_tensor(&image);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[4] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn round_sig_keeps_six_digits() {
        assert_eq!(round_sig(1.0 / 3.0, 6), 0.333333);
        assert_eq!(round_sig(123456789.0, 6), 123457000.0);
        assert_eq!(round_sig(0.000123456789, 6), 0.000123457);
        assert_eq!(round_sig(0.0, 6), 0.0);
        assert_eq!(round_sig(-1.0 / 3.0, 6), -0.333333);
    }
}
