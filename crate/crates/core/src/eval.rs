//! Evaluation drivers: run a predictor over held-out sequences and aggregate
//! the metrics the way the results tables do.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{percentile_sorted, render_plane_depth, DepthMap, PlaneSpec};
use crate::inference::{predict_mask, rollout, FrameRef, MaskPredictor, ThresholdTable};
use crate::metrics::{
    aggregate_plane_ious, depth_metrics, occlusion_iou, temporal_score, DepthMetrics,
    OcclusionMasks, TemporalConfig, BOUNDARY_PX, SURFACE_BAND,
};
use crate::scene::Sequence;

/// Parses `min:max:step` into the inclusive list of plane depths.
pub fn parse_plane_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("plane range {text:?} is not min:max:step")))?;
    let [min, max, step] = parts[..] else {
        return Err(Error::Config(format!("plane range {text:?} is not min:max:step")));
    };
    if !(min > 0.0 && max >= min && step > 0.0) {
        return Err(Error::Config(format!("plane range {text:?} must satisfy 0 < min <= max, step > 0")));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| min + step * i as f64).collect())
}

pub const DEFAULT_PLANES: &str = "0.5:5.0:0.5";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneResult {
    pub depth: f64,
    pub tau: f64,
    pub iou_all: Option<f64>,
    pub iou_surface: Option<f64>,
    pub iou_boundary: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionEvaluation {
    pub iou_all: f64,
    pub iou_surface: Option<f64>,
    pub iou_boundary: Option<f64>,
    pub frames: usize,
    pub planes: Vec<PlaneResult>,
}

fn of_plane(entries: &[(f64, Option<f64>)], d: f64) -> Option<f64> {
    let subset: Vec<_> = entries.iter().copied().filter(|e| e.0 == d).collect();
    aggregate_plane_ious(&subset).ok()
}

/// Per-frame, per-plane occlusion IoUs of single-frame predictions against
/// frontoparallel planes, using every `frame_step`-th frame.
pub fn evaluate_occlusion<P: MaskPredictor>(
    predictor: &P,
    sequences: &[Sequence],
    planes: &[f64],
    thresholds: &ThresholdTable,
    frame_step: usize,
) -> Result<OcclusionEvaluation> {
    let (mut all, mut surface, mut boundary) = (Vec::new(), Vec::new(), Vec::new());
    let mut frames = 0;
    for seq in sequences {
        for index in (0..seq.len()).step_by(frame_step.max(1)) {
            let frame = FrameRef::new(seq, index);
            let prepared = predictor.prepare(frame)?;
            frames += 1;
            for &d in planes {
                let spec = PlaneSpec::Frontoparallel { distance: d };
                let dv = render_plane_depth(&spec, &frame.frame().pose, &seq.intrinsics);
                let mask = predict_mask(predictor, &prepared, frame, &dv, None)?;
                let gt = &frame.frame().depth_gt;
                let masks = OcclusionMasks::from_depths(mask.threshold(thresholds.tau_for(d)), &dv, gt)?;
                match occlusion_iou(&masks, &dv, gt, BOUNDARY_PX, SURFACE_BAND) {
                    Ok(r) => {
                        all.push((d, Some(r.all)));
                        surface.push((d, r.surface));
                        boundary.push((d, r.boundary));
                    }
                    Err(Error::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    let planes = planes
        .iter()
        .map(|&d| PlaneResult {
            depth: d,
            tau: thresholds.tau_for(d),
            iou_all: of_plane(&all, d),
            iou_surface: of_plane(&surface, d),
            iou_boundary: of_plane(&boundary, d),
        })
        .collect();
    Ok(OcclusionEvaluation {
        iou_all: aggregate_plane_ious(&all)?,
        iou_surface: aggregate_plane_ious(&surface).ok(),
        iou_boundary: aggregate_plane_ious(&boundary).ok(),
        frames,
        planes,
    })
}

/// Mean of per-frame depth metrics for depth maps produced by `predict`.
pub fn evaluate_depth(
    sequences: &[Sequence],
    frame_step: usize,
    mut predict: impl FnMut(FrameRef<'_>) -> Result<DepthMap>,
) -> Result<DepthMetrics> {
    let mut per_frame = Vec::new();
    for seq in sequences {
        for index in (0..seq.len()).step_by(frame_step.max(1)) {
            let frame = FrameRef::new(seq, index);
            let pred = predict(frame)?;
            match depth_metrics(&pred, &frame.frame().depth_gt) {
                Ok(m) => per_frame.push(m),
                Err(Error::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    DepthMetrics::mean(&per_frame)
        .ok_or_else(|| Error::UndefinedMetric("no frame with valid depth".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalEvalConfig {
    pub subsequence: usize,
    /// Percentile of the first frame's depth at which the plane is placed.
    pub plane_percentile: f64,
    pub score: TemporalConfig,
    /// Feed the warped previous mask back into the predictor.
    pub temporal: bool,
}

impl Default for TemporalEvalConfig {
    fn default() -> Self {
        Self {
            subsequence: 15,
            plane_percentile: 0.75,
            score: TemporalConfig::default(),
            temporal: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalEvaluation {
    /// Mean temporal score over sub-sequences.
    pub score: f64,
    /// Mean IoU All over all frames of all sub-sequences.
    pub iou_all: f64,
    pub subsequences: usize,
}

/// The world-fixed plane of a sub-sequence, facing its first camera.
pub fn subsequence_plane(seq: &Sequence, percentile: f64) -> Result<PlaneSpec> {
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::UndefinedMetric("empty sequence".into()))?;
    let mut depths: Vec<f32> = first.depth_gt.valid_values().collect();
    depths.sort_by(f32::total_cmp);
    let distance = percentile_sorted(&depths, percentile)
        .ok_or_else(|| Error::UndefinedMetric("first frame has no valid depth".into()))?;
    Ok(PlaneSpec::FixedInWorld {
        anchor: first.pose,
        distance: distance as f64,
    })
}

/// Splits every sequence into whole sub-sequences, rolls the predictor out
/// over each against a world-fixed plane and scores flicker and accuracy.
pub fn evaluate_temporal<P: MaskPredictor>(
    predictor: &P,
    sequences: &[Sequence],
    thresholds: &ThresholdTable,
    config: &TemporalEvalConfig,
) -> Result<TemporalEvaluation> {
    let mut scores = Vec::new();
    let mut ious = Vec::new();
    for seq in sequences {
        for start in (0..seq.len()).step_by(config.subsequence) {
            if start + config.subsequence > seq.len() {
                break;
            }
            let sub = seq.slice(start..start + config.subsequence);
            let plane = subsequence_plane(&sub, config.plane_percentile)?;
            let tau = thresholds.tau_for(plane.distance());
            let masks = rollout(predictor, &sub, &plane, config.temporal)?;
            match temporal_score(&masks, &sub, tau, &config.score) {
                Ok(s) => scores.push(s),
                Err(Error::UndefinedMetric(_)) => continue,
                Err(e) => return Err(e),
            }
            for (mask, frame) in masks.iter().zip(&sub.frames) {
                let dv = render_plane_depth(&plane, &frame.pose, &sub.intrinsics);
                let m = OcclusionMasks::from_depths(mask.threshold(tau), &dv, &frame.depth_gt)?;
                if let Ok(r) = occlusion_iou(&m, &dv, &frame.depth_gt, BOUNDARY_PX, SURFACE_BAND) {
                    ious.push(r.all);
                }
            }
        }
    }
    if scores.is_empty() || ious.is_empty() {
        return Err(Error::UndefinedMetric("no scorable sub-sequence".into()));
    }
    Ok(TemporalEvaluation {
        score: scores.iter().sum::<f64>() / scores.len() as f64,
        iou_all: ious.iter().sum::<f64>() / ious.len() as f64,
        subsequences: scores.len(),
    })
}
