//! Mask prediction, compositing, threshold selection, binary-search depth and
//! temporal rollout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_sample_masked, render_plane_depth, warp_with_relative, DepthMap, PixelLocation,
    PlaneSpec, Pose,
};
use crate::grid::{Grid, Mask, RgbImage};
use crate::metrics::{aggregate_plane_ious, class_iou, harmonic_mean, OcclusionMasks};
use crate::nn::model::Query;
use crate::nn::{EncoderInput, FeatureMap, ImplicitModel, RegressionModel, Scalar};
use crate::scene::{Frame, Sequence};

/// Value fed as the previous prediction when none is available.
pub const NO_PREVIOUS: f32 = -1.0;

/// Per-pixel blend weight of the real image; only meaningful on `coverage`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositingMask {
    pub values: Grid<f32>,
    pub coverage: Mask,
}

impl CompositingMask {
    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    /// `values > tau` on coverage, false elsewhere.
    pub fn threshold(&self, tau: f64) -> Mask {
        Grid::from_fn(self.width(), self.height(), |u, v| {
            *self.coverage.get(u, v) && *self.values.get(u, v) as f64 > tau
        })
    }

    /// Grayscale image for saving: 1 where the real scene is shown.
    pub fn to_image(&self) -> Grid<f32> {
        Grid::from_fn(self.width(), self.height(), |u, v| {
            if *self.coverage.get(u, v) {
                *self.values.get(u, v)
            } else {
                1.0
            }
        })
    }
}

/// A frame of a sequence together with its history.
#[derive(Clone, Copy, Debug)]
pub struct FrameRef<'a> {
    pub sequence: &'a Sequence,
    pub index: usize,
}

impl<'a> FrameRef<'a> {
    pub fn new(sequence: &'a Sequence, index: usize) -> Self {
        Self { sequence, index }
    }

    pub fn frame(&self) -> &'a Frame {
        &self.sequence.frames[self.index]
    }

    /// Encoder input with `config.previous_frames` earlier frames; the first
    /// frame stands in for history before the sequence start.
    pub fn encoder_input<S: Scalar>(&self, config: &crate::nn::ModelConfig) -> Result<EncoderInput<S>> {
        let prev: Vec<&RgbImage> = (1..=config.previous_frames)
            .map(|k| &self.sequence.frames[self.index.saturating_sub(k)].rgb)
            .collect();
        EncoderInput::new(config, &self.frame().rgb, &prev)
    }
}

/// Anything answering "is the real surface in front of depth d at pixel p?"
/// with a probability. `prepare` runs once per frame.
pub trait MaskPredictor {
    type Prepared;

    fn prepare(&self, frame: FrameRef<'_>) -> Result<Self::Prepared>;

    fn predict(&self, prepared: &Self::Prepared, queries: &[Query]) -> Vec<f32>;

    /// Whether the predictor reads the previous-prediction input at all.
    fn uses_previous(&self) -> bool {
        false
    }
}

impl MaskPredictor for ImplicitModel<f32> {
    type Prepared = FeatureMap<f32>;

    fn prepare(&self, frame: FrameRef<'_>) -> Result<FeatureMap<f32>> {
        Ok(self.encode(&frame.encoder_input(&self.config)?))
    }

    fn predict(&self, fm: &FeatureMap<f32>, queries: &[Query]) -> Vec<f32> {
        ImplicitModel::predict(self, fm, queries)
    }

    fn uses_previous(&self) -> bool {
        true
    }
}

/// Hides the previous-prediction input, turning a temporal model into a
/// per-frame one.
pub struct WithoutPrevious<'a, P>(pub &'a P);

impl<P: MaskPredictor> MaskPredictor for WithoutPrevious<'_, P> {
    type Prepared = P::Prepared;

    fn prepare(&self, frame: FrameRef<'_>) -> Result<P::Prepared> {
        self.0.prepare(frame)
    }

    fn predict(&self, prepared: &P::Prepared, queries: &[Query]) -> Vec<f32> {
        let cleared: Vec<Query> = queries
            .iter()
            .map(|q| Query {
                prev: NO_PREVIOUS,
                ..*q
            })
            .collect();
        self.0.predict(prepared, &cleared)
    }
}

/// Ground-truth step classifier: 1 at or behind the real surface, 0 in front.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepOracle;

impl MaskPredictor for StepOracle {
    type Prepared = DepthMap;

    fn prepare(&self, frame: FrameRef<'_>) -> Result<DepthMap> {
        Ok(frame.frame().depth_gt.clone())
    }

    fn predict(&self, depth: &DepthMap, queries: &[Query]) -> Vec<f32> {
        queries
            .iter()
            .map(|q| match depth.get(q.p.u.round() as usize, q.p.v.round() as usize) {
                Some(real) if q.d_virtual >= real => 1.0,
                Some(_) => 0.0,
                None => 0.5,
            })
            .collect()
    }
}

/// The regression baseline seen as a mask predictor through [`blended_mask`].
pub struct BlendedRegression<'a> {
    pub model: &'a RegressionModel<f32>,
    pub band: f64,
}

impl MaskPredictor for BlendedRegression<'_> {
    type Prepared = DepthMap;

    fn prepare(&self, frame: FrameRef<'_>) -> Result<DepthMap> {
        Ok(self.model.predict_depth(&frame.encoder_input(&self.model.config)?))
    }

    fn predict(&self, depth: &DepthMap, queries: &[Query]) -> Vec<f32> {
        queries
            .iter()
            .map(|q| {
                let real = depth.get(q.p.u.round() as usize, q.p.v.round() as usize);
                real.map_or(0.0, |r| blend_value(r as f64, q.d_virtual as f64, self.band))
            })
            .collect()
    }
}

/// The previous frame's mask and the pose it was predicted at.
#[derive(Clone, Copy, Debug)]
pub struct PreviousMask<'a> {
    pub mask: &'a CompositingMask,
    pub pose: &'a Pose,
}

/// Predicts the compositing mask of `frame` for a virtual surface with
/// per-pixel depth `d_virtual`, optionally conditioned on the warped
/// previous mask.
pub fn predict_mask<P: MaskPredictor>(
    predictor: &P,
    prepared: &P::Prepared,
    frame: FrameRef<'_>,
    d_virtual: &DepthMap,
    previous: Option<PreviousMask<'_>>,
) -> Result<CompositingMask> {
    let current = frame.frame();
    if !current.rgb.same_shape(&d_virtual.values) {
        return Err(Error::Shape(format!(
            "virtual depth {}x{} does not match frame {}x{}",
            d_virtual.width(),
            d_virtual.height(),
            current.rgb.width(),
            current.rgb.height()
        )));
    }
    let k = &frame.sequence.intrinsics;
    let relative = previous.map(|prev| prev.pose.inverse().compose(&current.pose));
    let mut queries = Vec::with_capacity(d_virtual.valid_count());
    let mut slots = Vec::with_capacity(queries.capacity());
    for (u, v, &ok) in d_virtual.valid.indexed() {
        if !ok {
            continue;
        }
        let p = PixelLocation::pixel(u, v);
        let d = *d_virtual.values.get(u, v);
        let prev = match (previous, &relative) {
            (Some(prev), Some(rel)) => warp_with_relative(p, d as f64, rel, k)
                .map_or(NO_PREVIOUS, |q| {
                    bilinear_sample_masked(&prev.mask.values, &prev.mask.coverage, q, NO_PREVIOUS)
                }),
            _ => NO_PREVIOUS,
        };
        queries.push(Query {
            p,
            d_virtual: d,
            prev,
        });
        slots.push(v * d_virtual.width() + u);
    }
    let predictions = predictor.predict(prepared, &queries);
    let mut values = Grid::new(d_virtual.width(), d_virtual.height(), 0.0f32);
    for (slot, c) in slots.into_iter().zip(predictions) {
        values.as_mut_slice()[slot] = c;
    }
    Ok(CompositingMask {
        values,
        coverage: d_virtual.valid.clone(),
    })
}

/// `C · real + (1 − C) · virtual` on coverage, the real image elsewhere.
pub fn composite(real: &RgbImage, virtual_image: &RgbImage, mask: &CompositingMask) -> Result<RgbImage> {
    if !real.same_shape(virtual_image) || !real.same_shape(&mask.values) {
        return Err(Error::Shape("composite inputs differ in size".into()));
    }
    Ok(Grid::from_fn(real.width(), real.height(), |u, v| {
        let r = *real.get(u, v);
        if !*mask.coverage.get(u, v) {
            return r;
        }
        let c = *mask.values.get(u, v);
        if c == 1.0 {
            return r;
        }
        let s = *virtual_image.get(u, v);
        [0, 1, 2].map(|i| c * r[i] + (1.0 - c) * s[i])
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    /// `(plane depth, τ)`, ascending in depth.
    pub entries: Vec<(f64, f64)>,
}

pub const DEFAULT_TAU: f64 = 0.5;

impl Default for ThresholdTable {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl ThresholdTable {
    /// τ of the nearest plane-depth bin, 0.5 for an empty table.
    pub fn tau_for(&self, depth: f64) -> f64 {
        self.entries
            .iter()
            .min_by(|a, b| (a.0 - depth).abs().total_cmp(&(b.0 - depth).abs()))
            .map_or(DEFAULT_TAU, |e| e.1)
    }

    pub fn uniform(planes: &[f64], tau: f64) -> Self {
        Self {
            entries: planes.iter().map(|&d| (d, tau)).collect(),
        }
    }
}

pub fn tau_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// IoU All of the thresholded mask against depth ground truth, per τ.
fn iou_all_per_tau(mask: &CompositingMask, d_virtual: &DepthMap, d_real: &DepthMap, taus: &[f64]) -> Result<Option<Vec<f64>>> {
    let base = OcclusionMasks::from_depths(mask.threshold(0.5), d_virtual, d_real)?;
    if !base.region.iter().any(|&r| r) {
        return Ok(None);
    }
    Ok(Some(
        taus.iter()
            .map(|&tau| {
                let pred = mask.threshold(tau);
                harmonic_mean(
                    class_iou(&pred, &base.gt, &base.region, false),
                    class_iou(&pred, &base.gt, &base.region, true),
                )
            })
            .collect(),
    ))
}

/// Picks, per frontoparallel plane depth, the τ of the 0.05 grid with the
/// best mean IoU All over the validation frames (every `frame_step`-th).
/// Ties go to the τ closest to 0.5.
pub fn select_thresholds<P: MaskPredictor>(
    predictor: &P,
    validation: &[Sequence],
    planes: &[f64],
    frame_step: usize,
) -> Result<ThresholdTable> {
    if validation.is_empty() {
        log::warn!("empty validation set, using tau = 0.5 everywhere");
        return Ok(ThresholdTable::uniform(planes, DEFAULT_TAU));
    }
    let taus = tau_grid();
    let mut scores: Vec<Vec<(f64, Option<f64>)>> = vec![Vec::new(); taus.len()];
    for seq in validation {
        for index in (0..seq.len()).step_by(frame_step.max(1)) {
            let frame = FrameRef::new(seq, index);
            let prepared = predictor.prepare(frame)?;
            for &d in planes {
                let spec = PlaneSpec::Frontoparallel { distance: d };
                let dv = render_plane_depth(&spec, &frame.frame().pose, &seq.intrinsics);
                let mask = predict_mask(predictor, &prepared, frame, &dv, None)?;
                let per_tau = iou_all_per_tau(&mask, &dv, &frame.frame().depth_gt, &taus)?;
                for (t, slot) in scores.iter_mut().enumerate() {
                    slot.push((d, per_tau.as_ref().map(|v| v[t])));
                }
            }
        }
    }
    let mut entries = Vec::with_capacity(planes.len());
    for &d in planes {
        let mut best: Option<(f64, f64)> = None;
        for (t, &tau) in taus.iter().enumerate() {
            let of_plane: Vec<_> = scores[t].iter().copied().filter(|e| e.0 == d).collect();
            let Ok(score) = aggregate_plane_ious(&of_plane) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((bt, bs)) => {
                    score > bs || (score == bs && (tau - 0.5).abs() < (bt - 0.5).abs())
                }
            };
            if better {
                best = Some((tau, score));
            }
        }
        entries.push((d, best.map_or(DEFAULT_TAU, |b| b.0)));
    }
    Ok(ThresholdTable { entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthSpacing {
    #[default]
    Linear,
    InverseDepth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySearchConfig {
    pub steps: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub spacing: DepthSpacing,
}

impl Default for BinarySearchConfig {
    fn default() -> Self {
        Self {
            steps: 12,
            d_min: 0.5,
            d_max: 8.0,
            spacing: DepthSpacing::Linear,
        }
    }
}

impl BinarySearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::Config(format!("invalid binary search config {self:?}")));
        }
        Ok(())
    }

    /// Final interval width in linear spacing.
    pub fn granularity(&self) -> f64 {
        (self.d_max - self.d_min) / 2f64.powi(self.steps as i32)
    }

    fn to_search(&self, d: f64) -> f64 {
        match self.spacing {
            DepthSpacing::Linear => d,
            DepthSpacing::InverseDepth => -1.0 / d,
        }
    }

    fn from_search(&self, x: f64) -> f64 {
        match self.spacing {
            DepthSpacing::Linear => x,
            DepthSpacing::InverseDepth => -1.0 / x,
        }
    }
}

/// Recovers a depth map by bisecting every pixel's ray with the occlusion
/// classifier; `prepared` comes from a single `prepare` of the frame.
/// A prediction above τ at depth m means the real surface is nearer than m,
/// so the upper bound moves down. τ is looked up per midpoint in `thresholds`.
pub fn binary_search_depth<P: MaskPredictor>(
    predictor: &P,
    prepared: &P::Prepared,
    width: usize,
    height: usize,
    config: &BinarySearchConfig,
    thresholds: &ThresholdTable,
) -> Result<DepthMap> {
    config.validate()?;
    let n = width * height;
    let mut lo = vec![config.to_search(config.d_min); n];
    let mut hi = vec![config.to_search(config.d_max); n];
    let mut queries: Vec<Query> = (0..n)
        .map(|i| Query {
            p: PixelLocation::pixel(i % width, i / width),
            d_virtual: 0.0,
            prev: NO_PREVIOUS,
        })
        .collect();
    for _ in 0..config.steps {
        for (i, q) in queries.iter_mut().enumerate() {
            q.d_virtual = config.from_search(0.5 * (lo[i] + hi[i])) as f32;
        }
        let c = predictor.predict(prepared, &queries);
        for i in 0..n {
            let mid = 0.5 * (lo[i] + hi[i]);
            if c[i] as f64 > thresholds.tau_for(queries[i].d_virtual as f64) {
                hi[i] = mid;
            } else {
                lo[i] = mid;
            }
        }
    }
    let values = (0..n)
        .map(|i| config.from_search(0.5 * (lo[i] + hi[i])) as f32)
        .collect();
    Ok(DepthMap::new(Grid::from_vec(width, height, values)))
}

/// Real-over-virtual weight for the depth-regression baseline: 1 when the
/// real surface is nearer by at least `band / 2`, 0 when farther by that much.
pub fn blend_value(d_real: f64, d_virtual: f64, band: f64) -> f32 {
    ((d_virtual - d_real) / band + 0.5).clamp(0.0, 1.0) as f32
}

pub const DEFAULT_BLEND_BAND: f64 = 0.2;

pub fn blended_mask(d_pred_real: &DepthMap, d_virtual: &DepthMap, band: f64) -> Result<CompositingMask> {
    if !d_pred_real.values.same_shape(&d_virtual.values) {
        return Err(Error::Shape("depth maps differ in size".into()));
    }
    if !(band > 0.0) {
        return Err(Error::Config("blend band must be positive".into()));
    }
    let values = Grid::from_fn(d_virtual.width(), d_virtual.height(), |u, v| {
        match (d_pred_real.get(u, v), d_virtual.get(u, v)) {
            (Some(r), Some(s)) => blend_value(r as f64, s as f64, band),
            _ => 0.0,
        }
    });
    Ok(CompositingMask {
        values,
        coverage: d_virtual.valid.clone(),
    })
}

/// Predicts a mask for every frame of `sequence`. With `temporal`, frame t is
/// conditioned on the mask of frame t − 1 warped into it.
pub fn rollout<P: MaskPredictor>(
    predictor: &P,
    sequence: &Sequence,
    plane: &PlaneSpec,
    temporal: bool,
) -> Result<Vec<CompositingMask>> {
    plane.validate()?;
    let mut masks: Vec<CompositingMask> = Vec::with_capacity(sequence.len());
    for index in 0..sequence.len() {
        let frame = FrameRef::new(sequence, index);
        let dv = render_plane_depth(plane, &frame.frame().pose, &sequence.intrinsics);
        let prepared = predictor.prepare(frame)?;
        let previous = match masks.last() {
            Some(mask) if temporal => Some(PreviousMask {
                mask,
                pose: &sequence.frames[index - 1].pose,
            }),
            _ => None,
        };
        masks.push(predict_mask(predictor, &prepared, frame, &dv, previous)?);
    }
    Ok(masks)
}

pub fn rollout_temporal<P: MaskPredictor>(
    predictor: &P,
    sequence: &Sequence,
    plane: &PlaneSpec,
) -> Result<Vec<CompositingMask>> {
    rollout(predictor, sequence, plane, true)
}
