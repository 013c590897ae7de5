//! Occlusion IoU, depth error and temporal flicker metrics.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, PixelLocation};
use crate::grid::{Grid, Mask};
use crate::inference::CompositingMask;
use crate::scene::Sequence;

pub const BOUNDARY_PX: usize = 7;
pub const SURFACE_BAND: f64 = 0.05;

/// Binary occlusion masks (true = the real scene hides the virtual one) and
/// the pixels they are compared on.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMasks {
    pub pred: Mask,
    pub gt: Mask,
    pub region: Mask,
}

impl OcclusionMasks {
    /// Ground truth from depths; the region is where both are valid.
    pub fn from_depths(pred: Mask, d_virtual: &DepthMap, d_real: &DepthMap) -> Result<Self> {
        if !pred.same_shape(&d_virtual.values) || !d_virtual.values.same_shape(&d_real.values) {
            return Err(Error::Shape("occlusion masks and depth maps differ in size".into()));
        }
        let gt = Grid::from_fn(pred.width(), pred.height(), |u, v| {
            d_real.values.get(u, v) <= d_virtual.values.get(u, v)
        });
        let region = Grid::from_fn(pred.width(), pred.height(), |u, v| {
            *d_virtual.valid.get(u, v) && *d_real.valid.get(u, v)
        });
        Ok(Self { pred, gt, region })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionIou {
    /// IoU of the visible-virtual class (`gt = false`).
    pub plus: f64,
    /// IoU of the occluded class (`gt = true`).
    pub minus: f64,
    pub all: f64,
    /// `None` when no pixel falls in the band.
    pub surface: Option<f64>,
    pub boundary: Option<f64>,
}

/// Percent IoU of class `class` inside `region`; 100 when neither mask has it.
pub fn class_iou(pred: &Mask, gt: &Mask, region: &Mask, class: bool) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for ((&p, &g), &r) in pred.iter().zip(gt.iter()).zip(region.iter()) {
        if r {
            let (p, g) = (p == class, g == class);
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
    }
    if union == 0 {
        100.0
    } else {
        100.0 * inter as f64 / union as f64
    }
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

fn iou_all(pred: &Mask, gt: &Mask, region: &Mask) -> (f64, f64, f64) {
    let plus = class_iou(pred, gt, region, false);
    let minus = class_iou(pred, gt, region, true);
    (plus, minus, harmonic_mean(plus, minus))
}

/// Pixels whose ground-truth class differs from a 4-neighbour, dilated by a
/// `radius`-pixel square.
pub fn boundary_band(gt: &Mask, radius: usize) -> Mask {
    let (w, h) = (gt.width(), gt.height());
    let edge = Grid::from_fn(w, h, |u, v| {
        let here = *gt.get(u, v);
        (u > 0 && *gt.get(u - 1, v) != here)
            || (u + 1 < w && *gt.get(u + 1, v) != here)
            || (v > 0 && *gt.get(u, v - 1) != here)
            || (v + 1 < h && *gt.get(u, v + 1) != here)
    });
    // separable max filter
    let rows = Grid::from_fn(w, h, |u, v| {
        (u.saturating_sub(radius)..=(u + radius).min(w - 1)).any(|x| *edge.get(x, v))
    });
    Grid::from_fn(w, h, |u, v| {
        (v.saturating_sub(radius)..=(v + radius).min(h - 1)).any(|y| *rows.get(u, y))
    })
}

pub fn occlusion_iou(
    masks: &OcclusionMasks,
    d_virtual: &DepthMap,
    d_real: &DepthMap,
    boundary_px: usize,
    surface_band: f64,
) -> Result<OcclusionIou> {
    let OcclusionMasks { pred, gt, region } = masks;
    if !pred.same_shape(gt) || !gt.same_shape(region) || !region.same_shape(&d_real.values) {
        return Err(Error::Shape("occlusion inputs differ in size".into()));
    }
    if !region.iter().any(|&r| r) {
        return Err(Error::UndefinedMetric("empty evaluation region".into()));
    }
    let (plus, minus, all) = iou_all(pred, gt, region);
    let restricted = |band: Mask| {
        let sub = Grid::from_fn(band.width(), band.height(), |u, v| {
            *band.get(u, v) && *region.get(u, v)
        });
        sub.iter().any(|&b| b).then(|| iou_all(pred, gt, &sub).2)
    };
    let near_surface = Grid::from_fn(gt.width(), gt.height(), |u, v| {
        let (dv, dr) = (*d_virtual.values.get(u, v) as f64, *d_real.values.get(u, v) as f64);
        ((dv - dr) / dr).abs() <= surface_band
    });
    Ok(OcclusionIou {
        plus,
        minus,
        all,
        surface: restricted(near_surface),
        boundary: restricted(boundary_band(gt, boundary_px)),
    })
}

/// Mean over frames within each plane depth, then over plane depths.
/// `None` entries are skipped; planes without a defined entry drop out.
pub fn aggregate_plane_ious(entries: &[(f64, Option<f64>)]) -> Result<f64> {
    let mut planes: Vec<(f64, f64, usize)> = Vec::new();
    for &(plane, value) in entries {
        let Some(value) = value else { continue };
        match planes.iter_mut().find(|(d, _, _)| *d == plane) {
            Some(slot) => {
                slot.1 += value;
                slot.2 += 1;
            }
            None => planes.push((plane, value, 1)),
        }
    }
    if planes.is_empty() {
        return Err(Error::UndefinedMetric("no defined IoU to aggregate".into()));
    }
    Ok(planes.iter().map(|(_, s, n)| s / *n as f64).sum::<f64>() / planes.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_diff: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub delta_105: f64,
    pub delta_110: f64,
    pub delta_125: f64,
}

impl DepthMetrics {
    /// Element-wise mean.
    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&DepthMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(DepthMetrics {
            abs_diff: sum(|m| m.abs_diff),
            abs_rel: sum(|m| m.abs_rel),
            sq_rel: sum(|m| m.sq_rel),
            rmse: sum(|m| m.rmse),
            log_rmse: sum(|m| m.log_rmse),
            delta_105: sum(|m| m.delta_105),
            delta_110: sum(|m| m.delta_110),
            delta_125: sum(|m| m.delta_125),
        })
    }
}

/// Errors over pixels valid in both maps; δ values are percentages.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    if !pred.values.same_shape(&gt.values) {
        return Err(Error::Shape("depth maps differ in size".into()));
    }
    let mut m = DepthMetrics::default();
    let mut sq = 0.0;
    let mut log_sq = 0.0;
    let mut n = 0usize;
    for (i, (&d, &g)) in pred.values.iter().zip(gt.values.iter()).enumerate() {
        if !pred.valid.as_slice()[i] || !gt.valid.as_slice()[i] {
            continue;
        }
        let (d, g) = (d as f64, g as f64);
        let diff = d - g;
        n += 1;
        m.abs_diff += diff.abs();
        m.abs_rel += diff.abs() / g;
        m.sq_rel += diff * diff / g;
        sq += diff * diff;
        log_sq += (d.ln() - g.ln()).powi(2);
        let ratio = (d / g).max(g / d);
        m.delta_105 += (ratio < 1.05) as u8 as f64;
        m.delta_110 += (ratio < 1.10) as u8 as f64;
        m.delta_125 += (ratio < 1.25) as u8 as f64;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no pixel valid in both depth maps".into()));
    }
    let n = n as f64;
    Ok(DepthMetrics {
        abs_diff: m.abs_diff / n,
        abs_rel: m.abs_rel / n,
        sq_rel: m.sq_rel / n,
        rmse: (sq / n).sqrt(),
        log_rmse: (log_sq / n).sqrt(),
        delta_105: 100.0 * m.delta_105 / n,
        delta_110: 100.0 * m.delta_110 / n,
        delta_125: 100.0 * m.delta_125 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub warmup: usize,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            warmup: 2,
            max_points: 1024,
            seed: 0,
        }
    }
}

/// Visibility of a world point in each scored frame: `None` when it projects
/// outside the frame or the mask's coverage.
pub fn point_visibility(
    masks: &[CompositingMask],
    sequence: &Sequence,
    point: &nalgebra::Vector3<f64>,
    tau: f64,
    warmup: usize,
) -> Vec<Option<bool>> {
    let k = &sequence.intrinsics;
    masks
        .iter()
        .zip(&sequence.frames)
        .skip(warmup)
        .map(|(mask, frame)| {
            let local = frame.pose.inverse().transform_point(point);
            let p = k.project(&local)?;
            let (u, v) = (p.u.round(), p.v.round());
            if u < 0.0 || v < 0.0 || u as usize >= k.width || v as usize >= k.height {
                return None;
            }
            let (u, v) = (u as usize, v as usize);
            mask.coverage
                .get(u, v)
                .then(|| *mask.values.get(u, v) as f64 > tau)
        })
        .collect()
}

/// Flips between consecutive defined observations, divided by the number of
/// transitions; `None` with fewer than two observations.
pub fn flip_rate(observations: &[Option<bool>]) -> Option<f64> {
    let seen: Vec<bool> = observations.iter().flatten().copied().collect();
    if seen.len() < 2 {
        return None;
    }
    let flips = seen.windows(2).filter(|w| w[0] != w[1]).count();
    Some(flips as f64 / (seen.len() - 1) as f64)
}

/// 1000 × the mean per-point flip rate of the thresholded masks, over points
/// on ground-truth surfaces visible in the first frame.
pub fn temporal_score(
    masks: &[CompositingMask],
    sequence: &Sequence,
    tau: f64,
    config: &TemporalConfig,
) -> Result<f64> {
    if masks.len() != sequence.len() {
        return Err(Error::Shape("one mask per frame required".into()));
    }
    if masks.len() < config.warmup + 2 {
        return Err(Error::UndefinedMetric(format!(
            "{} frames is too short for warmup {}",
            masks.len(),
            config.warmup
        )));
    }
    let first = &sequence.frames[0];
    let pixels: Vec<(usize, usize)> = first
        .depth_gt
        .valid
        .indexed()
        .filter(|(_, _, ok)| **ok)
        .map(|(u, v, _)| (u, v))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chosen = sample(&mut rng, pixels.len(), config.max_points.min(pixels.len()));
    let k = &sequence.intrinsics;
    let mut rates = Vec::new();
    for i in chosen.iter() {
        let (u, v) = pixels[i];
        let local = k.unproject(PixelLocation::pixel(u, v), *first.depth_gt.values.get(u, v) as f64);
        let world = first.pose.transform_point(&local);
        let obs = point_visibility(masks, sequence, &world, tau, config.warmup);
        rates.extend(flip_rate(&obs));
    }
    if rates.is_empty() {
        return Err(Error::UndefinedMetric("no trackable points".into()));
    }
    Ok(1000.0 * rates.iter().sum::<f64>() / rates.len() as f64)
}

/// One method's numbers, in the column order of the results table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub iou_all: Option<f64>,
    pub iou_surface: Option<f64>,
    pub iou_boundary: Option<f64>,
    pub depth: Option<DepthMetrics>,
    pub temporal_score: Option<f64>,
}

impl MetricReport {
    pub fn table(reports: &[MetricReport]) -> String {
        let cell = |x: Option<f64>, digits: usize| match x {
            Some(x) => format!("{x:.digits$}"),
            None => "-".into(),
        };
        let mut out = format!(
            "{:<26} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
            "method", "IoU All", "Surface", "Boundary", "AbsRel", "RMSE", "d<1.05", "Temporal"
        );
        for r in reports {
            writeln!(
                out,
                "{:<26} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}",
                r.method,
                cell(r.iou_all, 2),
                cell(r.iou_surface, 2),
                cell(r.iou_boundary, 2),
                cell(r.depth.map(|d| d.abs_rel), 4),
                cell(r.depth.map(|d| d.rmse), 4),
                cell(r.depth.map(|d| d.delta_105), 2),
                cell(r.temporal_score, 1),
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_half(w: usize, h: usize) -> Mask {
        Grid::from_fn(w, h, |_, v| v < h / 2)
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let gt = Grid::from_fn(8, 8, |u, v| (u + v) % 3 == 0);
        let region = Grid::new(8, 8, true);
        let (plus, minus, all) = iou_all(&gt, &gt, &region);
        assert_eq!((plus, minus, all), (100.0, 100.0, 100.0));
    }

    #[test]
    fn all_false_prediction_on_half_mask() {
        let gt = rows_half(8, 8);
        let pred = Grid::new(8, 8, false);
        let region = Grid::new(8, 8, true);
        // visible class: 32 ∩ / 64 ∪; occluded class: 0 ∩ / 32 ∪
        assert_eq!(iou_all(&pred, &gt, &region), (50.0, 0.0, 0.0));
    }

    #[test]
    fn shifted_edge_hurts_boundary_more_than_overall() {
        let gt: Mask = Grid::from_fn(100, 100, |u, _| u < 50);
        let pred: Mask = Grid::from_fn(100, 100, |u, _| u < 51);
        let d = DepthMap::constant(100, 100, 2.0);
        let masks = OcclusionMasks {
            pred,
            gt,
            region: Grid::new(100, 100, true),
        };
        let r = occlusion_iou(&masks, &d, &d, BOUNDARY_PX, SURFACE_BAND).unwrap();
        assert!(r.boundary.unwrap() < r.all);
        // band covers columns 42..=57
        let band = boundary_band(&masks.gt, 7);
        assert_eq!(band.iter().filter(|&&b| b).count(), 16 * 100);
    }

    #[test]
    fn empty_region_is_undefined() {
        let m = Grid::new(4, 4, false);
        let masks = OcclusionMasks {
            pred: m.clone(),
            gt: m.clone(),
            region: m,
        };
        let d = DepthMap::constant(4, 4, 1.0);
        assert!(matches!(
            occlusion_iou(&masks, &d, &d, 7, 0.05),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn plane_aggregation() {
        assert_eq!(aggregate_plane_ious(&[(1.0, Some(42.0))]).unwrap(), 42.0);
        assert_eq!(aggregate_plane_ious(&[(1.0, Some(100.0)), (2.0, Some(50.0))]).unwrap(), 75.0);
        let two_level = [(1.0, Some(100.0)), (1.0, Some(0.0)), (2.0, Some(50.0))];
        assert_eq!(aggregate_plane_ious(&two_level).unwrap(), 50.0);
        assert_eq!(aggregate_plane_ious(&[(1.0, None), (2.0, Some(10.0))]).unwrap(), 10.0);
        assert!(aggregate_plane_ious(&[(1.0, None)]).is_err());
    }

    #[test]
    fn depth_metric_examples() {
        let gt = DepthMap::new(Grid::from_fn(6, 4, |u, v| 1.0 + (u * v) as f32 * 0.25));
        let m = depth_metrics(&gt, &gt).unwrap();
        assert_eq!((m.abs_rel, m.rmse, m.log_rmse), (0.0, 0.0, 0.0));
        assert_eq!((m.delta_105, m.delta_110, m.delta_125), (100.0, 100.0, 100.0));

        let scaled = DepthMap::new(gt.values.map(|d| d * 1.1));
        let m = depth_metrics(&scaled, &gt).unwrap();
        assert!((m.abs_rel - 0.1).abs() < 1e-6);
        assert_eq!((m.delta_105, m.delta_125), (0.0, 100.0));

        let m = depth_metrics(&DepthMap::constant(3, 3, 2.5), &DepthMap::constant(3, 3, 2.0))
            .unwrap();
        assert!((m.abs_diff - 0.5).abs() < 1e-12);
        assert!((m.sq_rel - 0.125).abs() < 1e-12);
        assert!((m.rmse - 0.5).abs() < 1e-12);
    }

    #[test]
    fn depth_metrics_need_valid_pixels() {
        let bad = DepthMap::new(Grid::new(2, 2, f32::NAN));
        assert!(depth_metrics(&bad, &bad).is_err());
    }

    #[test]
    fn flip_rates() {
        assert_eq!(flip_rate(&[Some(true); 13]), Some(0.0));
        let alternating: Vec<_> = (0..13).map(|i| Some(i % 2 == 0)).collect();
        assert_eq!(flip_rate(&alternating), Some(1.0));
        let mut one_flip = vec![Some(false); 13];
        one_flip[7..].iter_mut().for_each(|o| *o = Some(true));
        assert_eq!(flip_rate(&one_flip), Some(1.0 / 12.0));
        assert_eq!(flip_rate(&[None, Some(true), None]), None);
        assert_eq!(flip_rate(&[Some(true), None, Some(false)]), Some(1.0));
    }
}
