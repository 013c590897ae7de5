//! Gradient checks of both models and brute-force cross-checks of the
//! metrics, runnable from the command line.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{DepthMap, PixelLocation};
use crate::grid::{Grid, Mask};
use crate::metrics::{
    aggregate_plane_ious, depth_metrics, occlusion_iou, DepthMetrics, OcclusionIou,
    OcclusionMasks, BOUNDARY_PX, SURFACE_BAND,
};
use crate::nn::gradcheck::{gradient_check, GradCheckReport};
use crate::nn::model::{ImplicitExample, LabeledQuery, Query, RegressionExample};
use crate::nn::{EncoderInput, ImplicitModel, ModelConfig, RegressionModel};

pub const GRADCHECK_COORDINATES: usize = 60;
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Grid<[f32; 3]> {
    Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

/// A handful of labeled queries on two small random images.
pub fn implicit_probe(config: &ModelConfig, seed: u64) -> Vec<ImplicitExample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| {
            let img = random_image(&mut rng, 12, 8);
            let input = EncoderInput::new(config, &img, &[]).expect("probe size fits the stride");
            let queries = (0..24)
                .map(|_| LabeledQuery {
                    query: Query {
                        p: PixelLocation::new(rng.random_range(0.0..11.0), rng.random_range(0.0..7.0)),
                        d_virtual: rng.random_range(0.5..4.0),
                        prev: if rng.random_bool(0.3) { -1.0 } else { rng.random() },
                    },
                    label: rng.random_range(0..2) as f32,
                    is_edge: rng.random_bool(0.5),
                })
                .collect();
            ImplicitExample { input, queries }
        })
        .collect()
}

pub fn regression_probe(config: &ModelConfig, seed: u64) -> Vec<RegressionExample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| {
            let img = random_image(&mut rng, 12, 8);
            let target = DepthMap::new(Grid::from_fn(12, 8, |_, _| rng.random_range(0.5..5.0)));
            RegressionExample {
                input: EncoderInput::new(config, &img, &[]).expect("probe size fits the stride"),
                target,
            }
        })
        .collect()
}

pub fn check_implicit(seed: u64) -> GradCheckReport {
    let mut model = ImplicitModel::<f64>::new(ModelConfig::tiny(), seed).expect("tiny config");
    let probe = implicit_probe(&model.config, seed);
    gradient_check(
        &mut model,
        |m, grad| {
            if grad {
                m.loss_and_grad(&probe, 0.5).total
            } else {
                m.loss(&probe, 0.5).total
            }
        },
        GRADCHECK_COORDINATES,
        GRADCHECK_EPS,
        seed,
    )
}

pub fn check_regression(seed: u64) -> GradCheckReport {
    let mut model = RegressionModel::<f64>::new(ModelConfig::tiny(), seed).expect("tiny config");
    let probe = regression_probe(&model.config, seed);
    gradient_check(
        &mut model,
        |m, grad| {
            if grad {
                m.loss_and_grad(&probe).total
            } else {
                m.loss(&probe).total
            }
        },
        GRADCHECK_COORDINATES,
        GRADCHECK_EPS,
        seed,
    )
}

// Reference metric implementations: pixel sets and direct neighbourhood scans.

fn set_of(mask: &Mask, region: &HashSet<(usize, usize)>, class: bool) -> HashSet<(usize, usize)> {
    mask.indexed()
        .filter(|(u, v, &m)| m == class && region.contains(&(*u, *v)))
        .map(|(u, v, _)| (u, v))
        .collect()
}

fn reference_iou(pred: &Mask, gt: &Mask, region: &HashSet<(usize, usize)>) -> f64 {
    let class = |c: bool| {
        let (a, b) = (set_of(pred, region, c), set_of(gt, region, c));
        let union = a.union(&b).count();
        if union == 0 {
            100.0
        } else {
            100.0 * a.intersection(&b).count() as f64 / union as f64
        }
    };
    let (p, m) = (class(false), class(true));
    if p + m == 0.0 {
        0.0
    } else {
        2.0 * p * m / (p + m)
    }
}

pub fn reference_occlusion_iou(masks: &OcclusionMasks, dv: &DepthMap, dr: &DepthMap) -> Option<OcclusionIou> {
    let (w, h) = (masks.gt.width(), masks.gt.height());
    let region: HashSet<_> = masks.region.indexed().filter(|(_, _, r)| **r).map(|(u, v, _)| (u, v)).collect();
    if region.is_empty() {
        return None;
    }
    let edges: Vec<(usize, usize)> = masks
        .gt
        .indexed()
        .filter(|&(u, v, &g)| {
            let n = [(0, 1), (2, 1), (1, 0), (1, 2)];
            n.iter().any(|&(du, dv)| {
                let (x, y) = ((u + du) as isize - 1, (v + dv) as isize - 1);
                x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && *masks.gt.get(x as usize, y as usize) != g
            })
        })
        .map(|(u, v, _)| (u, v))
        .collect();
    let band: HashSet<_> = region
        .iter()
        .copied()
        .filter(|&(u, v)| {
            edges.iter().any(|&(x, y)| u.abs_diff(x) <= BOUNDARY_PX && v.abs_diff(y) <= BOUNDARY_PX)
        })
        .collect();
    let surface: HashSet<_> = region
        .iter()
        .copied()
        .filter(|&(u, v)| {
            let (a, b) = (*dv.values.get(u, v) as f64, *dr.values.get(u, v) as f64);
            ((a - b) / b).abs() <= SURFACE_BAND
        })
        .collect();
    let single = |c: bool| {
        let (a, b) = (set_of(&masks.pred, &region, c), set_of(&masks.gt, &region, c));
        let union = a.union(&b).count();
        if union == 0 {
            100.0
        } else {
            100.0 * a.intersection(&b).count() as f64 / union as f64
        }
    };
    Some(OcclusionIou {
        plus: single(false),
        minus: single(true),
        all: reference_iou(&masks.pred, &masks.gt, &region),
        surface: (!surface.is_empty()).then(|| reference_iou(&masks.pred, &masks.gt, &surface)),
        boundary: (!band.is_empty()).then(|| reference_iou(&masks.pred, &masks.gt, &band)),
    })
}

pub fn reference_aggregate(entries: &[(f64, Option<f64>)]) -> Option<f64> {
    let mut planes: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for &(d, v) in entries {
        if let Some(v) = v {
            if !planes.contains_key(&d.to_bits()) {
                order.push(d.to_bits());
            }
            planes.entry(d.to_bits()).or_default().push(v);
        }
    }
    if order.is_empty() {
        return None;
    }
    let means: Vec<f64> = order
        .iter()
        .map(|k| {
            let v = &planes[k];
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    Some(means.iter().sum::<f64>() / means.len() as f64)
}

pub fn reference_depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Option<DepthMetrics> {
    let pairs: Vec<(f64, f64)> = (0..gt.height())
        .flat_map(|v| (0..gt.width()).map(move |u| (u, v)))
        .filter_map(|(u, v)| Some((pred.get(u, v)? as f64, gt.get(u, v)? as f64)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(d, g)| f(d, g)).sum::<f64>() / n;
    let delta = |t: f64| 100.0 * pairs.iter().filter(|&&(d, g)| (d / g).max(g / d) < t).count() as f64 / n;
    Some(DepthMetrics {
        abs_diff: mean(&|d, g| (d - g).abs()),
        abs_rel: mean(&|d, g| (d - g).abs() / g),
        sq_rel: mean(&|d, g| (d - g) * (d - g) / g),
        rmse: mean(&|d, g| (d - g) * (d - g)).sqrt(),
        log_rmse: mean(&|d, g| (d.ln() - g.ln()).powi(2)).sqrt(),
        delta_105: delta(1.05),
        delta_110: delta(1.10),
        delta_125: delta(1.25),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCheck {
    pub instances: usize,
    pub mismatches: Vec<String>,
}

fn random_depth(rng: &mut ChaCha8Rng, w: usize, h: usize, invalid: f64) -> DepthMap {
    DepthMap::new(Grid::from_fn(w, h, |_, _| {
        if rng.random_bool(invalid) {
            f32::NAN
        } else {
            // a coarse grid makes exact surface-band ties likely
            rng.random_range(2..40) as f32 * 0.125
        }
    }))
}

/// Compares the metrics against the reference implementations on `instances`
/// random problems of at most 16×16 pixels. Equality is exact.
pub fn check_metrics(instances: usize, seed: u64) -> MetricCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MetricCheck {
        instances,
        mismatches: Vec::new(),
    };
    for i in 0..instances {
        let (w, h) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let dv = random_depth(&mut rng, w, h, 0.1);
        let dr = random_depth(&mut rng, w, h, 0.1);
        let flip = rng.random_range(0.0..0.4);
        let gt_probe = OcclusionMasks::from_depths(Grid::new(w, h, false), &dv, &dr).unwrap();
        let pred = gt_probe.gt.map(|&g| if rng.random_bool(flip) { !g } else { g });
        let masks = OcclusionMasks { pred, ..gt_probe };
        let fast = occlusion_iou(&masks, &dv, &dr, BOUNDARY_PX, SURFACE_BAND).ok();
        let slow = reference_occlusion_iou(&masks, &dv, &dr);
        if fast != slow {
            out.mismatches.push(format!("occlusion_iou #{i}: {fast:?} vs {slow:?}"));
        }

        let entries: Vec<(f64, Option<f64>)> = (0..rng.random_range(1..12))
            .map(|_| {
                let plane = rng.random_range(1..5) as f64 * 0.5;
                let v = rng.random_bool(0.8).then(|| rng.random_range(0.0..100.0));
                (plane, v)
            })
            .collect();
        let fast = aggregate_plane_ious(&entries).ok();
        let slow = reference_aggregate(&entries);
        if fast != slow {
            out.mismatches.push(format!("aggregate_plane_ious #{i}: {fast:?} vs {slow:?}"));
        }

        let fast = depth_metrics(&dv, &dr).ok();
        let slow = reference_depth_metrics(&dv, &dr);
        if fast != slow {
            out.mismatches.push(format!("depth_metrics #{i}: {fast:?} vs {slow:?}"));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub implicit: GradCheckReport,
    pub regression: GradCheckReport,
    pub metrics: MetricCheck,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.implicit.max_relative_error < GRADCHECK_TOLERANCE
            && self.regression.max_relative_error < GRADCHECK_TOLERANCE
            && self.implicit.coordinates >= 50
            && self.regression.coordinates >= 50
            && self.metrics.mismatches.is_empty()
    }
}

pub fn run(seed: u64) -> SelftestReport {
    SelftestReport {
        implicit: check_implicit(seed),
        regression: check_regression(seed),
        metrics: check_metrics(100, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        let r = run(0);
        assert!(r.passed(), "{r:#?}");
    }
}
