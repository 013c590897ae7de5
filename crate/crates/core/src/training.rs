//! Query sampling, pseudo-previous corruption and the two training loops.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sobel_edge_mask, DepthMap, PixelLocation};
use crate::grid::{Mask, RgbImage};
use crate::nn::model::{
    ImplicitExample, LabeledQuery, LossBreakdown, Query, RegressionExample,
};
use crate::nn::{Adam, AdamConfig, EncoderInput, ImplicitModel, ModelConfig, RegressionModel};
use crate::scene::Sequence;

/// Gaussian draws at or below this depth are redrawn.
pub const MIN_SAMPLED_DEPTH: f64 = 0.05;
pub const EDGE_PERCENTILE: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Probability of drawing the query depth near the true surface.
    pub q: f64,
    /// Variance (m²) of the near-surface Gaussian.
    pub gaussian_variance: f64,
    /// Flip probability of the pseudo-previous prediction.
    pub p1: f64,
    /// Probability of the "no previous frame" sentinel.
    pub p2: f64,
    /// Width of the uniform softening noise on pseudo-previous labels.
    pub prev_noise: f64,
    pub lr: f64,
    /// Fractions of `steps` after which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub samples_per_image: usize,
    pub lambda_reg: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            q: 0.25,
            gaussian_variance: 0.05,
            p1: 0.25,
            p2: 0.25,
            prev_noise: 0.3,
            lr: 1e-3,
            lr_milestones: vec![0.6, 0.85],
            lr_decay: 0.1,
            steps: 4000,
            batch_size: 4,
            samples_per_image: 512,
            lambda_reg: 0.5,
            seed: 0,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {x}")))
            }
        };
        unit("q", self.q)?;
        unit("p1", self.p1)?;
        unit("p2", self.p2)?;
        unit("prev_noise", self.prev_noise)?;
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::Config("lambda_reg must be >= 0".into()));
        }
        if !(self.gaussian_variance > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("variance and learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.samples_per_image == 0 {
            return Err(Error::Config("batch size and samples per image must be >= 1".into()));
        }
        self.model.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self
            .lr_milestones
            .iter()
            .filter(|&&m| step as f64 >= m * self.steps as f64)
            .count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A training query with its label and pseudo-previous input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuerySample {
    pub frame: usize,
    pub p: PixelLocation,
    pub d_virtual: f32,
    /// 1 when the query depth is at or behind the real surface.
    pub label: f32,
    pub pseudo_prev: f32,
    pub is_edge: bool,
    /// Drawn from the near-surface Gaussian rather than the uniform range.
    pub near_surface: bool,
}

impl QuerySample {
    pub fn labeled(&self) -> LabeledQuery {
        LabeledQuery {
            query: Query {
                p: self.p,
                d_virtual: self.d_virtual,
                prev: self.pseudo_prev,
            },
            label: self.label,
            is_edge: self.is_edge,
        }
    }
}

/// Per-frame data needed for sampling, computed once.
#[derive(Clone, Debug)]
pub struct SamplingFrame {
    pub index: usize,
    pub depth: DepthMap,
    pub edges: Mask,
    valid: Vec<(usize, usize)>,
    range: (f32, f32),
}

impl SamplingFrame {
    pub fn new(index: usize, depth: &DepthMap) -> Result<Self> {
        let valid: Vec<_> = depth
            .valid
            .indexed()
            .filter(|(_, _, ok)| **ok)
            .map(|(u, v, _)| (u, v))
            .collect();
        let range = depth
            .range()
            .ok_or_else(|| Error::Sampling(format!("frame {index} has no valid depth")))?;
        Ok(Self {
            index,
            depth: depth.clone(),
            edges: sobel_edge_mask(depth, EDGE_PERCENTILE),
            valid,
            range,
        })
    }
}

/// Draws one query: a uniform valid pixel, and a depth that is near the
/// surface with probability `q` and uniform over the frame's depth range
/// otherwise.
pub fn sample_query(frame: &SamplingFrame, config: &TrainConfig, rng: &mut impl Rng) -> QuerySample {
    let &(u, v) = frame.valid.choose(rng).expect("SamplingFrame has valid pixels");
    let real = frame.depth.values.get(u, v);
    let near_surface = rng.random_bool(config.q);
    let d = if near_surface {
        let normal = Normal::new(*real as f64, config.gaussian_variance.sqrt()).unwrap();
        loop {
            let d = normal.sample(rng);
            if d > MIN_SAMPLED_DEPTH {
                break d;
            }
        }
    } else {
        let (lo, hi) = frame.range;
        lo as f64 + (hi - lo) as f64 * rng.random::<f64>()
    };
    let d_virtual = d as f32;
    let label = if d_virtual >= *real { 1.0 } else { 0.0 };
    QuerySample {
        frame: frame.index,
        p: PixelLocation::pixel(u, v),
        d_virtual,
        label,
        pseudo_prev: corrupt_previous(label, rng, config.p1, config.p2, config.prev_noise),
        is_edge: *frame.edges.get(u, v),
        near_surface,
    }
}

/// Synthesizes a previous-frame prediction from the label `y`: the sentinel
/// −1 with probability `p2`, else `|y − u|` with `u ~ U[0, noise]`, flipped
/// to `1 − c` with probability `p1`.
pub fn corrupt_previous(y: f32, rng: &mut impl Rng, p1: f64, p2: f64, noise: f64) -> f32 {
    if rng.random_bool(p2) {
        return -1.0;
    }
    let u = if noise > 0.0 {
        rng.random_range(0.0..noise)
    } else {
        0.0
    };
    let c = (y as f64 - u).abs() as f32;
    if rng.random_bool(p1) {
        1.0 - c
    } else {
        c
    }
}

/// One row of the loss history. For the regression model `bce` holds the
/// log-depth L1 loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub bce: f64,
    pub reg: f64,
    pub total: f64,
}

impl StepLoss {
    fn new(step: usize, l: LossBreakdown) -> Self {
        Self {
            step,
            bce: l.data,
            reg: l.reg,
            total: l.total,
        }
    }
}

pub fn history_csv(history: &[StepLoss]) -> String {
    let mut out = String::from("step,bce,reg,total\n");
    for h in history {
        writeln!(out, "{},{},{},{}", h.step, h.bce, h.reg, h.total).unwrap();
    }
    out
}

pub struct Trained<M> {
    pub model: M,
    pub history: Vec<StepLoss>,
}

/// Frames usable as training images (enough earlier frames for the model's
/// context), flattened over all sequences.
struct TrainingSet<'a> {
    sequences: &'a [Sequence],
    frames: Vec<(usize, SamplingFrame)>,
    previous: usize,
}

impl<'a> TrainingSet<'a> {
    fn new(sequences: &'a [Sequence], previous: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Config("training needs at least one sequence".into()));
        }
        let mut frames = Vec::new();
        for (s, seq) in sequences.iter().enumerate() {
            for (i, f) in seq.frames.iter().enumerate().skip(previous) {
                if f.depth_gt.valid_count() > 0 {
                    frames.push((s, SamplingFrame::new(i, &f.depth_gt)?));
                }
            }
        }
        if frames.is_empty() {
            return Err(Error::Sampling("no frame with valid depth to train on".into()));
        }
        Ok(Self {
            sequences,
            frames,
            previous,
        })
    }

    fn input(&self, s: usize, i: usize, config: &ModelConfig) -> Result<EncoderInput<f32>> {
        let seq = &self.sequences[s];
        let prev: Vec<&RgbImage> = (1..=self.previous).map(|k| &seq.frames[i - k].rgb).collect();
        EncoderInput::new(config, &seq.frames[i].rgb, &prev)
    }

    fn draw(&self, rng: &mut impl Rng) -> &(usize, SamplingFrame) {
        &self.frames[rng.random_range(0..self.frames.len())]
    }
}

fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn train_implicit(data: &[Sequence], config: &TrainConfig) -> Result<Trained<ImplicitModel<f32>>> {
    config.validate()?;
    let model = ImplicitModel::new(config.model.clone(), config.seed)?;
    train_implicit_from(model, data, config)
}

/// Continues training `model`, e.g. after a warm start.
pub fn train_implicit_from(
    mut model: ImplicitModel<f32>,
    data: &[Sequence],
    config: &TrainConfig,
) -> Result<Trained<ImplicitModel<f32>>> {
    config.validate()?;
    let set = TrainingSet::new(data, model.config.previous_frames)?;
    let mut rng = sampling_rng(config.seed);
    let adam = Adam::new(config.adam);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let (s, frame) = set.draw(&mut rng);
            let queries = (0..config.samples_per_image)
                .map(|_| sample_query(frame, config, &mut rng).labeled())
                .collect();
            batch.push(ImplicitExample {
                input: set.input(*s, frame.index, &model.config)?,
                queries,
            });
        }
        let loss = model.loss_and_grad(&batch, config.lambda_reg);
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adam.step(&mut model, config.lr_at(step))?;
        history.push(StepLoss::new(step, loss));
        if step % 100 == 0 {
            log::debug!("implicit step {step}: bce {:.4} reg {:.4}", loss.data, loss.reg);
        }
    }
    Ok(Trained { model, history })
}

/// Trains the depth regression baseline on every valid ground-truth pixel.
/// Only `steps`, `batch_size`, the learning-rate schedule, `seed` and `model`
/// are used from the config.
pub fn train_regression(
    data: &[Sequence],
    config: &TrainConfig,
) -> Result<Trained<RegressionModel<f32>>> {
    config.validate()?;
    let mut model = RegressionModel::new(config.model.clone(), config.seed)?;
    let set = TrainingSet::new(data, model.config.previous_frames)?;
    let mut rng = sampling_rng(config.seed);
    let adam = Adam::new(config.adam);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let (s, frame) = set.draw(&mut rng);
            batch.push(RegressionExample {
                input: set.input(*s, frame.index, &model.config)?,
                target: frame.depth.clone(),
            });
        }
        let loss = model.loss_and_grad(&batch);
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adam.step(&mut model, config.lr_at(step))?;
        history.push(StepLoss::new(step, loss));
        if step % 100 == 0 {
            log::debug!("regression step {step}: log-l1 {:.4}", loss.data);
        }
    }
    Ok(Trained { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn ramp_frame() -> SamplingFrame {
        let depth = DepthMap::new(Grid::from_fn(20, 10, |u, _| 1.0 + u as f32 * 0.1));
        SamplingFrame::new(0, &depth).unwrap()
    }

    #[test]
    fn corruption_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(corrupt_previous(1.0, &mut rng, 0.0, 1.0, 0.3), -1.0);
            assert_eq!(corrupt_previous(1.0, &mut rng, 0.0, 0.0, 0.0), 1.0);
            assert_eq!(corrupt_previous(1.0, &mut rng, 1.0, 0.0, 0.0), 0.0);
        }
    }

    #[test]
    fn softened_labels_stay_on_their_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let c = corrupt_previous(1.0, &mut rng, 0.0, 0.0, 0.3);
            assert!((0.7..=1.0).contains(&c));
            let c = corrupt_previous(0.0, &mut rng, 0.0, 0.0, 0.3);
            assert!((0.0..=0.3).contains(&c));
        }
    }

    #[test]
    fn frame_without_valid_depth_is_a_sampling_error() {
        let depth = DepthMap::new(Grid::new(4, 4, f32::NAN));
        assert!(matches!(SamplingFrame::new(3, &depth), Err(Error::Sampling(_))));
    }

    #[test]
    fn labels_follow_the_true_depth() {
        let frame = ramp_frame();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TrainConfig::default();
        for _ in 0..2000 {
            let s = sample_query(&frame, &cfg, &mut rng);
            let real = frame.depth.values.get(s.p.u as usize, s.p.v as usize);
            assert_eq!(s.label == 1.0, s.d_virtual >= *real);
            assert!(s.d_virtual as f64 > MIN_SAMPLED_DEPTH);
        }
    }

    #[test]
    fn learning_rate_drops_twice() {
        let cfg = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(59), 1e-3);
        assert!((cfg.lr_at(60) - 1e-4).abs() < 1e-12);
        assert!((cfg.lr_at(99) - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn invalid_probabilities_are_rejected() {
        let cfg = TrainConfig {
            p1: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lambda_reg: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig::default();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"steps": 7}"#).unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.q, 0.25);
    }
}
