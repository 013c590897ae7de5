//! The convolutional encoder, the per-pixel occlusion head, and the two
//! models built from them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    elu_backward, elu_in_place, gather_channels, scatter_channels, sigmoid, Conv2d, Linear,
    Taps,
};
use super::loss::{bce_loss, edge_regularizer_slope, BCE_CLAMP};
use super::{Param, Scalar, Tensor3, Trainable};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, PixelLocation};
use crate::grid::{Grid, RgbImage};

/// Depth range of the regression head, meters.
pub const MIN_REGRESSED_DEPTH: f64 = 0.25;
pub const MAX_REGRESSED_DEPTH: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Implicit,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `K`, channels of the feature map.
    pub feature_channels: usize,
    /// Output widths of the first three convolutions.
    pub encoder_widths: [usize; 3],
    pub strides: [usize; 4],
    pub mlp_hidden: usize,
    /// Earlier frames stacked onto the input as extra channels.
    pub previous_frames: usize,
    /// Adds normalized pixel-coordinate channels to the encoder input.
    pub coord_channels: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: 32,
            encoder_widths: [16, 32, 32],
            strides: [1, 2, 1, 1],
            mlp_hidden: 128,
            previous_frames: 0,
            coord_channels: true,
        }
    }
}

impl ModelConfig {
    /// Under 10⁴ parameters, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            feature_channels: 4,
            encoder_widths: [4, 6, 6],
            strides: [1, 2, 1, 1],
            mlp_hidden: 8,
            previous_frames: 0,
            coord_channels: true,
        }
    }

    pub fn input_channels(&self) -> usize {
        3 * (1 + self.previous_frames) + if self.coord_channels { 2 } else { 0 }
    }

    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("feature and hidden widths must be >= 1".into()));
        }
        if self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be >= 1".into()));
        }
        if self.strides.iter().any(|s| *s == 0) || ![1, 2, 4].contains(&self.stride()) {
            return Err(Error::Config(format!(
                "stride product must be 1, 2 or 4, got {:?}",
                self.strides
            )));
        }
        Ok(())
    }

    /// Per-pixel head input width, `K + 2`.
    pub fn head_inputs(&self) -> usize {
        self.feature_channels + 2
    }
}

/// Stacks the current frame, optional earlier frames and coordinate channels
/// into the encoder input.
#[derive(Clone, Debug)]
pub struct EncoderInput<S>(pub Tensor3<S>);

impl<S: Scalar> EncoderInput<S> {
    /// `previous` is ordered most recent first and must hold exactly
    /// `config.previous_frames` images.
    pub fn new(config: &ModelConfig, current: &RgbImage, previous: &[&RgbImage]) -> Result<Self> {
        let (w, h) = (current.width(), current.height());
        let stride = config.stride();
        if w % stride != 0 || h % stride != 0 {
            return Err(Error::Shape(format!(
                "image {w}x{h} is not divisible by the encoder stride {stride}"
            )));
        }
        if previous.len() != config.previous_frames {
            return Err(Error::Shape(format!(
                "model expects {} previous frames, got {}",
                config.previous_frames,
                previous.len()
            )));
        }
        let mut t = Tensor3::zeros(config.input_channels(), h, w);
        let n = w * h;
        for (slot, img) in std::iter::once(current).chain(previous.iter().copied()).enumerate() {
            if img.width() != w || img.height() != h {
                return Err(Error::Shape("previous frame size differs".into()));
            }
            for (i, px) in img.iter().enumerate() {
                for c in 0..3 {
                    t.data[(slot * 3 + c) * n + i] = S::lit(px[c] as f64);
                }
            }
        }
        if config.coord_channels {
            let base = 3 * (1 + config.previous_frames);
            for v in 0..h {
                for u in 0..w {
                    let i = v * w + u;
                    t.data[base * n + i] = S::lit(2.0 * u as f64 / (w.max(2) - 1) as f64 - 1.0);
                    t.data[(base + 1) * n + i] =
                        S::lit(2.0 * v as f64 / (h.max(2) - 1) as f64 - 1.0);
                }
            }
        }
        Ok(Self(t))
    }

    pub fn width(&self) -> usize {
        self.0.w
    }

    pub fn height(&self) -> usize {
        self.0.h
    }
}

/// `K × h × w` pixel-aligned features at `stride` relative to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S> {
    pub tensor: Tensor3<S>,
    pub stride: usize,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn channels(&self) -> usize {
        self.tensor.c
    }

    pub fn taps(&self, p: PixelLocation) -> Taps<S> {
        Taps::at(p, self.stride, self.tensor.h, self.tensor.w)
    }

    /// Bilinearly interpolated feature vector at a full-resolution location.
    pub fn sample(&self, p: PixelLocation, out: &mut [S]) {
        gather_channels(&self.tensor, &self.taps(p), out);
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<S> {
    pub convs: Vec<Conv2d<S>>,
}

pub struct EncoderCache<S> {
    caches: Vec<super::layers::ConvCache<S>>,
    outputs: Vec<Tensor3<S>>,
}

impl<S: Scalar> Encoder<S> {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let widths = [
            config.input_channels(),
            config.encoder_widths[0],
            config.encoder_widths[1],
            config.encoder_widths[2],
            config.feature_channels,
        ];
        let convs = (0..4)
            .map(|i| {
                Conv2d::new(
                    &format!("encoder.conv{}", i + 1),
                    widths[i],
                    widths[i + 1],
                    config.strides[i],
                    rng,
                )
            })
            .collect();
        Self { convs }
    }

    pub fn forward(&self, input: &EncoderInput<S>) -> (FeatureMap<S>, EncoderCache<S>) {
        let mut caches = Vec::with_capacity(4);
        let mut outputs: Vec<Tensor3<S>> = Vec::with_capacity(4);
        for conv in &self.convs {
            let x = outputs.last().unwrap_or(&input.0);
            let (mut y, cache) = conv.forward(x);
            elu_in_place(&mut y.data);
            caches.push(cache);
            outputs.push(y);
        }
        let stride = self.convs.iter().map(|c| c.stride).product();
        let fm = FeatureMap {
            tensor: outputs.last().unwrap().clone(),
            stride,
        };
        (fm, EncoderCache { caches, outputs })
    }

    pub fn backward(&mut self, cache: &EncoderCache<S>, grad_features: Tensor3<S>) {
        let mut grad = grad_features;
        for i in (0..self.convs.len()).rev() {
            elu_backward(&cache.outputs[i].data, &mut grad.data);
            match self.convs[i].backward(&cache.caches[i], &grad, i > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }

    fn params(&self) -> Vec<&Param<S>> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }
}

/// Three fully connected layers `(K+2) → H → H → 1`, ELU after the first two,
/// sigmoid output.
#[derive(Clone, Debug)]
pub struct MlpHead<S> {
    pub layers: [Linear<S>; 3],
}

pub struct MlpCache<S> {
    input: Vec<S>,
    hidden1: Vec<S>,
    hidden2: Vec<S>,
    n: usize,
}

impl<S: Scalar> MlpHead<S> {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = config.mlp_hidden;
        Self {
            layers: [
                Linear::new("mlp.fc1", config.head_inputs(), h, rng),
                Linear::new("mlp.fc2", h, h, rng),
                Linear::new("mlp.fc3", h, 1, rng),
            ],
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].in_features
    }

    /// Pre-sigmoid logits for `n` rows.
    pub fn forward(&self, input: Vec<S>, n: usize) -> (Vec<S>, MlpCache<S>) {
        let mut hidden1 = self.layers[0].forward(&input, n);
        elu_in_place(&mut hidden1);
        let mut hidden2 = self.layers[1].forward(&hidden1, n);
        elu_in_place(&mut hidden2);
        let logits = self.layers[2].forward(&hidden2, n);
        (
            logits,
            MlpCache {
                input,
                hidden1,
                hidden2,
                n,
            },
        )
    }

    /// Takes d(loss)/d(logit) and returns the input gradient.
    pub fn backward(&mut self, cache: &MlpCache<S>, grad_logits: &[S]) -> Vec<S> {
        let n = cache.n;
        let mut g2 = self.layers[2]
            .backward(&cache.hidden2, grad_logits, n, true)
            .unwrap();
        elu_backward(&cache.hidden2, &mut g2);
        let mut g1 = self.layers[1].backward(&cache.hidden1, &g2, n, true).unwrap();
        elu_backward(&cache.hidden1, &mut g1);
        self.layers[0].backward(&cache.input, &g1, n, true).unwrap()
    }

    fn params(&self) -> Vec<&Param<S>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// One occlusion query: is the virtual surface at `d_virtual` behind the
/// real scene at `p`? `prev` is the warped previous prediction or -1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub p: PixelLocation,
    pub d_virtual: f32,
    pub prev: f32,
}

/// A query with its supervision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledQuery {
    pub query: Query,
    pub label: f32,
    pub is_edge: bool,
}

pub struct ImplicitExample<S> {
    pub input: EncoderInput<S>,
    pub queries: Vec<LabeledQuery>,
}

pub struct RegressionExample<S> {
    pub input: EncoderInput<S>,
    pub target: DepthMap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean binary cross-entropy (implicit) or mean log-depth L1 (regression).
    pub data: f64,
    pub reg: f64,
    pub total: f64,
}

/// Encoder plus per-pixel MLP head predicting the compositing mask.
#[derive(Clone, Debug)]
pub struct ImplicitModel<S> {
    pub config: ModelConfig,
    pub encoder: Encoder<S>,
    pub head: MlpHead<S>,
}

const QUERY_CHUNK: usize = 4096;

impl<S: Scalar> ImplicitModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let head = MlpHead::new(&config, &mut rng);
        Ok(Self {
            config,
            encoder,
            head,
        })
    }

    pub fn encode(&self, input: &EncoderInput<S>) -> FeatureMap<S> {
        self.encoder.forward(input).0
    }

    fn head_row(fm: &FeatureMap<S>, q: &Query, row: &mut [S]) {
        let k = fm.channels();
        fm.sample(q.p, &mut row[..k]);
        row[k] = S::lit(q.d_virtual as f64);
        row[k + 1] = S::lit(q.prev as f64);
    }

    /// Sigmoid output for a single `(F(p), d_virtual, prev)` triple.
    pub fn mlp_forward(&self, feature: &[S], d_virtual: f64, prev: f64) -> Result<S> {
        let k = self.config.feature_channels;
        if feature.len() != k {
            return Err(Error::Shape(format!(
                "feature has {} channels, model expects {k}",
                feature.len()
            )));
        }
        let mut row = feature.to_vec();
        row.push(S::lit(d_virtual));
        row.push(S::lit(prev));
        let (z, _) = self.head.forward(row, 1);
        Ok(sigmoid(z[0]))
    }

    /// Occlusion probabilities for a batch of queries against one feature map.
    pub fn predict(&self, fm: &FeatureMap<S>, queries: &[Query]) -> Vec<S> {
        let width = self.head.inputs();
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(QUERY_CHUNK) {
            let mut x = vec![S::zero(); chunk.len() * width];
            for (q, row) in chunk.iter().zip(x.chunks_exact_mut(width)) {
                Self::head_row(fm, q, row);
            }
            let (z, _) = self.head.forward(x, chunk.len());
            out.extend(z.into_iter().map(sigmoid));
        }
        out
    }

    /// Mean BCE over all queries plus `lambda_reg` times the edge regularizer
    /// over edge queries. Accumulates gradients into every parameter.
    pub fn loss_and_grad(&mut self, batch: &[ImplicitExample<S>], lambda_reg: f64) -> LossBreakdown {
        self.run(batch, lambda_reg, true)
    }

    /// Same value as [`Self::loss_and_grad`] without touching gradients.
    pub fn loss(&mut self, batch: &[ImplicitExample<S>], lambda_reg: f64) -> LossBreakdown {
        self.run(batch, lambda_reg, false)
    }

    fn run(&mut self, batch: &[ImplicitExample<S>], lambda_reg: f64, grad: bool) -> LossBreakdown {
        let width = self.head.inputs();
        let k = self.config.feature_channels;
        let encoded: Vec<_> = batch.iter().map(|ex| self.encoder.forward(&ex.input)).collect();
        let n: usize = batch.iter().map(|ex| ex.queries.len()).sum();
        if n == 0 {
            return LossBreakdown::default();
        }
        let mut x = vec![S::zero(); n * width];
        let mut taps = Vec::with_capacity(n);
        let mut rows = x.chunks_exact_mut(width);
        for (ex, (fm, _)) in batch.iter().zip(&encoded) {
            for lq in &ex.queries {
                let row = rows.next().unwrap();
                Self::head_row(fm, &lq.query, row);
                taps.push(fm.taps(lq.query.p));
            }
        }
        let (logits, cache) = self.head.forward(x, n);
        let labels = batch.iter().flat_map(|ex| ex.queries.iter());
        let edge_count = batch
            .iter()
            .flat_map(|ex| &ex.queries)
            .filter(|q| q.is_edge)
            .count();

        let mut bce = 0.0;
        let mut reg = 0.0;
        let mut dz = Vec::with_capacity(n);
        for (&z, lq) in logits.iter().zip(labels) {
            let c = sigmoid(z).to_f64().unwrap();
            let y = lq.label as f64;
            bce += bce_loss(c, y);
            let mut g = if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&c) || (c - y).abs() > 0.5 {
                (c - y) / n as f64
            } else {
                0.0
            };
            if lq.is_edge {
                reg += 0.5 - (c - 0.5).abs();
                g += lambda_reg * 2.0 / edge_count as f64
                    * edge_regularizer_slope(c)
                    * c
                    * (1.0 - c);
            }
            dz.push(S::lit(g));
        }
        let bce = bce / n as f64;
        let reg = if edge_count > 0 {
            2.0 * reg / edge_count as f64
        } else {
            0.0
        };
        let out = LossBreakdown {
            data: bce,
            reg,
            total: bce + lambda_reg * reg,
        };
        if !grad {
            return out;
        }

        let dx = self.head.backward(&cache, &dz);
        let mut rows = dx.chunks_exact(width);
        let mut taps = taps.iter();
        for (ex, (fm, enc_cache)) in batch.iter().zip(&encoded) {
            let mut dfm = Tensor3::zeros(fm.tensor.c, fm.tensor.h, fm.tensor.w);
            for _ in &ex.queries {
                let row = rows.next().unwrap();
                scatter_channels(&mut dfm, taps.next().unwrap(), &row[..k]);
            }
            self.encoder.backward(enc_cache, dfm);
        }
        out
    }

    /// Copies the encoder weights of a trained regression model.
    pub fn warm_start_from(&mut self, other: &RegressionModel<S>) -> Result<()> {
        if !encoders_compatible(&self.config, &other.config) {
            return Err(Error::Config("encoder architectures differ".into()));
        }
        for (dst, src) in self.encoder.params_mut().into_iter().zip(other.encoder.params()) {
            dst.value.clone_from(&src.value);
        }
        Ok(())
    }

    /// Same weights in another precision.
    pub fn cast<T: Scalar>(&self) -> ImplicitModel<T> {
        let mut out = ImplicitModel::<T>::new(self.config.clone(), 0).expect("validated config");
        copy_values(self, &mut out);
        out
    }
}

fn encoders_compatible(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.feature_channels == b.feature_channels
        && a.encoder_widths == b.encoder_widths
        && a.strides == b.strides
        && a.previous_frames == b.previous_frames
        && a.coord_channels == b.coord_channels
}

fn copy_values<S: Scalar, T: Scalar>(src: &impl Trainable<S>, dst: &mut impl Trainable<T>) {
    for (d, s) in dst.params_mut().into_iter().zip(src.params()) {
        d.value = s.value.iter().map(|x| T::lit(x.to_f64().unwrap())).collect();
    }
}

impl<S: Scalar> Trainable<S> for ImplicitModel<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Same encoder followed by a one-channel convolutional depth head. Output
/// depth is `exp(ln 0.25 + ln 40 · σ(z))`, upsampled in log space, so it
/// always lies in `[0.25, 10]` m.
#[derive(Clone, Debug)]
pub struct RegressionModel<S> {
    pub config: ModelConfig,
    pub encoder: Encoder<S>,
    pub head: Conv2d<S>,
}

impl<S: Scalar> RegressionModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let head = Conv2d::new("depth_head", config.feature_channels, 1, 1, &mut rng);
        Ok(Self {
            config,
            encoder,
            head,
        })
    }

    fn log_bounds() -> (f64, f64) {
        let lo = MIN_REGRESSED_DEPTH.ln();
        (lo, MAX_REGRESSED_DEPTH.ln() - lo)
    }

    /// Squashed head output `σ(z)` at feature resolution, with caches.
    fn forward_low(
        &self,
        input: &EncoderInput<S>,
    ) -> (Vec<S>, Tensor3<S>, EncoderCache<S>, super::layers::ConvCache<S>) {
        let (fm, enc_cache) = self.encoder.forward(input);
        let (z, head_cache) = self.head.forward(&fm.tensor);
        let squashed = z.data.iter().map(|&v| sigmoid(v)).collect();
        (squashed, fm.tensor, enc_cache, head_cache)
    }

    pub fn predict_depth(&self, input: &EncoderInput<S>) -> DepthMap {
        let (squashed, fm, _, _) = self.forward_low(input);
        let (lo, span) = Self::log_bounds();
        let stride = self.config.stride();
        let (w, h) = (input.width(), input.height());
        let values = Grid::from_fn(w, h, |u, v| {
            let s = Taps::<S>::at(PixelLocation::pixel(u, v), stride, fm.h, fm.w).sample(&squashed);
            (lo + span * s.to_f64().unwrap()).exp() as f32
        });
        DepthMap::new(values)
    }

    pub fn loss_and_grad(&mut self, batch: &[RegressionExample<S>]) -> LossBreakdown {
        self.run(batch, true)
    }

    pub fn loss(&mut self, batch: &[RegressionExample<S>]) -> LossBreakdown {
        self.run(batch, false)
    }

    /// Mean `|ln d − ln g|` over valid target pixels of the whole batch.
    fn run(&mut self, batch: &[RegressionExample<S>], grad: bool) -> LossBreakdown {
        let (lo, span) = Self::log_bounds();
        let stride = self.config.stride();
        let total_pixels: usize = batch.iter().map(|ex| ex.target.valid_count()).sum();
        if total_pixels == 0 {
            return LossBreakdown::default();
        }
        let mut sum = 0.0;
        for ex in batch {
            let (squashed, fm, enc_cache, head_cache) = self.forward_low(&ex.input);
            let mut d_squashed = vec![S::zero(); squashed.len()];
            for (u, v, &ok) in ex.target.valid.indexed() {
                if !ok {
                    continue;
                }
                let taps = Taps::<S>::at(PixelLocation::pixel(u, v), stride, fm.h, fm.w);
                let s = taps.sample(&squashed).to_f64().unwrap();
                let residual = lo + span * s - (*ex.target.values.get(u, v) as f64).ln();
                sum += residual.abs();
                if grad {
                    let g = residual.signum() * span / total_pixels as f64;
                    if residual != 0.0 {
                        taps.scatter(&mut d_squashed, S::lit(g));
                    }
                }
            }
            if grad {
                let dz: Vec<S> = d_squashed
                    .iter()
                    .zip(&squashed)
                    .map(|(&g, &s)| g * s * (S::one() - s))
                    .collect();
                let dz = Tensor3::from_vec(1, fm.h, fm.w, dz);
                let dfm = self.head.backward(&head_cache, &dz, true).unwrap();
                self.encoder.backward(&enc_cache, dfm);
            }
        }
        let data = sum / total_pixels as f64;
        LossBreakdown {
            data,
            reg: 0.0,
            total: data,
        }
    }

    pub fn cast<T: Scalar>(&self) -> RegressionModel<T> {
        let mut out = RegressionModel::<T>::new(self.config.clone(), 0).expect("validated config");
        copy_values(self, &mut out);
        out
    }
}

impl<S: Scalar> Trainable<S> for RegressionModel<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.encoder.params();
        p.extend([&self.head.weight, &self.head.bias]);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.encoder.params_mut();
        p.extend([&mut self.head.weight, &mut self.head.bias]);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> RgbImage {
        Grid::from_fn(w, h, |u, v| {
            let x = f(u, v);
            [x, 0.5 * x, 1.0 - x]
        })
    }

    #[test]
    fn desk_resolution_feature_shape() {
        let model = ImplicitModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        let img = image(96, 64, |u, v| ((u + v) % 7) as f32 / 7.0);
        let input = EncoderInput::new(&model.config, &img, &[]).unwrap();
        let fm = model.encode(&input);
        assert_eq!((fm.tensor.c, fm.tensor.h, fm.tensor.w, fm.stride), (32, 32, 48, 2));
        assert!(fm.tensor.data.iter().all(|x| x.is_finite()));
        assert_eq!(fm, model.encode(&input));
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let config = ModelConfig::default();
        let img = image(95, 64, |_, _| 0.2);
        assert!(matches!(
            EncoderInput::<f32>::new(&config, &img, &[]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_features_and_half_probability() {
        let mut model = ImplicitModel::<f64>::new(ModelConfig::tiny(), 3).unwrap();
        for p in model.params_mut() {
            p.value.iter_mut().for_each(|x| *x = 0.0);
        }
        let img = image(8, 8, |u, _| u as f32 / 8.0);
        let fm = model.encode(&EncoderInput::new(&model.config, &img, &[]).unwrap());
        assert!(fm.tensor.data.iter().all(|&x| x == 0.0));
        let c = model.mlp_forward(&[0.3, 0.1, -0.2, 0.9], 2.0, -1.0).unwrap();
        assert_eq!(c, 0.5);
    }

    #[test]
    fn mlp_forward_rejects_wrong_feature_length() {
        let model = ImplicitModel::<f64>::new(ModelConfig::tiny(), 3).unwrap();
        assert!(matches!(model.mlp_forward(&[0.0; 3], 1.0, -1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn mlp_output_is_strictly_inside_unit_interval() {
        let model = ImplicitModel::<f32>::new(ModelConfig::tiny(), 9).unwrap();
        for d in [0.1, 1.0, 4.0, 8.0] {
            for prev in [-1.0, 0.0, 0.5, 1.0] {
                let c = model.mlp_forward(&[0.5, -0.5, 1.0, 0.0], d, prev).unwrap();
                assert!(c > 0.0 && c < 1.0);
            }
        }
    }

    #[test]
    fn mlp_weight_gradients_match_central_differences() {
        // d c / d w through the head alone, eps = 1e-4, rel. tolerance 1e-3
        let mut model = ImplicitModel::<f64>::new(ModelConfig::tiny(), 5).unwrap();
        let feature = [0.4, -0.3, 0.8, 0.1];
        let row = || {
            let mut r = feature.to_vec();
            r.extend([2.5, 0.7]);
            r
        };
        let (z, cache) = model.head.forward(row(), 1);
        let c = sigmoid(z[0]);
        model.zero_grad();
        model.head.backward(&cache, &[c * (1.0 - c)]);
        let eps = 1e-4;
        for li in 0..3 {
            for idx in 0..model.head.layers[li].weight.len() {
                let analytic = model.head.layers[li].weight.grad[idx];
                let orig = model.head.layers[li].weight.value[idx];
                model.head.layers[li].weight.value[idx] = orig + eps;
                let plus = model.mlp_forward(&feature, 2.5, 0.7).unwrap();
                model.head.layers[li].weight.value[idx] = orig - eps;
                let minus = model.mlp_forward(&feature, 2.5, 0.7).unwrap();
                model.head.layers[li].weight.value[idx] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let scale = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-3,
                    "layer {li} weight {idx}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn regression_depth_is_bounded() {
        let mut model = RegressionModel::<f32>::new(ModelConfig::tiny(), 1).unwrap();
        for (i, p) in model.params_mut().into_iter().enumerate() {
            p.value.iter_mut().for_each(|x| *x *= 40.0 * (i as f32 - 4.0));
        }
        let img = image(16, 8, |u, v| ((u * v) % 5) as f32 / 5.0);
        let d = model.predict_depth(&EncoderInput::new(&model.config, &img, &[]).unwrap());
        assert_eq!(d.valid_count(), 128);
        for x in d.valid_values() {
            assert!((0.25 - 1e-6..=10.0 + 1e-5).contains(&(x as f64)), "{x}");
        }
    }

    #[test]
    fn cast_preserves_predictions() {
        let model = ImplicitModel::<f32>::new(ModelConfig::tiny(), 2).unwrap();
        let wide = model.cast::<f64>();
        let a = model.mlp_forward(&[0.1, 0.2, 0.3, 0.4], 1.5, -1.0).unwrap() as f64;
        let b = wide.mlp_forward(&[0.1, 0.2, 0.3, 0.4], 1.5, -1.0).unwrap();
        assert!((a - b).abs() < 1e-6);
    }
}
