//! Score-predictor networks: a convolutional backbone followed by a linear head with
//! one output (regression, pairwise ranking) or `K` outputs (bin classification).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    checkpoint, AutodiffError, BnMode, BnStats, ParamId, ParamStore, Real, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM,
};
use crate::data_io::{CHANNELS, IMAGE_BYTES, SIDE};
use crate::rng::SplitMix64;

/// Images per forward pass during inference.
pub const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("head has width {actual}, expected {expected}")]
    Head { expected: String, actual: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SmallCnn,
    Resnet18Like,
}

/// Per-channel statistics of pixel values scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for InputStats {
    fn default() -> Self {
        Self { mean: [0.0; CHANNELS], std: [1.0; CHANNELS] }
    }
}

impl InputStats {
    /// Channel statistics over a block of channel-major images.
    pub fn from_images(images: &[u8]) -> Self {
        let plane = SIDE * SIDE;
        let mut sum = [0f64; CHANNELS];
        let mut sq = [0f64; CHANNELS];
        for img in images.chunks_exact(IMAGE_BYTES) {
            for c in 0..CHANNELS {
                for &b in &img[c * plane..(c + 1) * plane] {
                    let v = b as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (images.len() / IMAGE_BYTES * plane) as f64;
        if count == 0.0 {
            return Self::default();
        }
        let mut stats = Self::default();
        for c in 0..CHANNELS {
            let mean = sum[c] / count;
            let var = (sq[c] / count - mean * mean).max(0.0);
            stats.mean[c] = mean;
            stats.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        stats
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub stage_widths: Vec<usize>,
    pub input_stats: InputStats,
}

impl BackboneConfig {
    /// Three stages of conv3×3 → relu → max-pool with widths 32, 64, 128.
    pub fn small_cnn() -> Self {
        Self { kind: BackboneKind::SmallCnn, stage_widths: vec![32, 64, 128], input_stats: InputStats::default() }
    }

    /// Four stages of two residual blocks with batch norm, widths 64…512.
    pub fn resnet18_like() -> Self {
        Self {
            kind: BackboneKind::Resnet18Like,
            stage_widths: vec![64, 128, 256, 512],
            input_stats: InputStats::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(ModelError::Config(format!(
                "stage widths {:?} must be non-empty and positive",
                self.stage_widths
            )));
        }
        // Every stage after the first halves the resolution (every stage for small_cnn).
        let halvings = match self.kind {
            BackboneKind::SmallCnn => self.stage_widths.len(),
            BackboneKind::Resnet18Like => self.stage_widths.len() - 1,
        };
        if halvings > 5 {
            return Err(ModelError::Config(format!(
                "{} stages shrink a {SIDE}×{SIDE} input below one pixel",
                self.stage_widths.len()
            )));
        }
        if self.input_stats.std.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.input_stats.mean.iter().any(|m| !m.is_finite())
        {
            return Err(ModelError::Config(format!("invalid input stats {:?}", self.input_stats)));
        }
        Ok(())
    }

    fn out_features(&self) -> usize {
        *self.stage_widths.last().expect("validated")
    }
}

#[derive(Clone, Copy, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvUnit {
    weight: ParamId,
    bias: Option<ParamId>,
    bn: Option<BnIds>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvUnit,
    conv2: ConvUnit,
    shortcut: Option<ConvUnit>,
}

#[derive(Clone, Debug)]
enum Body {
    Small(Vec<ConvUnit>),
    Resnet { stem: ConvUnit, blocks: Vec<ResBlock> },
}

/// Running-statistic updates produced by a train-mode forward pass.
#[derive(Debug, Default)]
pub struct BnUpdates<T> {
    entries: Vec<(ParamId, ParamId, BnStats<T>)>,
}

#[derive(Debug)]
pub struct Forward<T> {
    /// `[batch, head_width]`
    pub output: Var,
    pub bn_updates: BnUpdates<T>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: SplitMix64,
}

impl<T: Real> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.rng.uniform(-bound, bound))).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("shape"), true)
    }

    /// He-uniform (fan-in scaled) conv weights; bias or batch norm as requested.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, with_bn: bool) -> ConvUnit {
        let fan_in = cin * k * k;
        let weight = self.uniform(format!("{name}.weight"), &[cout, cin, k, k], (6.0 / fan_in as f64).sqrt());
        let (bias, bn) = if with_bn {
            let bn = BnIds {
                gamma: self.store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one()), true),
                beta: self.store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]), true),
                mean: self.store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]), false),
                var: self.store.add(format!("{name}.bn.running_var"), Tensor::full(&[cout], T::one()), false),
            };
            (None, Some(bn))
        } else {
            (Some(self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true)), None)
        };
        ConvUnit { weight, bias, bn, stride, pad: k / 2 }
    }
}

#[derive(Clone, Debug)]
pub struct ScorePredictor<T> {
    config: BackboneConfig,
    head_width: usize,
    seed: u64,
    params: ParamStore<T>,
    body: Body,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl<T: Real> ScorePredictor<T> {
    /// Builds a model with fan-in-scaled uniform initialization drawn from a
    /// SplitMix64 stream seeded with `seed`.
    pub fn build(config: BackboneConfig, head_width: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if head_width == 0 {
            return Err(ModelError::Config("head width must be at least 1".into()));
        }
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng: SplitMix64::new(seed) };
        let body = match config.kind {
            BackboneKind::SmallCnn => {
                let mut cin = CHANNELS;
                let mut units = Vec::new();
                for (i, &w) in config.stage_widths.iter().enumerate() {
                    units.push(b.conv(&format!("stage{i}.conv"), cin, w, 3, 1, false));
                    cin = w;
                }
                Body::Small(units)
            }
            BackboneKind::Resnet18Like => {
                let first = config.stage_widths[0];
                let stem = b.conv("stem", CHANNELS, first, 3, 1, true);
                let mut blocks = Vec::new();
                let mut cin = first;
                for (s, &w) in config.stage_widths.iter().enumerate() {
                    for j in 0..2 {
                        let stride = if s > 0 && j == 0 { 2 } else { 1 };
                        let name = format!("stage{s}.block{j}");
                        let conv1 = b.conv(&format!("{name}.conv1"), cin, w, 3, stride, true);
                        let conv2 = b.conv(&format!("{name}.conv2"), w, w, 3, 1, true);
                        let shortcut = (stride != 1 || cin != w)
                            .then(|| b.conv(&format!("{name}.shortcut"), cin, w, 1, stride, true));
                        blocks.push(ResBlock { conv1, conv2, shortcut });
                        cin = w;
                    }
                }
                Body::Resnet { stem, blocks }
            }
        };
        let features = config.out_features();
        let bound = 1.0 / (features as f64).sqrt();
        let head_weight = b.uniform("head.weight".into(), &[features, head_width], bound);
        let head_bias = params.add("head.bias", Tensor::zeros(&[head_width]), true);
        Ok(Self { config, head_width, seed, params, body, head_weight, head_bias })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn head_width(&self) -> usize {
        self.head_width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Sets the head weights and bias to zero.
    pub fn zero_head(&mut self) {
        for id in [self.head_weight, self.head_bias] {
            self.params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Scales bytes to `[0, 1]` and standardizes each channel: `[n, 3, 32, 32]`.
    pub fn normalize(&self, images: &[u8]) -> Result<Tensor<T>, ModelError> {
        if !images.len().is_multiple_of(IMAGE_BYTES) {
            return Err(ModelError::Config(format!(
                "image block of {} bytes is not a whole number of images",
                images.len()
            )));
        }
        let n = images.len() / IMAGE_BYTES;
        let plane = SIDE * SIDE;
        let stats = &self.config.input_stats;
        let scale: Vec<T> = stats.std.iter().map(|s| T::from_f64_lossy(1.0 / (255.0 * s))).collect();
        let shift: Vec<T> = stats.mean.iter().zip(&stats.std).map(|(m, s)| T::from_f64_lossy(m / s)).collect();
        let data = images
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let c = (i / plane) % CHANNELS;
                T::from_f64_lossy(b as f64) * scale[c] - shift[c]
            })
            .collect();
        Ok(Tensor::new(vec![n, CHANNELS, SIDE, SIDE], data)?)
    }

    fn conv_unit(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        unit: &ConvUnit,
        train: bool,
        updates: &mut BnUpdates<T>,
    ) -> Result<Var, ModelError> {
        let w = tape.param(&self.params, unit.weight);
        let b = unit.bias.map(|id| tape.param(&self.params, id));
        let mut y = tape.conv2d(x, w, b, unit.stride, unit.pad)?;
        if let Some(bn) = unit.bn {
            let gamma = tape.param(&self.params, bn.gamma);
            let beta = tape.param(&self.params, bn.beta);
            let mode = if train {
                BnMode::Train
            } else {
                BnMode::Eval { mean: self.params.get(bn.mean).value.data(), var: self.params.get(bn.var).value.data() }
            };
            let (out, stats) = tape.batch_norm(y, gamma, beta, mode, BN_EPS)?;
            if let Some(stats) = stats {
                updates.entries.push((bn.mean, bn.var, stats));
            }
            y = out;
        }
        Ok(y)
    }

    fn res_block(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        block: &ResBlock,
        train: bool,
        updates: &mut BnUpdates<T>,
    ) -> Result<Var, ModelError> {
        let h = self.conv_unit(tape, x, &block.conv1, train, updates)?;
        let h = tape.relu(h);
        let h = self.conv_unit(tape, h, &block.conv2, train, updates)?;
        let short = match &block.shortcut {
            Some(unit) => self.conv_unit(tape, x, unit, train, updates)?,
            None => x,
        };
        let sum = tape.add(h, short)?;
        Ok(tape.relu(sum))
    }

    /// Forward pass on a normalized batch. Train mode uses batch statistics in batch
    /// norm and reports running-statistic updates; apply them with
    /// [`ScorePredictor::apply_bn_updates`].
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, train: bool) -> Result<Forward<T>, ModelError> {
        let mut updates = BnUpdates::default();
        let mut x = input;
        match &self.body {
            Body::Small(units) => {
                for unit in units {
                    x = self.conv_unit(tape, x, unit, train, &mut updates)?;
                    x = tape.relu(x);
                    x = tape.max_pool2(x)?;
                }
            }
            Body::Resnet { stem, blocks } => {
                x = self.conv_unit(tape, x, stem, train, &mut updates)?;
                x = tape.relu(x);
                for block in blocks {
                    x = self.res_block(tape, x, block, train, &mut updates)?;
                }
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        let w = tape.param(&self.params, self.head_weight);
        let b = tape.param(&self.params, self.head_bias);
        let logits = tape.matmul(pooled, w)?;
        let output = tape.add_bias(logits, b)?;
        Ok(Forward { output, bn_updates: updates })
    }

    pub fn apply_bn_updates(&mut self, updates: BnUpdates<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for (mean_id, var_id, stats) in updates.entries {
            for (id, batch) in [(mean_id, stats.mean), (var_id, stats.var)] {
                let running = self.params.get_mut(id).value.data_mut();
                for (r, b) in running.iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    /// Eval-mode outputs `[n × head_width]`, row-major, processed in fixed chunks.
    pub fn infer(&self, images: &[u8]) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(images.len() / IMAGE_BYTES * self.head_width);
        for chunk in images.chunks(INFERENCE_CHUNK * IMAGE_BYTES) {
            let mut tape = Tape::new();
            let x = tape.constant(self.normalize(chunk)?);
            let fwd = self.forward(&mut tape, x, false)?;
            out.extend(tape.value(fwd.output).to_f64());
        }
        Ok(out)
    }

    /// One raw, unbounded score per image (higher = predicted easier).
    pub fn predict_scores(&self, images: &[u8]) -> Result<Vec<f64>, ModelError> {
        if self.head_width != 1 {
            return Err(ModelError::Head { expected: "1".into(), actual: self.head_width });
        }
        self.infer(images)
    }

    /// Raw bin logits, `[n × K]` row-major.
    pub fn predict_bins(&self, images: &[u8]) -> Result<Vec<f64>, ModelError> {
        if self.head_width < 2 {
            return Err(ModelError::Head { expected: "at least 2".into(), actual: self.head_width });
        }
        self.infer(images)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.params)
    }

    pub fn restore(&mut self, bytes: &[u8]) -> Result<(), ModelError> {
        checkpoint::restore(&mut self.params, checkpoint::decode(bytes)?)?;
        Ok(())
    }
}

/// Index of the largest value in each row of `[n × k]`; ties go to the lowest index.
pub fn argmax_rows(logits: &[f64], k: usize) -> Vec<usize> {
    logits
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
