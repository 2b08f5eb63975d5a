//! Micro residual network with a per-class sigmoid head.
//!
//! Layout: a 3×3 stem convolution, then stages of residual blocks
//! (`conv-norm-relu-conv-norm`, add skip, relu), global average pooling and a
//! dense layer producing one logit per class. The first block of every stage
//! after the first halves the spatial resolution.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_sigmoid, NormMode, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::labels::{rank_descending, DecisionRule, LabelVector};
use crate::tensor::Tensor;

pub const NORM_EPSILON: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// (height, width) in pixels.
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub use_batch_norm: bool,
    pub seed: u64,
    /// Constant initial value of every head bias.
    pub head_bias_init: f64,
    /// Optional display names, one per class.
    pub class_names: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (32, 32),
            input_channels: 3,
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: 2,
            num_classes: 80,
            use_batch_norm: true,
            seed: 0,
            head_bias_init: -2.0,
            class_names: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || self.input_channels == 0 {
            return Err(Error::config("input size and channel count must be positive"));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::config("stage_channels must not be empty"));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("stage channel counts must be positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if !self.head_bias_init.is_finite() {
            return Err(Error::config("head_bias_init must be finite"));
        }
        let factor = 1usize << (self.stage_channels.len() - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::config(format!(
                "input size {h}x{w} must be divisible by {factor} for {} stages",
                self.stage_channels.len()
            )));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::config(format!(
                "{} class names given for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| format!("class_{class}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running: RunningStats,
}

/// A convolution optionally followed by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub conv: ConvLayer,
    pub norm: Option<NormLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
    /// Present iff the block changes channel count or spatial resolution.
    pub projection: Option<ConvUnit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub stem: ConvUnit,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub head: DenseLayer,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// He-normal weights (std = sqrt(2 / fan_in)); `norm_scale` seeds the batch-norm gain.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        norm: bool,
        norm_scale: f64,
    ) -> ConvUnit {
        let fan_in = in_c * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let data = (0..out_c * fan_in).map(|_| normal.sample(&mut self.rng)).collect();
        ConvUnit {
            conv: ConvLayer {
                weight: Tensor::new(vec![out_c, in_c, k, k], data).expect("consistent shape"),
                bias: Tensor::zeros(&[out_c]),
                stride,
                padding,
            },
            norm: norm.then(|| NormLayer {
                scale: Tensor::full(&[out_c], norm_scale),
                shift: Tensor::zeros(&[out_c]),
                running: RunningStats::identity(out_c),
            }),
        }
    }

    fn dense(&mut self, out_d: usize, in_d: usize, bias: f64) -> DenseLayer {
        let normal = Normal::new(0.0, (2.0 / in_d as f64).sqrt()).expect("finite std");
        let data = (0..out_d * in_d).map(|_| normal.sample(&mut self.rng)).collect();
        DenseLayer {
            weight: Tensor::new(vec![out_d, in_d], data).expect("consistent shape"),
            bias: Tensor::full(&[out_d], bias),
        }
    }
}

/// Options for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub norm_mode: NormMode,
    /// Ablation probe: drop the skip connection of block `(stage, block)`.
    pub drop_skip: Option<(usize, usize)>,
}

impl ForwardOptions {
    pub fn frozen() -> Self {
        ForwardOptions {
            norm_mode: NormMode::Frozen,
            drop_skip: None,
        }
    }

    pub fn train() -> Self {
        ForwardOptions {
            norm_mode: NormMode::Train,
            drop_skip: None,
        }
    }
}

/// Handles produced by recording a forward pass on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter leaves in [`Model::parameters`] order.
    pub params: Vec<Var>,
    /// Batch-norm outputs in [`Model::norm_layers_mut`] order.
    pub norm_outputs: Vec<Var>,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let norm = config.use_batch_norm;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let stem = init.conv(config.stage_channels[0], config.input_channels, 3, 1, 1, norm, 1.0);
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut in_c = config.stage_channels[0];
        for (s, &out_c) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let downsample = s > 0 && b == 0;
                let block_in = if b == 0 { in_c } else { out_c };
                let conv1 = if downsample {
                    // 4x4 / stride 2 / pad 1 halves even extents exactly
                    init.conv(out_c, block_in, 4, 2, 1, norm, 1.0)
                } else {
                    init.conv(out_c, block_in, 3, 1, 1, norm, 1.0)
                };
                // every block starts as its skip path: zero norm gain, or zero
                // weights when there is no norm to carry the gain
                let mut conv2 = init.conv(out_c, out_c, 3, 1, 1, norm, 0.0);
                if !norm {
                    conv2.conv.weight.data_mut().fill(0.0);
                }
                let projection = if downsample {
                    Some(init.conv(out_c, block_in, 2, 2, 0, norm, 1.0))
                } else if block_in != out_c {
                    Some(init.conv(out_c, block_in, 1, 1, 0, norm, 1.0))
                } else {
                    None
                };
                blocks.push(ResidualBlock {
                    conv1,
                    conv2,
                    projection,
                });
            }
            stages.push(blocks);
            in_c = out_c;
        }
        let head = init.dense(config.num_classes, in_c, config.head_bias_init);
        Ok(Model {
            config,
            stem,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.config.num_classes)
            .map(|c| self.config.class_name(c))
            .collect()
    }

    fn units(&self) -> Vec<&ConvUnit> {
        let mut units = vec![&self.stem];
        for block in self.stages.iter().flatten() {
            units.push(&block.conv1);
            units.push(&block.conv2);
            units.extend(block.projection.as_ref());
        }
        units
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit> {
        let mut units = vec![&mut self.stem];
        for block in self.stages.iter_mut().flatten() {
            units.push(&mut block.conv1);
            units.push(&mut block.conv2);
            units.extend(block.projection.as_mut());
        }
        units
    }

    fn unit_names(&self) -> Vec<String> {
        let mut names = vec!["stem".to_string()];
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                names.push(format!("stages.{s}.{b}.conv1"));
                names.push(format!("stages.{s}.{b}.conv2"));
                if block.projection.is_some() {
                    names.push(format!("stages.{s}.{b}.projection"));
                }
            }
        }
        names
    }

    /// Trainable tensors with their canonical names, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, unit) in self.unit_names().into_iter().zip(self.units()) {
            out.push((format!("{name}.weight"), &unit.conv.weight));
            out.push((format!("{name}.bias"), &unit.conv.bias));
            if let Some(norm) = &unit.norm {
                out.push((format!("{name}.norm.scale"), &norm.scale));
                out.push((format!("{name}.norm.shift"), &norm.shift));
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable view of the trainable tensors, same order as [`Model::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let Model { stem, stages, head, .. } = self;
        let mut units: Vec<&mut ConvUnit> = vec![stem];
        for block in stages.iter_mut().flatten() {
            units.push(&mut block.conv1);
            units.push(&mut block.conv2);
            units.extend(block.projection.as_mut());
        }
        for unit in units {
            out.push(&mut unit.conv.weight);
            out.push(&mut unit.conv.bias);
            if let Some(norm) = &mut unit.norm {
                out.push(&mut norm.scale);
                out.push(&mut norm.shift);
            }
        }
        out.push(&mut head.weight);
        out.push(&mut head.bias);
        out
    }

    pub fn norm_layers_mut(&mut self) -> Vec<&mut NormLayer> {
        self.units_mut()
            .into_iter()
            .filter_map(|u| u.norm.as_mut())
            .collect()
    }

    /// Running batch-norm statistics with canonical names.
    pub fn buffers(&self) -> Vec<(String, &RunningStats)> {
        self.unit_names()
            .into_iter()
            .zip(self.units())
            .filter_map(|(name, unit)| unit.norm.as_ref().map(|n| (format!("{name}.norm"), &n.running)))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter and running statistic.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for (_, t) in self.parameters() {
            t.data().iter().for_each(|&v| eat(v));
        }
        for (_, rs) in self.buffers() {
            rs.mean.iter().chain(&rs.var).for_each(|&v| eat(v));
        }
        hash
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] != h || shape[3] != w {
            return Err(Error::shape(format!(
                "model expects input [N, {}, {h}, {w}], got {shape:?}",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    /// Registers parameters as tape leaves and records a forward pass.
    pub fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        options: ForwardOptions,
        requires_grad: bool,
    ) -> Result<ForwardPass> {
        let params: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        let (logits, norm_outputs) = self.record_with(tape, &params, input, options)?;
        Ok(ForwardPass {
            logits,
            params,
            norm_outputs,
        })
    }

    /// Records a forward pass using caller-supplied parameter handles, given
    /// in [`Model::parameters`] order. Returns the logits and the batch-norm outputs.
    pub fn record_with(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        options: ForwardOptions,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(input).shape())?;
        let expected = self.parameters().len();
        if params.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} parameter handles, got {}",
                params.len()
            )));
        }
        let mut cursor = params.iter().copied();
        let mut norm_outputs = Vec::new();
        let mut apply = |tape: &mut Tape, unit: &ConvUnit, x: Var, cursor: &mut dyn Iterator<Item = Var>| -> Result<Var> {
            let (w, b) = (cursor.next().unwrap(), cursor.next().unwrap());
            let y = tape.conv2d(x, w, b, unit.conv.stride, unit.conv.padding)?;
            match &unit.norm {
                Some(norm) => {
                    let (g, s) = (cursor.next().unwrap(), cursor.next().unwrap());
                    let y = tape.batch_norm(y, g, s, &norm.running, options.norm_mode, NORM_EPSILON)?;
                    norm_outputs.push(y);
                    Ok(y)
                }
                None => Ok(y),
            }
        };

        let stem = apply(tape, &self.stem, input, &mut cursor)?;
        let mut x = tape.relu(stem);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                let h = apply(tape, &block.conv1, x, &mut cursor)?;
                let h = tape.relu(h);
                let h = apply(tape, &block.conv2, h, &mut cursor)?;
                let skip = match &block.projection {
                    Some(p) => apply(tape, p, x, &mut cursor)?,
                    None => x,
                };
                let sum = if options.drop_skip == Some((s, b)) {
                    h
                } else {
                    tape.add(h, skip)?
                };
                x = tape.relu(sum);
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        let (w, b) = (cursor.next().unwrap(), cursor.next().unwrap());
        let logits = tape.dense(pooled, w, b)?;
        Ok((logits, norm_outputs))
    }

    /// Folds the batch statistics observed in a train-mode pass into the running statistics.
    pub fn update_running_stats(&mut self, tape: &Tape, norm_outputs: &[Var], momentum: f64) {
        for (layer, &out) in self.norm_layers_mut().into_iter().zip(norm_outputs) {
            if let Some(stats) = tape.batch_stats(out) {
                layer.running.absorb(stats, momentum);
            }
        }
    }

    /// Raw logits `[N, C]` for a batch `[N, channels, H, W]`, batch norm frozen.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_with(batch, ForwardOptions::frozen())
    }

    pub fn forward_with(&self, batch: &Tensor, options: ForwardOptions) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), false);
        let pass = self.record(&mut tape, input, options, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Per-class presence probabilities for one image (`[channels, H, W]` or `[1, channels, H, W]`).
    pub fn predict_probabilities(&self, image: &Tensor) -> Result<LabelProbabilities> {
        let batch = if image.rank() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            image.clone().reshape(shape)?
        } else {
            image.clone()
        };
        if batch.shape()[0] != 1 {
            return Err(Error::shape(format!(
                "predict_probabilities takes a single image, got batch of {}",
                batch.shape()[0]
            )));
        }
        let logits = self.forward(&batch)?;
        Ok(LabelProbabilities::from_logits(logits.data(), self.class_names()))
    }
}

/// Independent per-class presence probabilities for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelProbabilities {
    pub probabilities: Vec<f64>,
    pub names: Vec<String>,
}

impl LabelProbabilities {
    pub fn new(probabilities: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if probabilities.len() != names.len() {
            return Err(Error::shape(format!(
                "{} probabilities but {} names",
                probabilities.len(),
                names.len()
            )));
        }
        if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Validation(format!("probability {p} outside [0, 1]")));
        }
        Ok(LabelProbabilities { probabilities, names })
    }

    pub fn from_logits(logits: &[f64], names: Vec<String>) -> Self {
        LabelProbabilities {
            probabilities: logits.iter().map(|&z| stable_sigmoid(z)).collect(),
            names,
        }
    }

    /// (name, probability) pairs by descending probability, ties by class index.
    pub fn sorted(&self) -> Vec<(&str, f64)> {
        rank_descending(&self.probabilities)
            .into_iter()
            .map(|j| (self.names[j].as_str(), self.probabilities[j]))
            .collect()
    }

    pub fn decide(&self, rule: DecisionRule) -> Result<LabelVector> {
        rule.apply(&self.probabilities)
    }

    /// Two-column class/probability table of the `top` most probable classes.
    pub fn render_table(&self, top: usize, decimals: usize) -> String {
        let rows: Vec<(String, String)> = self
            .sorted()
            .into_iter()
            .take(top)
            .map(|(name, p)| (display_name(name), format!("{p:.decimals$}")))
            .collect();
        let width = rows
            .iter()
            .map(|(n, _)| n.chars().count())
            .chain(std::iter::once("Class".len()))
            .max()
            .unwrap_or(5);
        let mut out = format!("{:<width$}  Predicted Probability\n", "Class");
        for (name, p) in rows {
            out.push_str(&format!("{name:<width$}  {p}\n"));
        }
        out
    }
}

/// Category name as displayed in probability tables: first letter capitalized.
pub fn display_name(name: &str) -> String {
    let mut chars = name.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
