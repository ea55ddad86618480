//! Modality-specific convolutional encoders, the shared cross-modal
//! aggregator and the linear classifier head.
//!
//! Parameters live in one flat list, ordered encoder blocks first (one block
//! per modality, in config order), then the aggregator, then the classifier.
//! Intermediate embeddings are stacked as `[N, M, K]` and flattened row-major
//! to `[N, M*K]` before the aggregator.

mod checkpoint;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, FORMAT_VERSION};

use crate::data::MultimodalBatch;
use crate::error::{Error, Result};
use crate::numkernel::{softmax, Parameter, Rng, Tape, Tensor, Var};

const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    pub channels: usize,
    pub window_len: usize,
    /// Hz; informational only.
    pub sampling_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub conv: [ConvLayerSpec; 3],
    /// `K`, width of each intermediate embedding.
    pub embedding_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        let layer = |out_channels, kernel_width, stride| ConvLayerSpec { out_channels, kernel_width, stride };
        Self { conv: [layer(16, 5, 2), layer(32, 5, 2), layer(64, 3, 1)], embedding_dim: 32 }
    }
}

impl EncoderSpec {
    /// Length left after the three conv layers, or `None` if a layer does not fit.
    pub fn output_len(&self, window_len: usize) -> Option<usize> {
        self.conv.iter().try_fold(window_len, |t, l| {
            (t >= l.kernel_width && l.stride > 0).then(|| (t - l.kernel_width) / l.stride + 1)
        })
    }

    /// Shortest window that survives all three layers.
    pub fn min_window_len(&self) -> usize {
        (1..).find(|&t| self.output_len(t).is_some()).unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorSpec {
    pub hidden: Vec<usize>,
    /// `D`, width of the global embedding.
    pub output_dim: usize,
}

impl Default for AggregatorSpec {
    fn default() -> Self {
        Self { hidden: vec![128], output_dim: 64 }
    }
}

/// Everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub modalities: Vec<ModalityConfig>,
    pub encoder: EncoderSpec,
    pub aggregator: AggregatorSpec,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::config("modalities", "at least one modality is required"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::config("modalities.name", format!("duplicate name `{}`", m.name)));
            }
            if m.channels == 0 {
                return Err(Error::config("modalities.channels", format!("`{}` has 0 channels", m.name)));
            }
            if m.window_len == 0 {
                return Err(Error::config("modalities.window_len", format!("`{}` has window_len 0", m.name)));
            }
            if self.encoder.output_len(m.window_len).is_none() {
                return Err(Error::config(
                    "modalities.window_len",
                    format!(
                        "`{}` window of {} is shorter than the encoder receptive field {}",
                        m.name,
                        m.window_len,
                        self.encoder.min_window_len()
                    ),
                ));
            }
        }
        for (i, l) in self.encoder.conv.iter().enumerate() {
            if l.out_channels == 0 || l.kernel_width == 0 || l.stride == 0 {
                return Err(Error::config(format!("model.encoder.conv[{i}]"), "all fields must be >= 1"));
            }
        }
        if self.encoder.embedding_dim == 0 {
            return Err(Error::config("model.encoder.embedding_dim", "must be >= 1"));
        }
        if self.aggregator.output_dim == 0 || self.aggregator.hidden.contains(&0) {
            return Err(Error::config("model.aggregator", "layer widths must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        Ok(())
    }

    fn encoder_param_count() -> usize {
        8
    }

    fn aggregator_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.num_modalities() * self.encoder.embedding_dim];
        widths.extend(&self.aggregator.hidden);
        widths.push(self.aggregator.output_dim);
        widths
    }
}

/// Which parameters are trained. Used to toggle the freeze schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Encoders,
    Aggregator,
    Classifier,
}

/// Parameters of every encoder, the aggregator and the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec<Parameter>,
}

impl ModelState {
    /// Truncated-normal weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::stream(seed, INIT_STREAM);
        let mut params = Vec::new();
        let weight = |name: String, shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| rng.truncated_normal() * scale).collect();
            Parameter::new(name, Tensor::new(shape.to_vec(), values).expect("shape"))
        };
        for m in &spec.modalities {
            let mut c_in = m.channels;
            for (i, l) in spec.encoder.conv.iter().enumerate() {
                let shape = [l.kernel_width, c_in, l.out_channels];
                params.push(weight(format!("enc.{}.conv{}.w", m.name, i + 1), &shape, l.kernel_width * c_in, &mut rng));
                params.push(Parameter::new(format!("enc.{}.conv{}.b", m.name, i + 1), Tensor::zeros(&[l.out_channels])));
                c_in = l.out_channels;
            }
            let k = spec.encoder.embedding_dim;
            params.push(weight(format!("enc.{}.proj.w", m.name), &[c_in, k], c_in, &mut rng));
            params.push(Parameter::new(format!("enc.{}.proj.b", m.name), Tensor::zeros(&[k])));
        }
        let widths = spec.aggregator_widths();
        for (i, pair) in widths.windows(2).enumerate() {
            params.push(weight(format!("agg.dense{}.w", i + 1), &[pair[0], pair[1]], pair[0], &mut rng));
            params.push(Parameter::new(format!("agg.dense{}.b", i + 1), Tensor::zeros(&[pair[1]])));
        }
        let d = spec.aggregator.output_dim;
        params.push(weight("cls.w".into(), &[d, spec.num_classes], d, &mut rng));
        params.push(Parameter::new("cls.b", Tensor::zeros(&[spec.num_classes])));
        Ok(Self { spec, params })
    }

    pub fn num_modalities(&self) -> usize {
        self.spec.num_modalities()
    }

    pub fn encoder_range(&self, modality: usize) -> Range<usize> {
        let n = ModelSpec::encoder_param_count();
        modality * n..(modality + 1) * n
    }

    pub fn block_range(&self, block: Block) -> Range<usize> {
        let enc_end = self.num_modalities() * ModelSpec::encoder_param_count();
        let agg_end = self.params.len() - 2;
        match block {
            Block::Encoders => 0..enc_end,
            Block::Aggregator => enc_end..agg_end,
            Block::Classifier => agg_end..self.params.len(),
        }
    }

    pub fn set_trainable(&mut self, block: Block, trainable: bool) {
        for i in self.block_range(block) {
            self.params[i].trainable = trainable;
        }
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Records encoder `modality` on `tape`: `[N, T_m, C_m] -> [N, K]`.
    pub fn encode_on_tape(&self, tape: &mut Tape, input: Var, modality: usize) -> Result<Var> {
        let cfg = self.spec.modalities.get(modality).ok_or_else(|| {
            Error::shape("encode", format!("modality index {modality} >= {}", self.num_modalities()))
        })?;
        let shape = tape.value(input).shape();
        if shape.len() != 3 || shape[1] != cfg.window_len || shape[2] != cfg.channels {
            return Err(Error::shape(
                "encode",
                format!(
                    "modality `{}` expects [N, {}, {}], got {shape:?}",
                    cfg.name, cfg.window_len, cfg.channels
                ),
            ));
        }
        let base = self.encoder_range(modality).start;
        let mut h = input;
        for (i, l) in self.spec.encoder.conv.iter().enumerate() {
            let w = tape.param(base + 2 * i, &self.params[base + 2 * i]);
            let b = tape.param(base + 2 * i + 1, &self.params[base + 2 * i + 1]);
            h = tape.conv1d(h, w, b, l.stride)?;
            h = tape.relu(h);
        }
        let pooled = tape.mean_pool(h)?;
        let w = tape.param(base + 6, &self.params[base + 6]);
        let b = tape.param(base + 7, &self.params[base + 7]);
        tape.dense(pooled, w, b)
    }

    /// Records every encoder and stacks the outputs as `[N, M, K]`.
    pub fn encode_all_on_tape(&self, tape: &mut Tape, batch: &MultimodalBatch) -> Result<Var> {
        let m = self.num_modalities();
        if batch.windows.len() != m {
            return Err(Error::shape(
                "encode_all",
                format!("batch has {} modalities, model has {m}", batch.windows.len()),
            ));
        }
        let n = batch.len();
        let mut parts = Vec::with_capacity(m);
        for (mi, window) in batch.windows.iter().enumerate() {
            let x = match window {
                Some(t) => t.clone(),
                None => {
                    if (0..n).any(|s| batch.is_available(s, mi)) {
                        return Err(Error::Inconsistent(format!(
                            "modality {mi} has no tensor but is flagged available"
                        )));
                    }
                    let cfg = &self.spec.modalities[mi];
                    Tensor::zeros(&[n, cfg.window_len, cfg.channels])
                }
            };
            let v = tape.input(x);
            parts.push(self.encode_on_tape(tape, v, mi)?);
        }
        tape.stack(&parts)
    }

    /// Records the aggregator: `[N, M, K] -> [N, D]`. ReLU between layers, linear output.
    pub fn aggregate_on_tape(&self, tape: &mut Tape, q: Var) -> Result<Var> {
        let shape = tape.value(q).shape().to_vec();
        let (m, k) = (self.num_modalities(), self.spec.encoder.embedding_dim);
        if shape.len() != 3 || shape[1] != m || shape[2] != k {
            return Err(Error::shape("aggregate", format!("expected [N, {m}, {k}], got {shape:?}")));
        }
        let mut h = tape.reshape(q, &[shape[0], m * k])?;
        let range = self.block_range(Block::Aggregator);
        let layers = range.len() / 2;
        for i in 0..layers {
            let wi = range.start + 2 * i;
            let w = tape.param(wi, &self.params[wi]);
            let b = tape.param(wi + 1, &self.params[wi + 1]);
            h = tape.dense(h, w, b)?;
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Records the classifier head, returning logits `[N, C]`.
    pub fn logits_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let range = self.block_range(Block::Classifier);
        let w = tape.param(range.start, &self.params[range.start]);
        let b = tape.param(range.start + 1, &self.params[range.start + 1]);
        tape.dense(z, w, b)
    }

    pub fn encode(&self, input: &Tensor, modality: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let q = self.encode_on_tape(&mut tape, x, modality)?;
        Ok(tape.value(q).clone())
    }

    pub fn encode_all(&self, batch: &MultimodalBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let q = self.encode_all_on_tape(&mut tape, batch)?;
        Ok(tape.value(q).clone())
    }

    pub fn aggregate(&self, masked_q: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let q = tape.input(masked_q.clone());
        let z = self.aggregate_on_tape(&mut tape, q)?;
        Ok(tape.value(z).clone())
    }

    /// Class probabilities `[N, C]`.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.input(z.clone());
        let logits = self.logits_on_tape(&mut tape, zv)?;
        softmax(tape.value(logits))
    }
}
