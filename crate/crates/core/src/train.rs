//! Self-supervised pre-training with two masked views, supervised
//! fine-tuning with a freeze schedule, and the end-to-end supervised baseline.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batch_indices, BatchMode, MultimodalBatch, MultimodalDataset, Split};
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::loss::{column_stds, total_loss_on_tape, LossBreakdown, LossWeights};
use crate::masking::{forced_modality_mask, sample_masks, MaskSpec};
use crate::model::{Block, ModelSpec, ModelState};
use crate::numkernel::{AdamConfig, AdamState, Rng, Tape, Tensor, Var};

/// A validation metric must move by at least this much to count as progress.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

const MASK_STREAM: u64 = 0x3a5c;
const VAL_MASK_STREAM: u64 = 0x3a5d;
const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ssl_lr: f64,
    pub cls_lr: f64,
    pub ssl_epochs: usize,
    pub cls_epochs: usize,
    pub freeze_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub mask: MaskSpec,
    pub loss: LossWeights,
    pub seed: u64,
    /// Optional cap on pre-training optimizer steps; the epoch in progress
    /// is validated and recorded before stopping.
    #[serde(default)]
    pub ssl_max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ssl_lr: 1e-4,
            cls_lr: 1e-3,
            ssl_epochs: 100,
            cls_epochs: 50,
            freeze_epochs: 20,
            patience: 5,
            batch_size: 32,
            mask: MaskSpec::default(),
            loss: LossWeights::default(),
            seed: 0,
            ssl_max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.freeze_epochs > self.cls_epochs {
            return Err(Error::config(
                "train.freeze_epochs",
                format!("{} exceeds cls_epochs {}", self.freeze_epochs, self.cls_epochs),
            ));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be >= 2"));
        }
        if !(self.ssl_lr > 0.0) {
            return Err(Error::config("train.ssl_lr", "must be > 0"));
        }
        if !(self.cls_lr > 0.0) {
            return Err(Error::config("train.cls_lr", "must be > 0"));
        }
        self.loss.validate()
    }

    fn shuffle_seed(&self, stage: u64, epoch: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(stage.wrapping_mul(0xbf58_476d_1ce4_e5b9))
            .wrapping_add(epoch as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Encoders and aggregator frozen for `freeze_epochs`, then trained jointly.
    Finetuned,
    /// Encoders and aggregator frozen throughout (linear probe).
    Fixed,
}

impl FinetuneMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FinetuneMode::Finetuned => "finetuned",
            FinetuneMode::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "finetuned" => Some(FinetuneMode::Finetuned),
            "fixed" => Some(FinetuneMode::Fixed),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation SSL loss during pre-training, validation macro-F1 otherwise.
    pub val_metric: f64,
    pub breakdown: Option<LossBreakdown>,
    /// Pre-training only: smallest per-dimension batch standard deviation of
    /// the first view's embedding, averaged over the epoch's batches.
    pub min_std: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: Option<usize>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_metric,inv,var1,var2,cov1,cov2,seconds\n");
        for r in &self.epochs {
            let b = r
                .breakdown
                .map(|b| {
                    format!(
                        "{},{},{},{},{}",
                        b.invariance, b.variance_v1, b.variance_v2, b.covariance_v1, b.covariance_v2
                    )
                })
                .unwrap_or_else(|| ",,,,".into());
            let _ = writeln!(out, "{},{},{},{},{:.3}", r.epoch, r.train_loss, r.val_metric, b, r.seconds);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Hash over everything except wall-clock timings.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.epochs {
            h.update((r.epoch as u64).to_le_bytes());
            h.update(r.train_loss.to_le_bytes());
            h.update(r.val_metric.to_le_bytes());
            if let Some(s) = r.min_std {
                h.update(s.to_le_bytes());
            }
            if let Some(b) = r.breakdown {
                for v in [b.invariance, b.variance_v1, b.variance_v2, b.covariance_v1, b.covariance_v2, b.total] {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.update(format!("{:?}{:?}", self.stop_reason, self.best_epoch));
        hex::encode(h.finalize())
    }
}

/// Tracks the best validation value and when to stop.
struct EarlyStopping {
    higher_is_better: bool,
    patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    fn new(patience: usize, higher_is_better: bool) -> Self {
        Self { higher_is_better, patience, best: None, best_epoch: None, stale: 0 }
    }

    /// Returns `true` if `value` is a new best.
    fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) if self.higher_is_better => value >= b + MIN_IMPROVEMENT,
            Some(b) => value <= b - MIN_IMPROVEMENT,
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    fn reset_patience(&mut self) {
        self.stale = 0;
    }
}

fn masked_views(
    state: &ModelState,
    tape: &mut Tape,
    batch: &MultimodalBatch,
    spec: &MaskSpec,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let q = state.encode_all_on_tape(tape, batch)?;
    let (n, m, k) = (batch.len(), state.num_modalities(), state.spec.encoder.embedding_dim);
    let (mut a, mut b) = sample_masks(spec, n, m, k, rng)?;
    if !batch.all_available() {
        let forced = forced_modality_mask(&batch.available, m, k);
        a = a.and(&forced)?;
        b = b.and(&forced)?;
    }
    let qa = tape.mask(q, a.bits())?;
    let qb = tape.mask(q, b.bits())?;
    let za = state.aggregate_on_tape(tape, qa)?;
    let zb = state.aggregate_on_tape(tape, qb)?;
    Ok((za, zb))
}

fn ssl_batches(indices: &[usize], cfg: &TrainConfig, shuffle: Option<u64>) -> Result<Vec<Vec<usize>>> {
    let size = cfg.batch_size.min(indices.len());
    if size < 2 {
        return Ok(Vec::new());
    }
    batch_indices(indices, size, shuffle, BatchMode::SelfSupervised)
}

/// Mean SSL loss over `indices` with freshly drawn masks.
pub fn ssl_loss(
    state: &ModelState,
    dataset: &MultimodalDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let groups = ssl_batches(indices, cfg, None)?;
    if groups.is_empty() {
        return Err(Error::BatchTooSmall { op: "ssl_loss", n: indices.len() });
    }
    let mut total = 0.0;
    for g in &groups {
        let batch = dataset.batch(g);
        let mut tape = Tape::new();
        let (za, zb) = masked_views(state, &mut tape, &batch, &cfg.mask, rng)?;
        let (_, b) = total_loss_on_tape(&mut tape, za, zb, &cfg.loss)?;
        total += b.total;
    }
    Ok(total / groups.len() as f64)
}

/// Self-supervised pre-training of encoders and aggregator. Never reads labels.
/// Returns the state with the lowest validation loss.
pub fn pretrain(
    dataset: &MultimodalDataset,
    init: &ModelState,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    cfg.validate()?;
    cfg.mask.validate(init.num_modalities())?;
    let train = dataset.indices(Split::Train);
    let val = dataset.indices(Split::Val);
    if train.len() < 2 {
        return Err(Error::BatchTooSmall { op: "pretrain", n: train.len() });
    }
    if val.len() < 2 {
        return Err(Error::BatchTooSmall { op: "pretrain validation", n: val.len() });
    }

    let mut state = init.clone();
    state.set_trainable(Block::Encoders, true);
    state.set_trainable(Block::Aggregator, true);
    state.set_trainable(Block::Classifier, false);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.ssl_lr), &state.params);
    let mut mask_rng = Rng::stream(cfg.seed, MASK_STREAM);
    let mut val_rng = Rng::stream(cfg.seed, VAL_MASK_STREAM);
    let mut stopper = EarlyStopping::new(cfg.patience, false);
    let mut best = state.params.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut steps = 0usize;

    for epoch in 0..cfg.ssl_epochs {
        let started = Instant::now();
        let mut groups = ssl_batches(&train, cfg, Some(cfg.shuffle_seed(1, epoch)))?;
        let capped = cfg.ssl_max_steps.is_some_and(|cap| steps + groups.len() >= cap);
        if let Some(cap) = cfg.ssl_max_steps {
            groups.truncate(cap.saturating_sub(steps));
        }
        steps += groups.len();
        let mut sum = LossBreakdown::default();
        let mut min_std_sum = 0.0;
        for (bi, g) in groups.iter().enumerate() {
            let batch = dataset.batch(g);
            let mut tape = Tape::new();
            let (za, zb) = masked_views(&state, &mut tape, &batch, &cfg.mask, &mut mask_rng)?;
            let (loss, b) = total_loss_on_tape(&mut tape, za, zb, &cfg.loss)?;
            min_std_sum += column_stds(tape.value(za), 0.0).into_iter().fold(f64::INFINITY, f64::min);
            if !b.total.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            tape.backward(loss, &mut state.params)?;
            adam.step(&mut state.params);
            sum.invariance += b.invariance;
            sum.variance_v1 += b.variance_v1;
            sum.variance_v2 += b.variance_v2;
            sum.covariance_v1 += b.covariance_v1;
            sum.covariance_v2 += b.covariance_v2;
            sum.total += b.total;
        }
        let nb = groups.len().max(1) as f64;
        let mean = LossBreakdown {
            invariance: sum.invariance / nb,
            variance_v1: sum.variance_v1 / nb,
            variance_v2: sum.variance_v2 / nb,
            covariance_v1: sum.covariance_v1 / nb,
            covariance_v2: sum.covariance_v2 / nb,
            total: sum.total / nb,
        };
        let val_loss = ssl_loss(&state, dataset, &val, cfg, &mut val_rng)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: groups.len() });
        }
        if stopper.observe(epoch, val_loss) {
            best = state.params.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: mean.total,
            val_metric: val_loss,
            breakdown: Some(mean),
            min_std: Some(min_std_sum / nb),
            seconds: started.elapsed().as_secs_f64(),
        });
        if stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
        if capped {
            break;
        }
    }
    restore(&mut state, best);
    Ok((state, TrainTrace { epochs, stop_reason, best_epoch: stopper.best_epoch }))
}

fn restore(state: &mut ModelState, best: Vec<crate::numkernel::Parameter>) {
    state.params = best;
    for p in &mut state.params {
        p.trainable = true;
        p.zero_grad();
    }
}

/// Global embeddings `[n, D]` for `indices`, with missing modalities masked.
pub fn embed(state: &ModelState, dataset: &MultimodalDataset, indices: &[usize]) -> Result<Tensor> {
    let d = state.spec.aggregator.output_dim;
    let mut values = Vec::with_capacity(indices.len() * d);
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = dataset.batch(chunk);
        let mut tape = Tape::new();
        let z = forward_embedding(state, &mut tape, &batch)?;
        values.extend_from_slice(tape.value(z).values());
    }
    Tensor::new(vec![indices.len(), d], values)
}

/// Encode, mask only genuinely missing modalities, aggregate.
fn forward_embedding(state: &ModelState, tape: &mut Tape, batch: &MultimodalBatch) -> Result<Var> {
    let mut q = state.encode_all_on_tape(tape, batch)?;
    if !batch.all_available() {
        let mask = forced_modality_mask(&batch.available, state.num_modalities(), state.spec.encoder.embedding_dim);
        q = tape.mask(q, mask.bits())?;
    }
    state.aggregate_on_tape(tape, q)
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.dim(1);
    logits
        .values()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn logits_from_embeddings(state: &ModelState, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.input(z.clone());
    let l = state.logits_on_tape(&mut tape, zv)?;
    Ok(tape.value(l).clone())
}

pub fn predict(state: &ModelState, dataset: &MultimodalDataset, indices: &[usize]) -> Result<Vec<usize>> {
    let z = embed(state, dataset, indices)?;
    Ok(argmax_rows(&logits_from_embeddings(state, &z)?))
}

/// Test-split macro-F1 of `state`.
pub fn evaluate(state: &ModelState, dataset: &MultimodalDataset, split: Split) -> Result<crate::eval::F1Scores> {
    let idx = dataset.labeled_indices(split);
    let labels = dataset.labels.as_ref().ok_or_else(|| Error::config("labels", "evaluation needs labels"))?;
    let preds = predict(state, dataset, &idx)?;
    let truth: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    macro_f1(&preds, &truth, dataset.num_classes)
}

struct Supervision<'a> {
    dataset: &'a MultimodalDataset,
    train: Vec<usize>,
    val: Vec<usize>,
    val_labels: Vec<usize>,
}

impl<'a> Supervision<'a> {
    fn new(dataset: &'a MultimodalDataset) -> Result<Self> {
        let labels = dataset
            .labels
            .as_ref()
            .ok_or_else(|| Error::config("labels", "supervised training needs labels"))?;
        let train = dataset.labeled_indices(Split::Train);
        let val = dataset.labeled_indices(Split::Val);
        if train.is_empty() {
            return Err(Error::config("labels", "no labeled training windows"));
        }
        if val.is_empty() {
            return Err(Error::config("labels", "no labeled validation windows"));
        }
        let val_labels = val.iter().map(|&i| labels[i]).collect();
        Ok(Self { dataset, train, val, val_labels })
    }

    fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        let labels = self.dataset.labels.as_ref().expect("checked");
        idx.iter().map(|&i| labels[i]).collect()
    }
}

/// Cached global embeddings, valid while encoders and aggregator are frozen.
struct FrozenCache {
    train_pos: std::collections::HashMap<usize, usize>,
    train_z: Tensor,
    val_z: Tensor,
}

impl FrozenCache {
    fn build(state: &ModelState, sup: &Supervision) -> Result<Self> {
        let train_z = embed(state, sup.dataset, &sup.train)?;
        let val_z = embed(state, sup.dataset, &sup.val)?;
        let train_pos = sup.train.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        Ok(Self { train_pos, train_z, val_z })
    }
}

/// Trains until `cls_epochs`, with encoders and aggregator unfrozen from
/// `unfreeze_at` (never when `None`). Early stopping monitors validation
/// macro-F1 and is only armed once every block that will ever train is
/// trainable.
fn supervised_loop(
    mut state: ModelState,
    sup: &Supervision,
    cfg: &TrainConfig,
    unfreeze_at: Option<usize>,
    stage: u64,
) -> Result<(ModelState, TrainTrace)> {
    let frozen_from_start = unfreeze_at != Some(0);
    state.set_trainable(Block::Encoders, !frozen_from_start);
    state.set_trainable(Block::Aggregator, !frozen_from_start);
    state.set_trainable(Block::Classifier, true);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.cls_lr), &state.params);
    let mut stopper = EarlyStopping::new(cfg.patience, true);
    let mut best = state.params.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut cache = if frozen_from_start { Some(FrozenCache::build(&state, sup)?) } else { None };
    let batch_size = cfg.batch_size.min(sup.train.len()).max(1);

    for epoch in 0..cfg.cls_epochs {
        let started = Instant::now();
        if unfreeze_at == Some(epoch) && epoch > 0 {
            state.set_trainable(Block::Encoders, true);
            state.set_trainable(Block::Aggregator, true);
            cache = None;
            stopper.reset_patience();
        }
        let armed = match unfreeze_at {
            Some(u) => epoch >= u,
            None => true,
        };
        let groups: Vec<Vec<usize>> = {
            let mut order = sup.train.clone();
            Rng::new(cfg.shuffle_seed(stage, epoch)).shuffle(&mut order);
            order.chunks(batch_size).map(<[usize]>::to_vec).collect()
        };
        let mut loss_sum = 0.0;
        for (bi, g) in groups.iter().enumerate() {
            let labels = sup.labels_of(g);
            let mut tape = Tape::new();
            let z = match &cache {
                Some(c) => {
                    let rows: Vec<usize> = g.iter().map(|i| c.train_pos[i]).collect();
                    tape.input(c.train_z.select_rows(&rows))
                }
                None => forward_embedding(&state, &mut tape, &sup.dataset.batch(g))?,
            };
            let logits = state.logits_on_tape(&mut tape, z)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let value = tape.value(loss).values()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            loss_sum += value * g.len() as f64;
            tape.backward(loss, &mut state.params)?;
            adam.step(&mut state.params);
        }
        let val_logits = match &cache {
            Some(c) => logits_from_embeddings(&state, &c.val_z)?,
            None => logits_from_embeddings(&state, &embed(&state, sup.dataset, &sup.val)?)?,
        };
        let val_f1 = macro_f1(&argmax_rows(&val_logits), &sup.val_labels, sup.dataset.num_classes)?.macro_f1;
        if stopper.observe(epoch, val_f1) {
            best = state.params.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / sup.train.len() as f64,
            val_metric: val_f1,
            breakdown: None,
            min_std: None,
            seconds: started.elapsed().as_secs_f64(),
        });
        if armed && stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    restore(&mut state, best);
    Ok((state, TrainTrace { epochs, stop_reason, best_epoch: stopper.best_epoch }))
}

/// Trains the classifier on top of a pre-trained model.
///
/// `Fixed` keeps encoders and aggregator frozen for every epoch. `Finetuned`
/// keeps them frozen for `freeze_epochs` and trains everything afterwards.
/// No stochastic masking is applied; only genuinely missing modalities are
/// masked.
pub fn finetune(
    dataset: &MultimodalDataset,
    pretrained: &ModelState,
    cfg: &TrainConfig,
    mode: FinetuneMode,
) -> Result<(ModelState, TrainTrace)> {
    cfg.validate()?;
    let sup = Supervision::new(dataset)?;
    let unfreeze_at = match mode {
        FinetuneMode::Fixed => None,
        FinetuneMode::Finetuned if cfg.freeze_epochs < cfg.cls_epochs => Some(cfg.freeze_epochs),
        FinetuneMode::Finetuned => None,
    };
    // Both modes share a shuffle stream, so a finetuned run that never
    // unfreezes reproduces the fixed run exactly.
    supervised_loop(pretrained.clone(), &sup, cfg, unfreeze_at, 2)
}

/// End-to-end cross-entropy training of the same architecture from a seeded
/// random initialization, without masking.
pub fn train_supervised(
    dataset: &MultimodalDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    cfg.validate()?;
    let sup = Supervision::new(dataset)?;
    let init = ModelState::init(spec.clone(), cfg.seed)?;
    supervised_loop(init, &sup, cfg, Some(0), 4)
}
