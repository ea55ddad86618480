//! Run configuration document. Every section and key is optional; missing
//! keys take the defaults listed by [`describe_keys`]. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{MultimodalDataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::masking::MaskSpec;
use crate::model::{AggregatorSpec, EncoderSpec, ModelSpec};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "CROSSL_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub ssl_lr: f64,
    pub cls_lr: f64,
    pub ssl_epochs: usize,
    pub cls_epochs: usize,
    pub freeze_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub ssl_max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            ssl_lr: t.ssl_lr,
            cls_lr: t.cls_lr,
            ssl_epochs: t.ssl_epochs,
            cls_epochs: t.cls_epochs,
            freeze_epochs: t.freeze_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            ssl_max_steps: t.ssl_max_steps,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderSpec,
    pub aggregator: AggregatorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub missing_count: usize,
    pub grid: Vec<f64>,
    pub fractions: Vec<f64>,
    pub jobs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            missing_count: 1,
            grid: vec![0.0, 0.25, 0.5, 0.75],
            fractions: vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainSection,
    pub masking: MaskSpec,
    pub loss: LossWeights,
    pub model: ModelSection,
    pub synthetic: SyntheticConfig,
    pub eval: EvalSection,
    pub seeds: Vec<u64>,
    /// Dataset manifest or directory, used when none is given on the command line.
    pub dataset: Option<PathBuf>,
    /// Output directory, used when none is given on the command line.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainSection::default(),
            masking: MaskSpec::default(),
            loss: LossWeights::default(),
            model: ModelSection::default(),
            synthetic: SyntheticConfig::default(),
            eval: EvalSection::default(),
            seeds: (0..5).collect(),
            dataset: None,
            output_dir: None,
        }
    }
}

/// Every accepted key with a one-line description. Defaults are read from
/// `RunConfig::default()`.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("train.ssl_lr", "learning rate of self-supervised pre-training"),
    ("train.cls_lr", "learning rate of classifier training and fine-tuning"),
    ("train.ssl_epochs", "maximum pre-training epochs"),
    ("train.cls_epochs", "maximum classifier epochs"),
    ("train.freeze_epochs", "epochs with encoders and aggregator frozen in finetuned mode"),
    ("train.patience", "epochs without validation progress before stopping"),
    ("train.batch_size", "mini-batch size"),
    ("train.ssl_max_steps", "optional cap on pre-training optimizer steps"),
    ("masking.strategy", "random | spatial"),
    ("masking.rate", "fraction of embedding entries zeroed by random masking"),
    ("masking.count", "modalities zeroed per sample by spatial masking"),
    ("loss.lambda", "invariance weight"),
    ("loss.mu", "variance weight"),
    ("loss.nu", "covariance weight"),
    ("loss.gamma", "target standard deviation of the variance hinge"),
    ("loss.eps", "stabilizer inside the standard deviation"),
    ("model.encoder.conv", "three conv layers: out_channels, kernel_width, stride"),
    ("model.encoder.embedding_dim", "intermediate embedding width K"),
    ("model.aggregator.hidden", "hidden widths of the aggregator"),
    ("model.aggregator.output_dim", "global embedding width D"),
    ("synthetic.num_classes", "number of classes"),
    ("synthetic.modalities", "list of {name, window_len, channels}"),
    ("synthetic.samples_per_class", "windows generated per class"),
    ("synthetic.base_frequency", "cycles per window of class 0"),
    ("synthetic.frequency_step", "cycles per window added per class"),
    ("synthetic.noise_std", "white noise standard deviation"),
    ("synthetic.nuisance_std", "amplitude of the per-modality nuisance oscillation"),
    ("synthetic.seed", "generator seed"),
    ("eval.missing_count", "modalities removed per sample in missing scenarios"),
    ("eval.grid", "mask sweep grid (rates or counts)"),
    ("eval.fractions", "label fractions of the label sweep"),
    ("eval.jobs", "concurrent experiment cells"),
    ("seeds", "run seeds"),
    ("dataset", "dataset manifest or directory"),
    ("output_dir", "output directory"),
];

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(origin.display().to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Replaces `seeds` with the single value of `CROSSL_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().map_err(|_| Error::config(SEED_ENV, format!("not an integer: {v}")))?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Dotted key paths with their JSON-encoded values.
    pub fn flat_keys(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            ssl_lr: t.ssl_lr,
            cls_lr: t.cls_lr,
            ssl_epochs: t.ssl_epochs,
            cls_epochs: t.cls_epochs,
            freeze_epochs: t.freeze_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            mask: self.masking,
            loss: self.loss,
            seed,
            ssl_max_steps: t.ssl_max_steps,
        }
    }

    pub fn model_spec(&self, dataset: &MultimodalDataset) -> ModelSpec {
        ModelSpec {
            modalities: dataset.modalities.clone(),
            encoder: self.model.encoder.clone(),
            aggregator: self.model.aggregator.clone(),
            num_classes: dataset.num_classes,
        }
    }

    pub fn first_seed(&self) -> u64 {
        self.seeds.first().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(0).validate()?;
        self.synthetic.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.eval.jobs == 0 {
            return Err(Error::config("eval.jobs", "must be >= 1"));
        }
        Ok(())
    }
}

/// `key = default  description` lines for every config key.
pub fn describe_keys() -> String {
    let defaults = RunConfig::default().flat_keys();
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (key, doc) in KEY_DOCS {
        let value = defaults.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).unwrap_or("?");
        out.push_str(&format!("  {key:<width$}  {doc} [default: {value}]\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_keys_match_the_schema() {
        let mut documented: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
        let defaults = RunConfig::default().flat_keys();
        let mut actual: Vec<&str> = defaults.iter().map(|(k, _)| k.as_str()).collect();
        documented.sort_unstable();
        actual.sort_unstable();
        assert_eq!(documented, actual);
    }

    #[test]
    fn unknown_keys_rejected() {
        let p = Path::new("cfg.json");
        assert!(RunConfig::from_json(r#"{"train": {"ssl_lr": 0.01}}"#, p).is_ok());
        let err = RunConfig::from_json(r#"{"train": {"sssl_lr": 0.01}}"#, p).unwrap_err();
        assert!(err.to_string().contains("sssl_lr"));
        assert!(RunConfig::from_json(r#"{"extra": 1}"#, p).is_err());
    }

    #[test]
    fn partial_document_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"masking": {"strategy": "random"}}"#, Path::new("c")).unwrap();
        assert_eq!(c.masking.rate, 0.5);
        assert_eq!(c.train, TrainSection::default());
        let round = RunConfig::from_json(&c.to_json(), Path::new("c")).unwrap();
        assert_eq!(round, c);
    }
}
