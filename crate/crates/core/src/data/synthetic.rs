//! Synthetic multimodal windows driven by one shared latent class.
//!
//! Every modality observes the same class-dependent oscillation (frequency
//! set by the class, phase shared across modalities within a sample) plus its
//! own class-independent nuisance oscillation and white noise. Windows span
//! one second, so a frequency in Hz equals whole cycles per window.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{MultimodalDataset, Split};
use crate::error::{Error, Result};
use crate::model::ModalityConfig;
use crate::numkernel::{Rng, Tensor};

const SYNTH_STREAM: u64 = 0x5e7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModality {
    pub name: String,
    pub window_len: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub modalities: Vec<SyntheticModality>,
    pub samples_per_class: usize,
    /// Frequency of class 0 in cycles per window.
    pub base_frequency: f64,
    /// Frequency increment between consecutive classes.
    pub frequency_step: f64,
    pub noise_std: f64,
    pub nuisance_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let m = |name: &str, window_len, channels| SyntheticModality { name: name.into(), window_len, channels };
        Self {
            num_classes: 4,
            modalities: vec![m("accel", 50, 3), m("gyro", 100, 3), m("ppg", 25, 1)],
            samples_per_class: 300,
            base_frequency: 2.0,
            frequency_step: 2.0,
            noise_std: 0.5,
            nuisance_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn class_frequency(&self, class: usize) -> f64 {
        self.base_frequency + self.frequency_step * class as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic.num_classes", "must be >= 2"));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("synthetic.modalities", "at least one modality is required"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.window_len == 0 {
                return Err(Error::config(format!("synthetic.modalities[{i}].window_len"), "must be >= 1"));
            }
            if m.channels == 0 {
                return Err(Error::config(format!("synthetic.modalities[{i}].channels"), "must be >= 1"));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::config(format!("synthetic.modalities[{i}].name"), "duplicate name"));
            }
            let top = self.class_frequency(self.num_classes - 1);
            if 2.0 * top >= m.window_len as f64 {
                return Err(Error::config(
                    format!("synthetic.modalities[{i}].window_len"),
                    format!("{} samples cannot represent {top} cycles per window", m.window_len),
                ));
            }
        }
        if self.samples_per_class < 3 {
            return Err(Error::config("synthetic.samples_per_class", "must be >= 3"));
        }
        if self.base_frequency <= 0.0 || self.frequency_step <= 0.0 {
            return Err(Error::config("synthetic.base_frequency", "frequencies must be > 0"));
        }
        if self.noise_std < 0.0 || self.nuisance_std < 0.0 {
            return Err(Error::config("synthetic.noise_std", "standard deviations must be >= 0"));
        }
        Ok(())
    }
}

fn split_counts(n: usize) -> (usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = (0.15 * n as f64).round() as usize;
    (train, val.min(n - train))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<MultimodalDataset> {
    cfg.validate()?;
    let n = cfg.num_classes * cfg.samples_per_class;
    let mut rng = Rng::stream(cfg.seed, SYNTH_STREAM);
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
    rng.shuffle(&mut labels);

    let mut windows: Vec<Vec<f64>> =
        cfg.modalities.iter().map(|m| Vec::with_capacity(n * m.window_len * m.channels)).collect();
    for &y in &labels {
        let freq = cfg.class_frequency(y);
        let phase = rng.uniform_range(0.0, 2.0 * PI);
        for (m, buf) in cfg.modalities.iter().zip(windows.iter_mut()) {
            let t_len = m.window_len as f64;
            let nyquist = t_len / 2.0;
            let nuisance_freq = rng.uniform_range(0.5, 0.9 * nyquist);
            let nuisance_phase = rng.uniform_range(0.0, 2.0 * PI);
            for t in 0..m.window_len {
                let tt = t as f64 / t_len;
                let nuisance = cfg.nuisance_std * (2.0 * PI * nuisance_freq * tt + nuisance_phase).sin();
                for c in 0..m.channels {
                    let shared = (2.0 * PI * freq * tt + phase + c as f64 * PI / 3.0).sin();
                    let noise = if cfg.noise_std > 0.0 { cfg.noise_std * rng.normal() } else { 0.0 };
                    buf.push(shared + nuisance + noise);
                }
            }
        }
    }

    let mut splits = vec![Split::Train; n];
    for class in 0..cfg.num_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut members);
        let (train, val) = split_counts(members.len());
        for (rank, &i) in members.iter().enumerate() {
            splits[i] = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    let modalities = cfg
        .modalities
        .iter()
        .map(|m| ModalityConfig {
            name: m.name.clone(),
            channels: m.channels,
            window_len: m.window_len,
            sampling_rate: m.window_len as f64,
        })
        .collect::<Vec<_>>();
    let windows = modalities
        .iter()
        .zip(windows)
        .map(|(m, values)| Tensor::new(vec![n, m.window_len, m.channels], values))
        .collect::<Result<Vec<_>>>()?;
    let m = modalities.len();
    Ok(MultimodalDataset {
        modalities,
        windows,
        labels: Some(labels),
        labeled: vec![true; n],
        availability: vec![true; n * m],
        splits,
        num_classes: cfg.num_classes,
    })
}
