//! Multimodal window datasets: representation, batching, label subsampling
//! and missing-modality simulation.
//!
//! A missing modality is always represented by a zero-filled window plus an
//! availability flag of `false`; tensor shapes never change.

mod io;
mod synthetic;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use io::{load_dataset, save_dataset, DATASET_FORMAT_VERSION, PAYLOAD_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticModality};

use crate::error::{Error, Result};
use crate::model::ModalityConfig;
use crate::numkernel::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub modalities: Vec<ModalityConfig>,
    /// One `[N, T_m, C_m]` tensor per modality.
    pub windows: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    /// Whether sample `i`'s label may be used for supervision.
    pub labeled: Vec<bool>,
    /// Row-major `[N, M]`.
    pub availability: Vec<bool>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_available(&self, sample: usize, modality: usize) -> bool {
        self.availability[sample * self.num_modalities() + modality]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Samples of `split` whose labels may be used.
    pub fn labeled_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split && self.labeled[i]).collect()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().filter(|_| self.labeled[i]).map(|l| l[i])
    }

    /// Copy with every label removed.
    pub fn without_labels(&self) -> Self {
        Self { labels: None, labeled: vec![false; self.len()], ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let m = self.num_modalities();
        if self.windows.len() != m {
            return Err(Error::load("modalities", format!("{m} configs but {} window tensors", self.windows.len())));
        }
        for (cfg, w) in self.modalities.iter().zip(&self.windows) {
            if w.shape() != [n, cfg.window_len, cfg.channels] {
                return Err(Error::load(
                    format!("modalities.{}", cfg.name),
                    format!("tensor {:?} does not match [N={n}, T={}, C={}]", w.shape(), cfg.window_len, cfg.channels),
                ));
            }
        }
        if self.availability.len() != n * m {
            return Err(Error::load("availability", format!("expected {} flags, got {}", n * m, self.availability.len())));
        }
        if self.labeled.len() != n {
            return Err(Error::load("labels", "labeled flags do not match sample count"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::load("labels", format!("expected {n} labels, got {}", labels.len())));
            }
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
                return Err(Error::load("labels", format!("label {l} at row {i} outside [0, {})", self.num_classes)));
            }
        } else if self.labeled.iter().any(|&b| b) {
            return Err(Error::load("labels", "samples flagged labeled but no labels present"));
        }
        for s in 0..n {
            for mi in 0..m {
                if !self.is_available(s, mi) && self.windows[mi].row(s).iter().any(|&v| v != 0.0) {
                    return Err(Error::Inconsistent(format!(
                        "sample {s} modality `{}` is unavailable but not zero-filled",
                        self.modalities[mi].name
                    )));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over every field that affects training.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.modalities).expect("serializes"));
        for w in &self.windows {
            for v in w.values() {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            for (&l, &k) in labels.iter().zip(&self.labeled) {
                h.update((l as u64).to_le_bytes());
                h.update([k as u8]);
            }
        }
        h.update(self.availability.iter().map(|&b| b as u8).collect::<Vec<_>>());
        h.update(self.splits.iter().map(|s| s.as_str().as_bytes()[0]).collect::<Vec<_>>());
        h.update((self.num_classes as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Gathers `indices` into a batch. Labels are attached only when every
    /// selected sample is labeled.
    pub fn batch(&self, indices: &[usize]) -> MultimodalBatch {
        let m = self.num_modalities();
        let windows = self.windows.iter().map(|w| Some(w.select_rows(indices))).collect();
        let labels = match &self.labels {
            Some(l) if indices.iter().all(|&i| self.labeled[i]) => Some(indices.iter().map(|&i| l[i]).collect()),
            _ => None,
        };
        let available = indices.iter().flat_map(|&i| self.availability[i * m..(i + 1) * m].iter().copied()).collect();
        MultimodalBatch { indices: indices.to_vec(), windows, labels, available }
    }

    /// Zero-fills and flags modality `mi` of sample `s` as unavailable.
    pub fn drop_modality(&mut self, s: usize, mi: usize) {
        let m = self.num_modalities();
        self.availability[s * m + mi] = false;
        self.windows[mi].row_mut(s).fill(0.0);
    }
}

/// One mini-batch. A `None` window means the modality is absent for the
/// whole batch and will be zero-filled at encode time.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub indices: Vec<usize>,
    pub windows: Vec<Option<Tensor>>,
    pub labels: Option<Vec<usize>>,
    /// Row-major `[N, M]`.
    pub available: Vec<bool>,
}

impl MultimodalBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_available(&self, sample: usize, modality: usize) -> bool {
        self.available[sample * self.windows.len() + modality]
    }

    pub fn all_available(&self) -> bool {
        self.available.iter().all(|&a| a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Drops the trailing short batch (the variance term needs N >= 2).
    SelfSupervised,
    /// Keeps every sample.
    Eval,
}

/// Splits `indices` into batches, shuffled when `shuffle_seed` is set.
pub fn batch_indices(
    indices: &[usize],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    mode: BatchMode,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::config("train.batch_size", format!("must be >= 2, got {batch_size}")));
    }
    let mut order = indices.to_vec();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if mode == BatchMode::SelfSupervised && out.last().is_some_and(|b| b.len() < batch_size) {
        out.pop();
    }
    Ok(out)
}

pub fn make_batches(
    dataset: &MultimodalDataset,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    mode: BatchMode,
) -> Result<Vec<MultimodalBatch>> {
    let groups = batch_indices(&dataset.indices(split), batch_size, shuffle_seed, mode)?;
    Ok(groups.iter().map(|g| dataset.batch(g)).collect())
}

/// Keeps `ceil(fraction * n_train)` labeled training windows, allocated to
/// classes in proportion to their size (largest remainder, ties to the lower
/// class id) with at least one per class. Validation and test are untouched.
///
/// The selection depends only on `(fraction, seed)` and the full set of
/// training labels, so applying it twice gives the same result as once.
pub fn subsample_labels(dataset: &MultimodalDataset, fraction: f64, seed: u64) -> Result<MultimodalDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("label_fraction", format!("must lie in (0, 1], got {fraction}")));
    }
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::config("labels", "label subsampling needs a labeled dataset"))?;
    let train = dataset.indices(Split::Train);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for &i in &train {
        by_class[labels[i]].push(i);
    }
    let quotas = allocate_quotas(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), fraction);

    let mut out = dataset.clone();
    for &i in &train {
        out.labeled[i] = false;
    }
    let mut rng = Rng::stream(seed, 0x5ab5);
    for (members, quota) in by_class.iter_mut().zip(quotas) {
        rng.shuffle(members);
        for &i in members.iter().take(quota) {
            out.labeled[i] = true;
        }
    }
    Ok(out)
}

fn allocate_quotas(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if fraction >= 1.0 || total == 0 {
        return counts.to_vec();
    }
    let target = ((fraction * total as f64).ceil() as usize).min(total);
    let exact: Vec<f64> = counts.iter().map(|&c| target as f64 * c as f64 / total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let mut remaining = target - quotas.iter().sum::<usize>();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quotas[c] < counts[c] {
            quotas[c] += 1;
            remaining -= 1;
        }
    }
    for (q, &c) in quotas.iter_mut().zip(counts) {
        if c > 0 && *q == 0 {
            *q = 1;
        }
    }
    quotas
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPhase {
    None,
    InferenceOnly,
    FinetuneAndInference,
}

impl MissingPhase {
    pub const ALL: [MissingPhase; 3] =
        [MissingPhase::None, MissingPhase::InferenceOnly, MissingPhase::FinetuneAndInference];

    pub fn as_str(&self) -> &'static str {
        match self {
            MissingPhase::None => "none",
            MissingPhase::InferenceOnly => "inference_only",
            MissingPhase::FinetuneAndInference => "finetune_and_inference",
        }
    }

    pub fn affects(&self, split: Split) -> bool {
        match self {
            MissingPhase::None => false,
            MissingPhase::InferenceOnly => split == Split::Test,
            MissingPhase::FinetuneAndInference => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingScenario {
    pub phase: MissingPhase,
    pub missing_count: usize,
}

/// Removes `missing_count` uniformly chosen modalities from every sample in
/// the splits affected by `scenario.phase`.
pub fn simulate_missing(
    dataset: &MultimodalDataset,
    scenario: &MissingScenario,
    rng: &mut Rng,
) -> Result<MultimodalDataset> {
    let m = dataset.num_modalities();
    if scenario.missing_count >= m {
        return Err(Error::config(
            "eval.missing_count",
            format!("{} must be below the number of modalities {m}", scenario.missing_count),
        ));
    }
    let mut out = dataset.clone();
    if scenario.phase == MissingPhase::None || scenario.missing_count == 0 {
        return Ok(out);
    }
    for s in 0..out.len() {
        if scenario.phase.affects(out.splits[s]) {
            for mi in rng.choose_distinct(m, scenario.missing_count) {
                out.drop_modality(s, mi);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_dataset(n: usize) -> MultimodalDataset {
        let modalities = vec![
            ModalityConfig { name: "a".into(), channels: 2, window_len: 3, sampling_rate: 3.0 },
            ModalityConfig { name: "b".into(), channels: 1, window_len: 4, sampling_rate: 4.0 },
            ModalityConfig { name: "c".into(), channels: 1, window_len: 2, sampling_rate: 2.0 },
        ];
        let windows = modalities
            .iter()
            .map(|cfg| {
                let len = n * cfg.window_len * cfg.channels;
                Tensor::new(vec![n, cfg.window_len, cfg.channels], (0..len).map(|i| 1.0 + i as f64).collect()).unwrap()
            })
            .collect();
        let splits = (0..n).map(|i| [Split::Train, Split::Train, Split::Val, Split::Test][i % 4]).collect();
        MultimodalDataset {
            modalities,
            windows,
            labels: Some((0..n).map(|i| i % 2).collect()),
            labeled: vec![true; n],
            availability: vec![true; n * 3],
            splits,
            num_classes: 2,
        }
    }

    #[test]
    fn batch_counts() {
        let idx: Vec<usize> = (0..10).collect();
        let ssl = batch_indices(&idx, 4, Some(1), BatchMode::SelfSupervised).unwrap();
        assert_eq!(ssl.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        let eval = batch_indices(&idx, 4, Some(1), BatchMode::Eval).unwrap();
        assert_eq!(eval.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(eval, batch_indices(&idx, 4, Some(1), BatchMode::Eval).unwrap());
        assert_ne!(eval, batch_indices(&idx, 4, Some(2), BatchMode::Eval).unwrap());
        assert!(batch_indices(&idx, 1, None, BatchMode::Eval).is_err());
    }

    #[test]
    fn quotas_match_counting() {
        // 1% of 1000 over four classes of 250: 2.5 each, floors 2, two
        // remainders go to the lowest class ids.
        assert_eq!(allocate_quotas(&[250; 4], 0.01), vec![3, 3, 2, 2]);
        assert_eq!(allocate_quotas(&[250; 4], 0.01).iter().sum::<usize>(), 10);
        // Tiny fraction still keeps one per class.
        assert_eq!(allocate_quotas(&[100, 100, 100], 0.001), vec![1, 1, 1]);
        assert_eq!(allocate_quotas(&[7, 3], 1.0), vec![7, 3]);
    }

    #[test]
    fn missing_phase_none_is_identity() {
        let d = tiny_dataset(8);
        let mut rng = Rng::new(0);
        let s = MissingScenario { phase: MissingPhase::None, missing_count: 1 };
        assert_eq!(simulate_missing(&d, &s, &mut rng).unwrap(), d);
    }

    #[test]
    fn missing_inference_only_touches_test() {
        let d = tiny_dataset(16);
        let mut rng = Rng::new(0);
        let s = MissingScenario { phase: MissingPhase::InferenceOnly, missing_count: 2 };
        let out = simulate_missing(&d, &s, &mut rng).unwrap();
        out.validate().unwrap();
        for i in 0..16 {
            let missing = (0..3).filter(|&m| !out.is_available(i, m)).count();
            let expected = if d.splits[i] == Split::Test { 2 } else { 0 };
            assert_eq!(missing, expected);
        }
        let too_many = MissingScenario { phase: MissingPhase::InferenceOnly, missing_count: 3 };
        assert!(simulate_missing(&d, &too_many, &mut rng).is_err());
    }

    #[test]
    fn validate_catches_nonzero_unavailable() {
        let mut d = tiny_dataset(4);
        d.availability[0] = false;
        assert!(matches!(d.validate(), Err(Error::Inconsistent(_))));
        d.drop_modality(0, 0);
        d.validate().unwrap();
    }

    #[test]
    fn batch_attaches_labels_only_when_all_labeled() {
        let mut d = tiny_dataset(4);
        assert_eq!(d.batch(&[0, 1]).labels, Some(vec![0, 1]));
        d.labeled[1] = false;
        assert_eq!(d.batch(&[0, 1]).labels, None);
    }
}
