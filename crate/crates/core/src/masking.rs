//! Binary masks over the stacked intermediate embeddings `[N, M, K]`.
//!
//! A mask entry of 1 keeps the embedding value, 0 zeroes it. Kept entries are
//! not rescaled, so a training-time spatial mask and an inference-time mask
//! built from real missingness look the same to the aggregator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Random,
    Spatial,
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyKind::Random => "random",
            StrategyKind::Spatial => "spatial",
        })
    }
}

/// Masking strategy. `rate` applies to `random`, `count` to `spatial`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub strategy: StrategyKind,
    pub rate: f64,
    pub count: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { strategy: StrategyKind::Spatial, rate: 0.5, count: 1 }
    }
}

impl MaskSpec {
    pub fn random(rate: f64) -> Self {
        Self { strategy: StrategyKind::Random, rate, ..Self::default() }
    }

    pub fn spatial(count: usize) -> Self {
        Self { strategy: StrategyKind::Spatial, count, ..Self::default() }
    }

    /// The value that varies along a sweep of this strategy.
    pub fn grid_value(&self) -> f64 {
        match self.strategy {
            StrategyKind::Random => self.rate,
            StrategyKind::Spatial => self.count as f64,
        }
    }

    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        match self.strategy {
            StrategyKind::Random if !(0.0..=1.0).contains(&self.rate) => {
                Err(Error::config("masking.rate", format!("must lie in [0, 1], got {}", self.rate)))
            }
            StrategyKind::Spatial if self.count > num_modalities => Err(Error::config(
                "masking.count",
                format!("{} exceeds the number of modalities {num_modalities}", self.count),
            )),
            _ => Ok(()),
        }
    }

    /// Canonical label used in cache keys and reports.
    pub fn label(&self) -> String {
        match self.strategy {
            StrategyKind::Random => format!("random:{}", self.rate),
            StrategyKind::Spatial => format!("spatial:{}", self.count),
        }
    }
}

/// 0/1 tensor of shape `[N, M, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    bits: Tensor,
}

impl MaskMatrix {
    pub fn ones(n: usize, m: usize, k: usize) -> Self {
        Self { bits: Tensor::full(&[n, m, k], 1.0) }
    }

    /// Whole-modality mask: `dropped[s]` lists the modalities zeroed for sample `s`.
    pub fn from_dropped_modalities(dropped: &[Vec<usize>], m: usize, k: usize) -> Self {
        let mut mask = Self::ones(dropped.len(), m, k);
        for (s, mods) in dropped.iter().enumerate() {
            for &mi in mods {
                mask.bits.values_mut()[(s * m + mi) * k..(s * m + mi + 1) * k].fill(0.0);
            }
        }
        mask
    }

    pub fn bits(&self) -> &Tensor {
        &self.bits
    }

    pub fn shape(&self) -> &[usize] {
        self.bits.shape()
    }

    pub fn zero_count(&self) -> usize {
        self.bits.values().iter().filter(|&&b| b == 0.0).count()
    }

    /// Elementwise logical AND.
    pub fn and(&self, other: &MaskMatrix) -> Result<MaskMatrix> {
        self.bits.same_shape(&other.bits, "mask_and")?;
        let values = self.bits.values().iter().zip(other.bits.values()).map(|(a, b)| a * b).collect();
        Ok(MaskMatrix { bits: Tensor::new(self.bits.shape().to_vec(), values)? })
    }

    /// Modalities of sample `s` whose K entries are all zero.
    pub fn dropped_modalities(&self, s: usize) -> Vec<usize> {
        let (m, k) = (self.bits.dim(1), self.bits.dim(2));
        (0..m)
            .filter(|&mi| self.bits.values()[(s * m + mi) * k..(s * m + mi + 1) * k].iter().all(|&b| b == 0.0))
            .collect()
    }
}

/// One mask drawn from `spec`.
pub fn sample_mask(spec: &MaskSpec, n: usize, m: usize, k: usize, rng: &mut Rng) -> Result<MaskMatrix> {
    spec.validate(m)?;
    match spec.strategy {
        StrategyKind::Random => {
            let values = (0..n * m * k).map(|_| if rng.uniform() >= spec.rate { 1.0 } else { 0.0 }).collect();
            Ok(MaskMatrix { bits: Tensor::new(vec![n, m, k], values)? })
        }
        StrategyKind::Spatial => {
            let dropped: Vec<Vec<usize>> = (0..n).map(|_| rng.choose_distinct(m, spec.count)).collect();
            Ok(MaskMatrix::from_dropped_modalities(&dropped, m, k))
        }
    }
}

/// Two independently drawn views. Identical draws are not rejected.
pub fn sample_masks(
    spec: &MaskSpec,
    n: usize,
    m: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<(MaskMatrix, MaskMatrix)> {
    let a = sample_mask(spec, n, m, k, rng)?;
    let b = sample_mask(spec, n, m, k, rng)?;
    Ok((a, b))
}

pub fn apply_mask(q: &Tensor, mask: &MaskMatrix) -> Result<Tensor> {
    q.same_shape(&mask.bits, "apply_mask")?;
    let values = q.values().iter().zip(mask.bits.values()).map(|(a, b)| a * b).collect();
    Tensor::new(q.shape().to_vec(), values)
}

/// Zero rows wherever `available[s * m + mi]` is false.
pub fn forced_modality_mask(available: &[bool], m: usize, k: usize) -> MaskMatrix {
    let n = available.len() / m;
    let dropped: Vec<Vec<usize>> =
        (0..n).map(|s| (0..m).filter(|&mi| !available[s * m + mi]).collect()).collect();
    MaskMatrix::from_dropped_modalities(&dropped, m, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_zero_keeps_everything() {
        let mut rng = Rng::new(1);
        let (a, b) = sample_masks(&MaskSpec::random(0.0), 4, 3, 8, &mut rng).unwrap();
        assert_eq!(a.zero_count(), 0);
        assert_eq!(b.zero_count(), 0);
    }

    #[test]
    fn rate_one_drops_everything() {
        let mut rng = Rng::new(1);
        let a = sample_mask(&MaskSpec::random(1.0), 4, 3, 8, &mut rng).unwrap();
        assert_eq!(a.zero_count(), 4 * 3 * 8);
    }

    #[test]
    fn spatial_one_drops_one_row_per_sample() {
        let mut rng = Rng::new(2);
        let (a, b) = sample_masks(&MaskSpec::spatial(1), 5, 3, 8, &mut rng).unwrap();
        for mask in [a, b] {
            for s in 0..5 {
                assert_eq!(mask.dropped_modalities(s).len(), 1);
                let row = &mask.bits().values()[s * 24..(s + 1) * 24];
                assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 8);
            }
        }
    }

    #[test]
    fn spatial_count_above_m_rejected() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            sample_masks(&MaskSpec::spatial(4), 2, 3, 2, &mut rng),
            Err(Error::Config { .. })
        ));
        assert!(sample_masks(&MaskSpec::random(1.5), 2, 3, 2, &mut rng).is_err());
    }

    #[test]
    fn apply_examples() {
        let q = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(apply_mask(&q, &MaskMatrix::ones(1, 2, 2)).unwrap(), q);
        let zeros = MaskMatrix::from_dropped_modalities(&[vec![0, 1]], 2, 2);
        assert!(apply_mask(&q, &zeros).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&q, &MaskMatrix::ones(1, 1, 4)).is_err());
    }

    #[test]
    fn forced_mask_examples() {
        let all = forced_modality_mask(&[true; 6], 3, 4);
        assert_eq!(all, MaskMatrix::ones(2, 3, 4));

        let avail = [true, false, true, true, false, true];
        let mask = forced_modality_mask(&avail, 3, 4);
        assert_eq!(mask.zero_count(), 8);
        for s in 0..2 {
            assert_eq!(mask.dropped_modalities(s), vec![1]);
        }

        // Mixed pattern, compared against a direct construction.
        let avail = [true, false, false, true, true, true, false, true, false];
        let mask = forced_modality_mask(&avail, 3, 2);
        let mut expected = Vec::new();
        for &a in &avail {
            expected.extend([if a { 1.0 } else { 0.0 }; 2]);
        }
        assert_eq!(mask.bits().values(), expected.as_slice());
    }

    #[test]
    fn and_composes() {
        let a = MaskMatrix::from_dropped_modalities(&[vec![0], vec![2]], 3, 2);
        let b = MaskMatrix::from_dropped_modalities(&[vec![1], vec![2]], 3, 2);
        let c = a.and(&b).unwrap();
        assert_eq!(c.dropped_modalities(0), vec![0, 1]);
        assert_eq!(c.dropped_modalities(1), vec![2]);
    }
}
