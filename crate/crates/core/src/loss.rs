//! Variance-invariance-covariance objective over two global embeddings.
//!
//! Each term comes with a closed-form gradient so the tape can treat it as a
//! single node. The variance term uses the population variance (divide by
//! `N`) under the square root; the covariance matrix uses `N - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

/// Term weights and variance-hinge constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Invariance weight.
    pub lambda: f64,
    /// Variance weight.
    pub mu: f64,
    /// Covariance weight.
    pub nu: f64,
    /// Target standard deviation of every embedding dimension.
    pub gamma: f64,
    /// Added to the variance before the square root.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 10.0, mu: 10.0, nu: 100.0, gamma: 1.0, eps: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("loss.lambda", self.lambda), ("loss.mu", self.mu), ("loss.nu", self.nu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("loss.gamma", "must be > 0"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("loss.eps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub invariance: f64,
    pub variance_v1: f64,
    pub variance_v2: f64,
    pub covariance_v1: f64,
    pub covariance_v2: f64,
    pub total: f64,
}

fn check_matrix(op: &'static str, z: &Tensor, min_rows: usize) -> Result<(usize, usize)> {
    z.expect_rank(op, 2)?;
    let (n, d) = (z.dim(0), z.dim(1));
    if n < min_rows {
        return Err(if min_rows >= 2 {
            Error::BatchTooSmall { op, n }
        } else {
            Error::EmptyAxis { op }
        });
    }
    Ok((n, d))
}

fn column_means(z: &Tensor) -> Vec<f64> {
    let (n, d) = (z.dim(0), z.dim(1));
    let mut mean = vec![0.0; d];
    for row in z.values().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

fn centered(z: &Tensor) -> Vec<f64> {
    let d = z.dim(1);
    let mean = column_means(z);
    let mut out = z.values().to_vec();
    for row in out.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// Mean squared difference between paired embeddings.
pub fn invariance_term(z1: &Tensor, z2: &Tensor) -> Result<f64> {
    z1.same_shape(z2, "invariance_term")?;
    let (n, d) = check_matrix("invariance_term", z1, 1)?;
    let sq: f64 = z1.values().iter().zip(z2.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (n * d) as f64)
}

pub fn invariance_grad(z1: &Tensor, z2: &Tensor) -> (Tensor, Tensor) {
    let scale = 2.0 / z1.len() as f64;
    let g: Vec<f64> = z1.values().iter().zip(z2.values()).map(|(a, b)| scale * (a - b)).collect();
    let neg = g.iter().map(|v| -v).collect();
    (
        Tensor::new(z1.shape().to_vec(), g).expect("shape"),
        Tensor::new(z1.shape().to_vec(), neg).expect("shape"),
    )
}

/// Per-column `sqrt(Var + eps)` with population variance.
pub fn column_stds(z: &Tensor, eps: f64) -> Vec<f64> {
    let (n, d) = (z.dim(0), z.dim(1));
    let c = centered(z);
    let mut var = vec![0.0; d];
    for row in c.chunks(d) {
        for (s, v) in var.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    var.iter().map(|v| (v / n as f64 + eps).sqrt()).collect()
}

/// Hinge on each column's regularized standard deviation, averaged over columns.
pub fn variance_term(z: &Tensor, gamma: f64, eps: f64) -> Result<f64> {
    let (_, d) = check_matrix("variance_term", z, 2)?;
    let stds = column_stds(z, eps);
    Ok(stds.iter().map(|s| (gamma - s).max(0.0)).sum::<f64>() / d as f64)
}

/// Subgradient 0 at the hinge kink.
pub fn variance_grad(z: &Tensor, gamma: f64, eps: f64) -> Tensor {
    let (n, d) = (z.dim(0), z.dim(1));
    let stds = column_stds(z, eps);
    let c = centered(z);
    let mut g = vec![0.0; c.len()];
    for (g_row, c_row) in g.chunks_mut(d).zip(c.chunks(d)) {
        for j in 0..d {
            if gamma - stds[j] > 0.0 {
                g_row[j] = -c_row[j] / (d as f64 * n as f64 * stds[j]);
            }
        }
    }
    Tensor::new(z.shape().to_vec(), g).expect("shape")
}

/// Sample covariance matrix `[D, D]` of the columns of `z`.
pub fn covariance_matrix(z: &Tensor) -> Vec<f64> {
    let (n, d) = (z.dim(0), z.dim(1));
    let c = centered(z);
    let mut cov = vec![0.0; d * d];
    for row in c.chunks(d) {
        for j in 0..d {
            let rj = row[j];
            if rj == 0.0 {
                continue;
            }
            for (acc, &rk) in cov[j * d..(j + 1) * d].iter_mut().zip(row) {
                *acc += rj * rk;
            }
        }
    }
    let inv = 1.0 / (n as f64 - 1.0);
    cov.iter_mut().for_each(|v| *v *= inv);
    cov
}

/// Sum of squared off-diagonal covariances, scaled by `1/D`.
pub fn covariance_term(z: &Tensor) -> Result<f64> {
    let (_, d) = check_matrix("covariance_term", z, 2)?;
    let cov = covariance_matrix(z);
    let mut total = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j != k {
                total += cov[j * d + k] * cov[j * d + k];
            }
        }
    }
    Ok(total / d as f64)
}

pub fn covariance_grad(z: &Tensor) -> Tensor {
    let (n, d) = (z.dim(0), z.dim(1));
    let mut cov = covariance_matrix(z);
    for j in 0..d {
        cov[j * d + j] = 0.0;
    }
    let c = centered(z);
    let scale = 4.0 / (d as f64 * (n as f64 - 1.0));
    let mut g = vec![0.0; c.len()];
    for (g_row, c_row) in g.chunks_mut(d).zip(c.chunks(d)) {
        for (j, &cj) in c_row.iter().enumerate() {
            if cj == 0.0 {
                continue;
            }
            for (gv, &cv) in g_row.iter_mut().zip(&cov[j * d..(j + 1) * d]) {
                *gv += cj * cv;
            }
        }
        g_row.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::new(z.shape().to_vec(), g).expect("shape")
}

/// Weighted sum of the three terms over both views.
pub fn total_loss(z1: &Tensor, z2: &Tensor, w: &LossWeights) -> Result<LossBreakdown> {
    z1.same_shape(z2, "total_loss")?;
    let invariance = invariance_term(z1, z2)?;
    let variance_v1 = variance_term(z1, w.gamma, w.eps)?;
    let variance_v2 = variance_term(z2, w.gamma, w.eps)?;
    let covariance_v1 = covariance_term(z1)?;
    let covariance_v2 = covariance_term(z2)?;
    let total = w.lambda * invariance
        + w.mu * (variance_v1 + variance_v2)
        + w.nu * (covariance_v1 + covariance_v2);
    Ok(LossBreakdown { invariance, variance_v1, variance_v2, covariance_v1, covariance_v2, total })
}

/// Gradients of [`total_loss`] with respect to both views.
pub fn total_loss_grad(z1: &Tensor, z2: &Tensor, w: &LossWeights) -> (Tensor, Tensor) {
    let (mut g1, mut g2) = invariance_grad(z1, z2);
    g1.values_mut().iter_mut().for_each(|v| *v *= w.lambda);
    g2.values_mut().iter_mut().for_each(|v| *v *= w.lambda);
    for (g, z) in [(&mut g1, z1), (&mut g2, z2)] {
        let gv = variance_grad(z, w.gamma, w.eps);
        let gc = covariance_grad(z);
        for ((a, v), c) in g.values_mut().iter_mut().zip(gv.values()).zip(gc.values()) {
            *a += w.mu * v + w.nu * c;
        }
    }
    (g1, g2)
}

/// Records the objective on `tape`; returns the scalar loss node and the breakdown.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let inv = tape.invariance(z1, z2)?;
    let v1 = tape.variance(z1, w.gamma, w.eps)?;
    let v2 = tape.variance(z2, w.gamma, w.eps)?;
    let c1 = tape.covariance(z1)?;
    let c2 = tape.covariance(z2)?;
    let total = tape.weighted_sum(&[
        (inv, w.lambda),
        (v1, w.mu),
        (v2, w.mu),
        (c1, w.nu),
        (c2, w.nu),
    ])?;
    let s = |v: Var| tape.value(v).values()[0];
    let breakdown = LossBreakdown {
        invariance: s(inv),
        variance_v1: s(v1),
        variance_v2: s(v2),
        covariance_v1: s(c1),
        covariance_v2: s(c2),
        total: s(total),
    };
    Ok((total, breakdown))
}
