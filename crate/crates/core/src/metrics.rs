//! Distributional and predictive metrics.
//!
//! The distribution of the chain at a round is summarised by a moment-matched
//! Gaussian and compared to the target with the closed-form 2-Wasserstein
//! (Bures) distance
//!
//! ```text
//! W2² = ‖μa − μb‖² + tr(Σa + Σb − 2 (Σb^½ Σa Σb^½)^½)
//! ```
//!
//! Brier score uses the multiclass sum-of-squares convention
//! `Σ_k (p_k − 1[y = k])²`, which lies in `[0, 2]`.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

const SYM_TOL: f64 = 1e-10;
const EIG_TOL: f64 = 1e-10;
const SIMPLEX_TOL: f64 = 1e-9;

/// Mean vector and covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    mean: Vec<f64>,
    cov: Matrix,
}

impl GaussianSummary {
    /// Validates symmetry (1e-10) and eigenvalues ≥ −1e-10; small negative
    /// eigenvalues are clamped to zero.
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        if cov.rows() != mean.len() || !cov.is_square() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: cov.rows(),
            });
        }
        if mean.iter().any(|x| !x.is_finite()) || !cov.is_finite() {
            return Err(Error::NonFinite("Gaussian summary".into()));
        }
        let asym = cov.max_asymmetry();
        if asym > SYM_TOL {
            return Err(Error::NotSymmetric(asym));
        }
        let eig = linalg::sym_eigen(&cov)?;
        if let Some((index, &value)) = eig.values.iter().enumerate().find(|(_, v)| **v < -EIG_TOL) {
            return Err(Error::NotPositiveDefinite { index, value });
        }
        let cov = if eig.min() < 0.0 {
            eig.map(|x| x.max(0.0))
        } else {
            let mut c = cov;
            c.symmetrize();
            c
        };
        Ok(Self { mean, cov })
    }

    pub(crate) fn new_unchecked(mean: Vec<f64>, cov: Matrix) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }
}

/// Sample mean and unbiased (divisor R−1) covariance of `R ≥ 2` samples.
pub fn empirical_summary(samples: &[Vec<f64>]) -> Result<GaussianSummary> {
    let r = samples.len();
    if r < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {r}")));
    }
    let d = samples[0].len();
    if let Some(s) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: s.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        linalg::axpy(1.0, s, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    let mut cov = Matrix::zeros(d, d);
    let mut centred = vec![0.0; d];
    for s in samples {
        for ((c, x), m) in centred.iter_mut().zip(s).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += centred[i] * centred[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (r - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    GaussianSummary::new(mean, cov)
}

/// Symmetric PSD square root via Jacobi eigendecomposition; negative
/// eigenvalues are clamped to zero.
pub fn sym_sqrt(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.rows(),
            got: m.cols(),
        });
    }
    let scale = m.as_slice().iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let asym = m.max_asymmetry();
    if asym > SYM_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(linalg::sym_eigen(m)?.map(|x| x.max(0.0).sqrt()))
}

/// Squared-distance decomposition of W2 between two Gaussians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Parts {
    /// `‖μa − μb‖²`
    pub mean_sq: f64,
    /// Bures term, clamped at zero.
    pub cov_sq: f64,
}

impl W2Parts {
    pub fn total(&self) -> f64 {
        (self.mean_sq + self.cov_sq).sqrt()
    }
}

pub fn w2_parts(a: &GaussianSummary, b: &GaussianSummary) -> Result<W2Parts> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mean_sq = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let root_b = sym_sqrt(&b.cov)?;
    let mut inner = root_b.matmul(&a.cov).matmul(&root_b);
    inner.symmetrize();
    let cross = sym_sqrt(&inner)?.trace();
    let cov_sq = (a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0);
    Ok(W2Parts { mean_sq, cov_sq })
}

/// Closed-form 2-Wasserstein distance between two Gaussians.
pub fn w2_gaussian(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    Ok(w2_parts(a, b)?.total())
}

/// Averaged class-probability vector for one test point with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveRecord {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl PredictiveRecord {
    fn validate(&self) -> Result<()> {
        let sum: f64 = self.probs.iter().sum();
        if self.probs.is_empty()
            || self.probs.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || (sum - 1.0).abs() > SIMPLEX_TOL
        {
            return Err(Error::invalid(format!(
                "not a probability vector: {:?}",
                self.probs
            )));
        }
        if self.label >= self.probs.len() {
            return Err(Error::invalid(format!(
                "label {} outside {} classes",
                self.label,
                self.probs.len()
            )));
        }
        Ok(())
    }

    /// Argmax with ties broken towards the lowest index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub brier: f64,
    pub ece: f64,
}

/// Predictive quality of averaged class probabilities. Calibration uses
/// `bins` equal-width confidence bins.
pub fn classification_metrics(
    records: &[PredictiveRecord],
    bins: usize,
) -> Result<ClassificationMetrics> {
    if records.is_empty() {
        return Err(Error::invalid("no predictive records"));
    }
    if bins == 0 {
        return Err(Error::invalid("ece_bins must be >= 1"));
    }
    let n = records.len() as f64;
    let mut correct = 0usize;
    let mut brier = 0.0;
    let mut bin_count = vec![0usize; bins];
    let mut bin_conf = vec![0.0; bins];
    let mut bin_correct = vec![0usize; bins];
    for r in records {
        r.validate()?;
        let pred = r.predicted();
        let hit = pred == r.label;
        correct += usize::from(hit);
        brier += r
            .probs
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let t = if k == r.label { 1.0 } else { 0.0 };
                (p - t) * (p - t)
            })
            .sum::<f64>();
        let conf = r.probs[pred];
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        bin_count[b] += 1;
        bin_conf[b] += conf;
        bin_correct[b] += usize::from(hit);
    }
    let ece = (0..bins)
        .filter(|&b| bin_count[b] > 0)
        .map(|b| {
            let nb = bin_count[b] as f64;
            (nb / n) * (bin_conf[b] / nb - bin_correct[b] as f64 / nb).abs()
        })
        .sum();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / n,
        brier: brier / n,
        ece,
    })
}

/// Running mean of per-sample probability matrices (test points × classes).
#[derive(Debug, Clone)]
pub struct PredictiveAverager {
    labels: Vec<usize>,
    sum: Vec<Vec<f64>>,
    count: usize,
}

impl PredictiveAverager {
    pub fn new(labels: Vec<usize>) -> Self {
        Self {
            labels,
            sum: Vec::new(),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, probs: &[Vec<f64>]) -> Result<()> {
        if probs.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.labels.len(),
                got: probs.len(),
            });
        }
        if self.count == 0 {
            let k = probs.first().map_or(0, Vec::len);
            if probs.iter().any(|p| p.len() != k) {
                return Err(Error::invalid("ragged probability matrix"));
            }
            self.sum = vec![vec![0.0; k]; probs.len()];
        }
        for (acc, p) in self.sum.iter_mut().zip(probs) {
            if acc.len() != p.len() {
                return Err(Error::DimensionMismatch {
                    expected: acc.len(),
                    got: p.len(),
                });
            }
            linalg::axpy(1.0, p, acc);
        }
        self.count += 1;
        Ok(())
    }

    pub fn records(&self) -> Vec<PredictiveRecord> {
        let n = self.count.max(1) as f64;
        self.sum
            .iter()
            .zip(&self.labels)
            .map(|(s, &label)| PredictiveRecord {
                probs: s.iter().map(|x| x / n).collect(),
                label,
            })
            .collect()
    }
}

/// Averages a sequence of probability matrices.
pub fn predictive_average<'a>(
    labels: &[usize],
    samples: impl IntoIterator<Item = &'a [Vec<f64>]>,
) -> Result<Vec<PredictiveRecord>> {
    let mut avg = PredictiveAverager::new(labels.to_vec());
    for s in samples {
        avg.push(s)?;
    }
    if avg.count() == 0 {
        return Err(Error::invalid("no probability samples"));
    }
    Ok(avg.records())
}
