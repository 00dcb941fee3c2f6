//! Per-family spherical Gaussian boundaries and the multi-centroid z-score
//! gate.
//!
//! Each family k is summarised by its embedding centroid μ_k, an isotropic
//! scale σ_k, and the mean m_k and population standard deviation s_k of its
//! training samples' Euclidean distances to μ_k. A new embedding gets one
//! z-score per family, `z_k = (‖e − μ_k‖ − m_k) / s_k`, and is accepted as
//! in-distribution when at least one z_k falls inside the band.

mod io;
mod laplacian;

pub use io::{boundaries_to_string, read_boundaries, write_boundaries};
pub use laplacian::{normalized_laplacian, spectral_diagnostics, SpectralReport, CLUSTER_EIGEN_THRESHOLD};

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::matrix::{euclidean, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassBoundary {
    pub class_id: usize,
    pub centroid: Vec<f64>,
    /// RMS per-coordinate deviation from the centroid.
    pub sigma_iso: f64,
    /// Mean training distance to the centroid.
    pub dist_mean: f64,
    /// Population standard deviation of training distances to the centroid.
    pub dist_std: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceMode {
    /// σ_k² I per family.
    PerClass,
    /// One pooled σ² I shared by all families.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandMode {
    /// Accept when some |z_k| ≤ band.
    Symmetric,
    /// Accept when some z_k ≤ band; unusually close samples are never
    /// rejected.
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub band: f64,
    pub mode: BandMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            band: 1.0,
            mode: BandMode::Symmetric,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.band > 0.0 && self.band.is_finite()) {
            return Err(Error::invalid("band must be positive"));
        }
        Ok(())
    }

    fn deviation(&self, z: f64) -> f64 {
        match self.mode {
            BandMode::Symmetric => z.abs(),
            BandMode::OneSided => z,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySet {
    pub boundaries: Vec<ClassBoundary>,
    pub embedding_dim: usize,
    pub covariance: CovarianceMode,
    /// Gate settings recorded alongside the boundaries.
    pub gate: GateConfig,
}

impl BoundarySet {
    pub fn num_classes(&self) -> usize {
        self.boundaries.len()
    }

    /// Pooled isotropic scale: `sqrt(Σ n_k σ_k² / Σ n_k)`.
    pub fn shared_sigma(&self) -> f64 {
        let n: usize = self.boundaries.iter().map(|b| b.n_samples).sum();
        let s: f64 = self
            .boundaries
            .iter()
            .map(|b| b.n_samples as f64 * b.sigma_iso * b.sigma_iso)
            .sum();
        (s / n as f64).sqrt()
    }

    fn sigma_for(&self, k: usize) -> f64 {
        match self.covariance {
            CovarianceMode::PerClass => self.boundaries[k].sigma_iso,
            CovarianceMode::Shared => self.shared_sigma(),
        }
    }

    /// Class-conditional log density of family `k` under the configured
    /// covariance mode.
    pub fn log_density(&self, x: &[f64], k: usize) -> Result<f64> {
        let b = self
            .boundaries
            .get(k)
            .ok_or_else(|| Error::invalid(format!("no boundary for class {k}")))?;
        log_density_with(x, &b.centroid, self.sigma_for(k))
    }

    pub fn validate(&self) -> Result<()> {
        for (k, b) in self.boundaries.iter().enumerate() {
            if b.class_id != k {
                return Err(Error::invalid(format!("boundary {k} carries class id {}", b.class_id)));
            }
            if b.centroid.len() != self.embedding_dim {
                return Err(Error::DimensionMismatch {
                    stage: "boundary centroid",
                    expected: self.embedding_dim,
                    found: b.centroid.len(),
                });
            }
            if !(b.sigma_iso > 0.0 && b.dist_std > 0.0) || b.n_samples < 2 {
                return Err(Error::invalid(format!("boundary {k} is degenerate")));
            }
            if b.centroid.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid(format!("boundary {k} has a non-finite centroid")));
            }
        }
        Ok(())
    }
}

/// Fits one boundary per class from labelled embeddings (one row each).
pub fn fit_boundaries(embeddings: &Matrix, labels: &[usize], n_classes: usize) -> Result<BoundarySet> {
    if embeddings.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            stage: "boundary labels",
            expected: embeddings.rows(),
            found: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
    }
    let d = embeddings.cols();
    let mut boundaries = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        let rows: Vec<&[f64]> = (0..labels.len())
            .filter(|&i| labels[i] == k)
            .map(|i| embeddings.row(i))
            .collect();
        let family = format!("class {k}");
        if rows.len() < 2 {
            return Err(Error::TooFewSamples {
                family,
                count: rows.len(),
                required: 2,
            });
        }
        let n = rows.len() as f64;
        let mut centroid = vec![0.0; d];
        for r in &rows {
            for (c, v) in centroid.iter_mut().zip(*r) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n);

        let dists: Vec<f64> = rows.iter().map(|r| euclidean(r, &centroid)).collect();
        let sq_sum: f64 = dists.iter().map(|x| x * x).sum();
        let sigma_iso = (sq_sum / (n * d as f64)).sqrt();
        let dist_mean = dists.iter().sum::<f64>() / n;
        let dist_std = (dists.iter().map(|x| (x - dist_mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(dist_std > 64.0 * f64::EPSILON * dist_mean.max(f64::MIN_POSITIVE)) || sigma_iso == 0.0 {
            return Err(Error::DegenerateFamily { family });
        }
        boundaries.push(ClassBoundary {
            class_id: k,
            centroid,
            sigma_iso,
            dist_mean,
            dist_std,
            n_samples: rows.len(),
        });
    }
    Ok(BoundarySet {
        boundaries,
        embedding_dim: d,
        covariance: CovarianceMode::PerClass,
        gate: GateConfig::default(),
    })
}

fn log_density_with(x: &[f64], mu: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != mu.len() {
        return Err(Error::DimensionMismatch {
            stage: "gaussian density",
            expected: mu.len(),
            found: x.len(),
        });
    }
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let var = sigma * sigma;
    Ok(-0.5 * d * (2.0 * PI * var).ln() - sq / (2.0 * var))
}

/// `log N(x | μ_k, σ_k² I)`.
pub fn log_density(x: &[f64], boundary: &ClassBoundary) -> Result<f64> {
    log_density_with(x, &boundary.centroid, boundary.sigma_iso)
}

/// `N(x | μ_k, σ_k² I) = (2πσ_k²)^(−d/2) · exp(−‖x − μ_k‖² / (2σ_k²))`.
pub fn gaussian_density(x: &[f64], boundary: &ClassBoundary) -> Result<f64> {
    Ok(log_density(x, boundary)?.exp())
}

pub fn z_score(value: f64, mean: f64, std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::invalid("standard deviation must be positive"));
    }
    Ok((value - mean) / std)
}

/// `std / mean`.
pub fn coefficient_of_variation(mean: f64, std: f64) -> Result<f64> {
    if mean == 0.0 {
        return Err(Error::invalid("coefficient of variation undefined for zero mean"));
    }
    Ok(std / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    InDistribution,
    OutOfDistribution,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::InDistribution => "in_distribution",
            Decision::OutOfDistribution => "out_of_distribution",
        }
    }
}

/// Outlier tier of the smallest |z|, using the fixed 1 and 2 cut-offs.
/// Reported only; the decision uses the configured band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suspicion {
    Typical,
    PossibleOutlier,
    HighlySuspicious,
}

impl Suspicion {
    pub fn from_abs_z(z: f64) -> Self {
        if z > 2.0 {
            Suspicion::HighlySuspicious
        } else if z > 1.0 {
            Suspicion::PossibleOutlier
        } else {
            Suspicion::Typical
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Suspicion::Typical => "typical",
            Suspicion::PossibleOutlier => "possible_outlier",
            Suspicion::HighlySuspicious => "highly_suspicious",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodVerdict {
    pub z_scores: Vec<f64>,
    pub min_abs_z: f64,
    pub decision: Decision,
    /// Family with the smallest deviation (|z| or, one-sided, z); lowest
    /// index on ties.
    pub nearest_class: usize,
    /// Softmax over the negated deviations, taken at `nearest_class`.
    pub confidence: f64,
    pub suspicion: Suspicion,
}

/// Applies the gate to a vector of per-family z-scores.
pub fn verdict_from_z(z_scores: Vec<f64>, gate: GateConfig) -> Result<OodVerdict> {
    gate.validate()?;
    if z_scores.is_empty() {
        return Err(Error::invalid("no boundaries to score against"));
    }
    let dev: Vec<f64> = z_scores.iter().map(|&z| gate.deviation(z)).collect();
    let mut nearest = 0;
    for k in 1..dev.len() {
        if dev[k] < dev[nearest] {
            nearest = k;
        }
    }
    let decision = if dev[nearest] <= gate.band {
        Decision::InDistribution
    } else {
        Decision::OutOfDistribution
    };
    let top = -dev[nearest];
    let norm: f64 = dev.iter().map(|d| (-d - top).exp()).sum();
    let min_abs_z = z_scores.iter().map(|z| z.abs()).fold(f64::INFINITY, f64::min);
    Ok(OodVerdict {
        min_abs_z,
        decision,
        nearest_class: nearest,
        confidence: 1.0 / norm,
        suspicion: Suspicion::from_abs_z(min_abs_z),
        z_scores,
    })
}

/// Per-family z-scores of one embedding.
pub fn z_scores(embedding: &[f64], set: &BoundarySet) -> Result<Vec<f64>> {
    if embedding.len() != set.embedding_dim {
        return Err(Error::DimensionMismatch {
            stage: "boundary gate",
            expected: set.embedding_dim,
            found: embedding.len(),
        });
    }
    set.boundaries
        .iter()
        .map(|b| z_score(euclidean(embedding, &b.centroid), b.dist_mean, b.dist_std))
        .collect()
}

pub fn classify_sample(embedding: &[f64], set: &BoundarySet, gate: GateConfig) -> Result<OodVerdict> {
    if set.boundaries.is_empty() {
        return Err(Error::invalid("empty boundary set"));
    }
    verdict_from_z(z_scores(embedding, set)?, gate)
}
