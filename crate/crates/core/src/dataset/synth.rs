use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetManifest, FeatureVector, Payload, SampleRecord, Scheme, Split};
use crate::error::{Error, Result};

/// Parameters of a synthetic polymorphic-family dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Total families, including OOD and proxy families.
    pub n_families: usize,
    pub dim: usize,
    pub samples_per_family: usize,
    /// Minimum pairwise centroid distance in units of `intra_family_sigma`.
    pub centroid_separation: f64,
    pub intra_family_sigma: f64,
    /// The last `n_ood_families` families are held out as OOD.
    pub n_ood_families: usize,
    /// Families just before the OOD block that are held aside as proxy
    /// outliers for training the fusion stage.
    pub n_proxy_families: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_families: 7,
            dim: 16,
            samples_per_family: 200,
            centroid_separation: 10.0,
            intra_family_sigma: 1.0,
            n_ood_families: 2,
            n_proxy_families: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_families < 1 || self.dim < 1 || self.samples_per_family < 1 {
            return Err(Error::invalid("synthetic counts must be at least 1"));
        }
        if !(self.centroid_separation > 0.0 && self.centroid_separation.is_finite()) {
            return Err(Error::invalid("centroid separation must be positive"));
        }
        if !(self.intra_family_sigma > 0.0 && self.intra_family_sigma.is_finite()) {
            return Err(Error::invalid("intra-family sigma must be positive"));
        }
        if self.n_ood_families + self.n_proxy_families >= self.n_families {
            return Err(Error::invalid(
                "need at least one in-distribution family after OOD and proxy families",
            ));
        }
        if self.n_families > 2 * self.dim {
            return Err(Error::invalid(format!(
                "dimension {} too small to place {} separated centroids (max {})",
                self.dim,
                self.n_families,
                2 * self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub manifest: DatasetManifest,
    /// Aligned with `manifest.samples`.
    pub features: Vec<FeatureVector>,
    /// Family centroids after rescaling, one per family in generation order.
    pub centroids: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation after rescaling.
    pub sigma: f64,
}

pub fn family_name(k: usize) -> String {
    format!("family-{k:02}")
}

/// Draws isotropic Gaussian families with centroids at `±a·e_i`, where
/// `a = separation·σ/√2`, so every pair of centroids is at least
/// `separation·σ` apart. All values are then mapped into `[0, 1]` by one
/// global affine map, which keeps the clusters spherical.
///
/// ID samples start in the train split and proxy samples in train; OOD
/// samples are in test. Run [`super::split_dataset`] to stratify.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SyntheticSet> {
    spec.validate()?;
    let sigma = spec.intra_family_sigma;
    let a = spec.centroid_separation * sigma / std::f64::consts::SQRT_2;
    let centroids: Vec<Vec<f64>> = (0..spec.n_families)
        .map(|k| {
            let mut c = vec![0.0; spec.dim];
            c[k % spec.dim] = if k < spec.dim { a } else { -a };
            c
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut raw = Vec::with_capacity(spec.n_families * spec.samples_per_family);
    for c in &centroids {
        for _ in 0..spec.samples_per_family {
            let v: Vec<f64> = c.iter().map(|&ci| ci + noise.sample(&mut rng)).collect();
            raw.push(v);
        }
    }

    let lo = raw.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let rescale = |v: f64| ((v - lo) / span).clamp(0.0, 1.0);

    let scheme = Scheme::Synthetic { dim: spec.dim };
    let n_id = spec.n_families - spec.n_ood_families - spec.n_proxy_families;
    let mut samples = Vec::with_capacity(raw.len());
    let mut features = Vec::with_capacity(raw.len());
    for (i, v) in raw.into_iter().enumerate() {
        let k = i / spec.samples_per_family;
        let fv = FeatureVector::new(v.into_iter().map(rescale).collect(), scheme)?;
        samples.push(SampleRecord {
            id: format!("f{k:02}-{:05}", i % spec.samples_per_family),
            family: family_name(k),
            split: if k >= spec.n_families - spec.n_ood_families {
                Split::Test
            } else {
                Split::Train
            },
            payload: Payload::Features(fv.clone()),
        });
        features.push(fv);
    }

    let manifest = DatasetManifest {
        samples,
        families: (0..n_id).map(family_name).collect(),
        proxy_families: (n_id..n_id + spec.n_proxy_families).map(family_name).collect(),
        ood_families: (n_id + spec.n_proxy_families..spec.n_families)
            .map(family_name)
            .collect(),
        seed,
    };
    manifest.validate()?;
    Ok(SyntheticSet {
        manifest,
        features,
        centroids: centroids
            .iter()
            .map(|c| c.iter().map(|&x| (x - lo) / span).collect())
            .collect(),
        sigma: sigma / span,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::euclidean;

    #[test]
    fn single_family_mean_is_near_centroid() {
        let spec = SynthSpec {
            n_families: 1,
            n_ood_families: 0,
            samples_per_family: 10,
            ..SynthSpec::default()
        };
        let set = generate_synthetic(&spec, 5).unwrap();
        assert_eq!(set.features.len(), 10);
        let tol = 3.0 * set.sigma / 10f64.sqrt();
        for j in 0..spec.dim {
            let mean: f64 = set.features.iter().map(|f| f.values()[j]).sum::<f64>() / 10.0;
            assert!((mean - set.centroids[0][j]).abs() <= tol, "coordinate {j}");
        }
    }

    #[test]
    fn ood_families_are_the_last_ones() {
        let spec = SynthSpec {
            n_families: 5,
            n_ood_families: 2,
            samples_per_family: 4,
            ..SynthSpec::default()
        };
        let set = generate_synthetic(&spec, 0).unwrap();
        assert_eq!(set.manifest.families.len(), 3);
        assert_eq!(set.manifest.ood_families, vec!["family-03", "family-04"]);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default();
        let a = generate_synthetic(&spec, 77).unwrap();
        let b = generate_synthetic(&spec, 77).unwrap();
        assert_eq!(a.features, b.features);
        let c = generate_synthetic(&spec, 78).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn centroids_respect_separation() {
        let spec = SynthSpec {
            n_families: 12,
            dim: 8,
            n_ood_families: 1,
            samples_per_family: 2,
            centroid_separation: 6.0,
            ..SynthSpec::default()
        };
        let set = generate_synthetic(&spec, 1).unwrap();
        for i in 0..12 {
            for j in 0..i {
                let d = euclidean(&set.centroids[i], &set.centroids[j]);
                assert!(d >= 6.0 * set.sigma * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn too_many_families_for_dimension() {
        let spec = SynthSpec {
            n_families: 9,
            dim: 4,
            n_ood_families: 0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn wide_separation_keeps_samples_nearest_own_centroid() {
        let spec = SynthSpec::default();
        let set = generate_synthetic(&spec, 3).unwrap();
        let mut correct = 0;
        for (i, f) in set.features.iter().enumerate() {
            let own = i / spec.samples_per_family;
            let nearest = (0..spec.n_families)
                .min_by(|&a, &b| {
                    euclidean(f.values(), &set.centroids[a])
                        .total_cmp(&euclidean(f.values(), &set.centroids[b]))
                })
                .unwrap();
            correct += usize::from(nearest == own);
        }
        assert!(correct as f64 >= 0.99 * set.features.len() as f64);
    }
}
