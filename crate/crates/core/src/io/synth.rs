//! Seeded Gaussian cluster datasets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::episodes::{DatasetIndex, SampleRecord};
use crate::error::{Error, Result};
use crate::io::manifest::{DatasetManifest, MANIFEST_SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    /// One count per class; unequal counts model class imbalance.
    pub samples_per_class: Vec<usize>,
    /// Pairwise distance between class means, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Four imbalanced classes mirroring a 3200/2240/896/64 split.
    pub fn imbalanced_four(dim: usize, separation: f64, seed: u64) -> Self {
        Self {
            n_classes: 4,
            dim,
            samples_per_class: vec![3200, 2240, 896, 64],
            separation,
            sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.dim < 2 {
            return bad(format!("need dim >= 2, got {}", self.dim));
        }
        if self.dim < self.n_classes {
            return bad(format!(
                "class means sit on orthogonal axes, so dim ({}) must be >= n_classes ({})",
                self.dim, self.n_classes
            ));
        }
        if self.samples_per_class.len() != self.n_classes {
            return bad(format!(
                "{} per-class counts for {} classes",
                self.samples_per_class.len(),
                self.n_classes
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation must be >= 0, got {}", self.separation));
        }
        Ok(())
    }

    /// Class means: `separation * sigma / sqrt(2)` along axis `c`, so every
    /// pair of means is `separation * sigma` apart.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let a = self.separation * self.sigma / std::f64::consts::SQRT_2;
        (0..self.n_classes)
            .map(|c| {
                let mut m = vec![0.0; self.dim];
                m[c] = a;
                m
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub manifest: DatasetManifest,
    pub payload: Vec<f32>,
}

impl SyntheticData {
    pub fn index(&self) -> Result<DatasetIndex> {
        self.manifest.clone().into_index(self.payload.clone())
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let classes: Vec<String> = (0..spec.n_classes).map(|c| format!("class{c}")).collect();
    let means = spec.class_means();
    let total: usize = spec.samples_per_class.iter().sum();
    let mut payload = Vec::with_capacity(total * spec.dim);
    let mut samples = Vec::with_capacity(total);
    for (class, (&count, mean)) in spec.samples_per_class.iter().zip(&means).enumerate() {
        for i in 0..count {
            samples.push(SampleRecord {
                id: format!("{}-{i:05}", classes[class]),
                class,
                offset: payload.len(),
                len: spec.dim,
            });
            payload.extend(mean.iter().map(|&mu| (mu + noise.sample(&mut rng)) as f32));
        }
    }
    Ok(SyntheticData {
        manifest: DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            classes,
            sample_shape: vec![spec.dim],
            samples,
            payload: Some("payload.fsrt".into()),
            normalized: false,
        },
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means_are_equidistant() {
        let spec = SyntheticSpec::imbalanced_four(16, 6.0, 0);
        let m = spec.class_means();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((d - 6.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn imbalance_profile_is_kept() {
        let spec = SyntheticSpec::imbalanced_four(8, 3.0, 1);
        let idx = gen_synthetic(&spec).unwrap().index().unwrap();
        assert_eq!(idx.class_counts(), vec![3200, 2240, 896, 64]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec {
            n_classes: 3,
            dim: 4,
            samples_per_class: vec![20, 10, 5],
            separation: 2.0,
            sigma: 0.5,
            seed: 42,
        };
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(
            crate::io::manifest::encode_raw(&a.payload),
            crate::io::manifest::encode_raw(&b.payload)
        );
    }

    #[test]
    fn zero_separation_still_generates() {
        let spec = SyntheticSpec {
            n_classes: 2,
            dim: 2,
            samples_per_class: vec![3, 3],
            separation: 0.0,
            sigma: 1.0,
            seed: 0,
        };
        assert!(spec.class_means().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(gen_synthetic(&spec).unwrap().payload.len(), 12);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SyntheticSpec::imbalanced_four(16, 6.0, 0);
        spec.sigma = 0.0;
        assert!(gen_synthetic(&spec).is_err());
        let mut spec = SyntheticSpec::imbalanced_four(16, 6.0, 0);
        spec.n_classes = 1;
        assert!(gen_synthetic(&spec).is_err());
    }
}
