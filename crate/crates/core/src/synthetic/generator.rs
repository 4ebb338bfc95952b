use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::{FeatureSample, FeatureSet};
use super::{stream_rng, RngDomain};
use crate::error::{Error, Result};
use crate::prediction_store::ViewSet;

pub const DEFAULT_VIEW: &str = "default";

pub fn augmentation_view_name(index: usize) -> String {
    format!("aug{index}")
}

/// How class prototypes are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeLayout {
    /// Gaussian draws orthonormalized and scaled, so every pair of classes
    /// is equally far apart. Needs `num_classes <= feature_dim`.
    Orthogonal,
    /// Independent Gaussian draws with standard deviation `prototype_scale`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_aug_views: usize,
    pub feature_dim: usize,
    /// Samples per class before the train/test split.
    pub samples_per_class: usize,
    pub noise_default: f64,
    pub noise_optimal: f64,
    pub noise_other: f64,
    /// Planted low-noise augmentation view per class; `class % num_aug_views`
    /// when unset.
    pub planted_views: Option<Vec<usize>>,
    pub prototype_layout: PrototypeLayout,
    /// Prototype norm for the orthogonal layout, per-coordinate standard
    /// deviation for the Gaussian one.
    pub prototype_scale: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 5,
            num_aug_views: 4,
            feature_dim: 16,
            samples_per_class: 200,
            noise_default: 1.0,
            noise_optimal: 0.1,
            noise_other: 1.0,
            planted_views: None,
            prototype_layout: PrototypeLayout::Orthogonal,
            prototype_scale: 4.0,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn planted(&self) -> Vec<usize> {
        self.planted_views.clone().unwrap_or_else(|| {
            (0..self.num_classes)
                .map(|c| c % self.num_aug_views.max(1))
                .collect()
        })
    }

    pub fn train_count(&self) -> usize {
        ((self.samples_per_class as f64 * self.train_fraction).round() as usize)
            .min(self.samples_per_class)
    }

    pub fn view_set(&self) -> ViewSet {
        ViewSet {
            default_view: DEFAULT_VIEW.to_string(),
            augmentation_views: (0..self.num_aug_views).map(augmentation_view_name).collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.num_aug_views < 1 {
            return bad("num_aug_views must be at least 1".into());
        }
        if self.feature_dim < 1 || self.samples_per_class < 1 {
            return bad("feature_dim and samples_per_class must be positive".into());
        }
        let noises = [self.noise_default, self.noise_optimal, self.noise_other];
        if noises.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise levels must be finite and nonnegative".into());
        }
        // All-zero noise is the one allowed degenerate case.
        let noiseless = noises.iter().all(|s| *s == 0.0);
        if !noiseless
            && !(self.noise_optimal < self.noise_default && self.noise_optimal < self.noise_other)
        {
            return bad(format!(
                "noise_optimal ({}) must be below noise_default ({}) and noise_other ({})",
                self.noise_optimal, self.noise_default, self.noise_other
            ));
        }
        if !(self.prototype_scale.is_finite() && self.prototype_scale > 0.0) {
            return bad("prototype_scale must be positive".into());
        }
        if self.prototype_layout == PrototypeLayout::Orthogonal
            && self.num_classes > self.feature_dim
        {
            return bad(format!(
                "orthogonal prototypes need num_classes ({}) <= feature_dim ({})",
                self.num_classes, self.feature_dim
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        let planted = self.planted();
        if planted.len() != self.num_classes {
            return bad(format!(
                "planted_views has {} entries for {} classes",
                planted.len(),
                self.num_classes
            ));
        }
        if let Some(v) = planted.iter().find(|v| **v >= self.num_aug_views) {
            return bad(format!("planted view {v} out of range"));
        }
        Ok(())
    }
}

fn gaussian_vector<R: Rng>(rng: &mut R, dim: usize, center: &[f64], sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let z: f64 = rng.sample(StandardNormal);
            center[j] + sigma * z
        })
        .collect()
}

/// Modified Gram-Schmidt, then rescale every vector to norm `scale`.
fn orthonormalize(vectors: &mut [Vec<f64>], scale: f64) -> Result<()> {
    for i in 0..vectors.len() {
        let (done, rest) = vectors.split_at_mut(i);
        let v = &mut rest[0];
        for u in done.iter() {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / (scale * scale);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "class prototype {i} is degenerate; change the seed"
            )));
        }
        v.iter_mut().for_each(|a| *a *= scale / norm);
    }
    Ok(())
}

/// Draws class prototypes, then every sample's per-view features, and splits
/// each class into train and test by `train_fraction`.
pub fn generate(cfg: &SynthConfig) -> Result<(FeatureSet, FeatureSet)> {
    cfg.check()?;
    let d = cfg.feature_dim;
    let mut proto_rng = stream_rng(RngDomain::Generator, cfg.seed, 0);
    let zero = vec![0.0; d];
    let mut prototypes: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| gaussian_vector(&mut proto_rng, d, &zero, 1.0))
        .collect();
    match cfg.prototype_layout {
        PrototypeLayout::Gaussian => {
            for p in &mut prototypes {
                p.iter_mut().for_each(|x| *x *= cfg.prototype_scale);
            }
        }
        PrototypeLayout::Orthogonal => orthonormalize(&mut prototypes, cfg.prototype_scale)?,
    }
    for (a, pa) in prototypes.iter().enumerate() {
        if prototypes[a + 1..].iter().any(|pb| pb == pa) {
            return Err(Error::InvalidConfig(format!(
                "class prototype {a} is not distinct; change the seed"
            )));
        }
    }

    let planted = cfg.planted();
    let view_set = cfg.view_set();
    let n_train = cfg.train_count();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, proto) in prototypes.iter().enumerate() {
        for s in 0..cfg.samples_per_class {
            let global = (c * cfg.samples_per_class + s) as u64;
            let mut rng = stream_rng(RngDomain::Generator, cfg.seed, 1 + global);
            let mut views = IndexMap::new();
            views.insert(
                DEFAULT_VIEW.to_string(),
                gaussian_vector(&mut rng, d, proto, cfg.noise_default),
            );
            for (n, name) in view_set.augmentation_views.iter().enumerate() {
                let sigma = if n == planted[c] {
                    cfg.noise_optimal
                } else {
                    cfg.noise_other
                };
                views.insert(name.clone(), gaussian_vector(&mut rng, d, proto, sigma));
            }
            let sample = FeatureSample {
                sample_id: format!("c{c}-{s:04}"),
                true_class: c,
                views,
            };
            if s < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }

    let make = |name: &str, samples| FeatureSet {
        name: name.to_string(),
        num_classes: cfg.num_classes,
        feature_dim: d,
        view_set: view_set.clone(),
        samples,
    };
    Ok((make("synthetic-train", train), make("synthetic-test", test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let cfg = SynthConfig {
            noise_default: 0.0,
            noise_optimal: 0.0,
            noise_other: 0.0,
            samples_per_class: 4,
            ..SynthConfig::default()
        };
        let (train, test) = generate(&cfg).unwrap();
        for set in [&train, &test] {
            for s in &set.samples {
                let proto = &train.samples[s.true_class * cfg.train_count()].views[DEFAULT_VIEW];
                for x in s.views.values() {
                    assert_eq!(x, proto);
                }
            }
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let cfg = SynthConfig { samples_per_class: 12, seed: 42, ..SynthConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn split_counts() {
        let cfg = SynthConfig {
            num_classes: 3,
            samples_per_class: 10,
            ..SynthConfig::default()
        };
        let (train, test) = generate(&cfg).unwrap();
        assert_eq!(train.samples.len(), 24);
        assert_eq!(test.samples.len(), 6);
        assert!(train.violations().is_empty() && test.violations().is_empty());
    }

    #[test]
    fn planted_view_is_least_noisy() {
        let cfg = SynthConfig { samples_per_class: 50, ..SynthConfig::default() };
        let (train, _) = generate(&cfg).unwrap();
        let planted = cfg.planted();
        // Recover each class prototype from the planted view's mean, then
        // check per-view scatter around it.
        for c in 0..cfg.num_classes {
            let samples: Vec<_> = train.samples.iter().filter(|s| s.true_class == c).collect();
            let scatter = |view: &str| -> f64 {
                let mean: Vec<f64> = (0..cfg.feature_dim)
                    .map(|j| samples.iter().map(|s| s.views[view][j]).sum::<f64>() / samples.len() as f64)
                    .collect();
                samples
                    .iter()
                    .map(|s| s.views[view].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / samples.len() as f64
            };
            let best = &augmentation_view_name(planted[c]);
            for view in cfg.view_set().iter() {
                if view != best {
                    assert!(scatter(best) < scatter(view));
                }
            }
        }
    }

    #[test]
    fn orthogonal_prototypes_are_equidistant() {
        let cfg = SynthConfig {
            noise_default: 0.0,
            noise_optimal: 0.0,
            noise_other: 0.0,
            samples_per_class: 1,
            train_fraction: 0.5,
            prototype_scale: 3.0,
            ..SynthConfig::default()
        };
        let (train, test) = generate(&cfg).unwrap();
        let protos: Vec<&Vec<f64>> = train
            .samples
            .iter()
            .chain(&test.samples)
            .map(|s| &s.views[DEFAULT_VIEW])
            .collect();
        assert_eq!(protos.len(), cfg.num_classes);
        for (a, pa) in protos.iter().enumerate() {
            let norm: f64 = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 3.0).abs() < 1e-12);
            for pb in &protos[a + 1..] {
                let dot: f64 = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-12, "{dot}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let ok = SynthConfig::default();
        assert!(ok.check().is_ok());
        for bad in [
            SynthConfig { noise_optimal: 1.0, ..ok.clone() },
            SynthConfig { train_fraction: 1.0, ..ok.clone() },
            SynthConfig { train_fraction: 0.0, ..ok.clone() },
            SynthConfig { planted_views: Some(vec![0, 1]), ..ok.clone() },
            SynthConfig { planted_views: Some(vec![0, 1, 2, 3, 4]), ..ok.clone() },
            SynthConfig { num_classes: 1, ..ok.clone() },
            SynthConfig { prototype_scale: 0.0, ..ok.clone() },
            SynthConfig { num_classes: 17, ..ok.clone() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::InvalidConfig(_))), "{bad:?}");
        }
    }
}
