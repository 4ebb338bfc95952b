use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::FeatureSet;
use super::{stream_rng, RngDomain};
use crate::error::{Error, Result};
use crate::prediction_store::{argmax, softmax, Manifest, PredictionRecord, ViewPrediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Input-feature dropout rate used for the stochastic passes.
    pub dropout_rate: f64,
    /// Standard deviation of the Gaussian weight initialisation.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 32,
            dropout_rate: 0.2,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and nonnegative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad("init_scale must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// Linear softmax classifier `softmax(W x + b)` with input dropout for
/// stochastic passes. `weights` is K×d, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dropout_rate: f64,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub train_accuracy: f64,
}

impl ToyModel {
    pub fn init(num_classes: usize, feature_dim: usize, config: &ModelConfig) -> Result<Self> {
        config.check()?;
        if num_classes < 2 || feature_dim == 0 {
            return Err(Error::InvalidConfig(
                "model needs at least 2 classes and 1 feature".into(),
            ));
        }
        let mut rng = stream_rng(RngDomain::ModelInit, config.seed, 0);
        let weights = (0..num_classes * feature_dim)
            .map(|_| config.init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(ToyModel {
            num_classes,
            feature_dim,
            weights,
            bias: vec![0.0; num_classes],
            dropout_rate: config.dropout_rate,
            config: config.clone(),
        })
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.feature_dim..(class + 1) * self.feature_dim]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                self.row(k)
                    .iter()
                    .zip(x)
                    .fold(self.bias[k], |acc, (w, xi)| acc + w * xi)
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        softmax(&self.logits(x))
    }

    /// Cross-entropy `-ln softmax(Wx + b)_y`, via log-sum-exp.
    pub fn cross_entropy(&self, x: &[f64], y: usize) -> f64 {
        let z = self.logits(x);
        log_sum_exp(&z) - z[y]
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ToyModel = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if model.weights.len() != model.num_classes * model.feature_dim
            || model.bias.len() != model.num_classes
            || !model.is_finite()
        {
            return Err(Error::InvalidInput(format!(
                "{}: model parameters are inconsistent or non-finite",
                path.display()
            )));
        }
        Ok(model)
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_input(model: &ToyModel, x: &[f64]) -> Result<()> {
    if x.len() != model.feature_dim {
        return Err(Error::InvalidInput(format!(
            "expected {} features, got {}",
            model.feature_dim,
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature".into()));
    }
    Ok(())
}

/// Cross-entropy gradient: `dL/dW = (p - y) x^T`, `dL/db = p - y`.
pub fn loss_grad(model: &ToyModel, x: &[f64], y: usize) -> Result<Gradient> {
    check_input(model, x)?;
    if y >= model.num_classes {
        return Err(Error::InvalidInput(format!("class {y} out of range")));
    }
    let mut residual = model.probabilities(x)?;
    residual[y] -= 1.0;
    let weights = residual
        .iter()
        .flat_map(|r| x.iter().map(move |xi| r * xi))
        .collect();
    Ok(Gradient {
        weights,
        bias: residual,
    })
}

/// L1 norm of the last-layer gradient of the cross-entropy against the
/// uniform target. Factorises as `||p - 1/K||_1 * ||x||_1`.
pub fn gradnorm_score(model: &ToyModel, x: &[f64]) -> Result<f64> {
    check_input(model, x)?;
    let p = model.probabilities(x)?;
    let uniform = 1.0 / model.num_classes as f64;
    let residual: f64 = p.iter().map(|v| (v - uniform).abs()).sum();
    let x_l1: f64 = x.iter().map(|v| v.abs()).sum();
    Ok(residual * x_l1)
}

fn mean_loss(model: &ToyModel, data: &[(&[f64], usize)]) -> f64 {
    data.iter().map(|(x, y)| model.cross_entropy(x, *y)).sum::<f64>() / data.len() as f64
}

/// Mini-batch gradient descent on the default-view features.
pub fn train(features: &FeatureSet, config: &ModelConfig) -> Result<(ToyModel, TrainSummary)> {
    if features.samples.is_empty() {
        return Err(Error::Empty("training feature set"));
    }
    let mut model = ToyModel::init(features.num_classes, features.feature_dim, config)?;
    let default_view = &features.view_set.default_view;
    let data = features
        .samples
        .iter()
        .map(|s| {
            let x = s.views.get(default_view).ok_or_else(|| Error::MissingView {
                sample_id: s.sample_id.clone(),
                view: default_view.clone(),
            })?;
            check_input(&model, x)?;
            Ok((x.as_slice(), s.true_class))
        })
        .collect::<Result<Vec<_>>>()?;

    let (k, d) = (model.num_classes, model.feature_dim);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = stream_rng(RngDomain::Shuffle, config.seed, 0);
    let mut grad_w = vec![0.0; k * d];
    let mut grad_b = vec![0.0; k];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let (x, y) = data[i];
                let g = loss_grad(&model, x, y)?;
                grad_w.iter_mut().zip(&g.weights).for_each(|(a, b)| *a += b);
                grad_b.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b);
            }
            let step = config.learning_rate / batch.len() as f64;
            model.weights.iter_mut().zip(&grad_w).for_each(|(w, g)| *w -= step * g);
            model.bias.iter_mut().zip(&grad_b).for_each(|(b, g)| *b -= step * g);
            if !model.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: f64::NAN,
                    learning_rate: config.learning_rate,
                });
            }
        }
        let loss = mean_loss(&model, &data);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss,
                learning_rate: config.learning_rate,
            });
        }
    }

    let final_loss = mean_loss(&model, &data);
    let correct = data
        .iter()
        .filter(|(x, y)| argmax(&model.logits(x)) == *y)
        .count();
    Ok((
        model,
        TrainSummary {
            final_loss,
            train_accuracy: correct as f64 / data.len() as f64,
        },
    ))
}

/// Emits a manifest: deterministic logits for every view, `mc_samples`
/// inverted-dropout passes (when `mc_samples >= 2`), and the GradNorm score.
/// Sample `i` draws its dropout masks from stream `i` of the `mc_seed`
/// generator.
pub fn predict(model: &ToyModel, features: &FeatureSet, mc_samples: usize, mc_seed: u64) -> Result<Manifest> {
    if !(0.0..1.0).contains(&model.dropout_rate) {
        return Err(Error::InvalidConfig(format!(
            "dropout_rate must lie in [0, 1), got {}",
            model.dropout_rate
        )));
    }
    if mc_samples == 1 {
        return Err(Error::InvalidConfig(
            "mc_samples must be 0 (disabled) or at least 2".into(),
        ));
    }
    if features.num_classes != model.num_classes || features.feature_dim != model.feature_dim {
        return Err(Error::InvalidInput(format!(
            "model is {}x{} but features are {}x{}",
            model.num_classes, model.feature_dim, features.num_classes, features.feature_dim
        )));
    }
    let keep = 1.0 - model.dropout_rate;
    let records = features
        .samples
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut rng = stream_rng(RngDomain::Dropout, mc_seed, i as u64);
            let mut views = IndexMap::new();
            for view in features.view_set.iter() {
                let x = sample.views.get(view).ok_or_else(|| Error::MissingView {
                    sample_id: sample.sample_id.clone(),
                    view: view.clone(),
                })?;
                check_input(model, x)?;
                let mc_logits = (mc_samples >= 2).then(|| {
                    (0..mc_samples)
                        .map(|_| {
                            let masked: Vec<f64> = x
                                .iter()
                                .map(|v| if rng.random::<f64>() < keep { v / keep } else { 0.0 })
                                .collect();
                            model.logits(&masked)
                        })
                        .collect()
                });
                views.insert(
                    view.clone(),
                    ViewPrediction {
                        logits: model.logits(x),
                        mc_logits,
                        grad_l1: Some(gradnorm_score(model, x)?),
                    },
                );
            }
            Ok(PredictionRecord {
                sample_id: sample.sample_id.clone(),
                true_class: Some(sample.true_class),
                views,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest {
        name: features.name.clone(),
        num_classes: features.num_classes,
        view_set: features.view_set.clone(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prediction_store::validate;
    use crate::synthetic::generator::{generate, SynthConfig};
    use crate::uncertainty::{entropy, mcd};
    use approx::assert_abs_diff_eq;

    fn zero_model(k: usize, d: usize) -> ToyModel {
        let cfg = ModelConfig { init_scale: 0.0, ..ModelConfig::default() };
        ToyModel::init(k, d, &cfg).unwrap()
    }

    fn random_model(seed: u64, k: usize, d: usize) -> ToyModel {
        let cfg = ModelConfig { init_scale: 0.7, seed, ..ModelConfig::default() };
        let mut m = ToyModel::init(k, d, &cfg).unwrap();
        m.bias = (0..k).map(|i| 0.1 * i as f64 - 0.2).collect();
        m
    }

    #[test]
    fn gradient_vanishes_at_one_hot() {
        let mut m = zero_model(3, 2);
        m.bias = vec![0.0, 800.0, 0.0];
        let g = loss_grad(&m, &[0.0, 0.0], 1).unwrap();
        assert!(g.weights.iter().chain(&g.bias).all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_by_hand() {
        let m = zero_model(2, 1);
        let g = loss_grad(&m, &[1.0], 0).unwrap();
        assert_eq!(g.weights, vec![-0.5, 0.5]);
        assert_eq!(g.bias, vec![-0.5, 0.5]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..20 {
            let mut m = random_model(seed, 4, 3);
            let x = [0.3 * seed as f64 - 2.0, 1.1, -0.4];
            let y = (seed % 4) as usize;
            let g = loss_grad(&m, &x, y).unwrap();
            for i in 0..m.weights.len() {
                let orig = m.weights[i];
                m.weights[i] = orig + h;
                let up = m.cross_entropy(&x, y);
                m.weights[i] = orig - h;
                let down = m.cross_entropy(&x, y);
                m.weights[i] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - g.weights[i]).abs() <= 1e-6 * g.weights[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn gradnorm_examples() {
        let m = zero_model(3, 4);
        assert_eq!(gradnorm_score(&m, &[1.0, -2.0, 3.0, 0.5]).unwrap(), 0.0);
        let m = random_model(1, 3, 4);
        assert_eq!(gradnorm_score(&m, &[0.0; 4]).unwrap(), 0.0);
        // explicit entrywise L1 of (p - 1/K) x^T
        let x = [0.4, -1.3, 2.2, 0.1];
        let p = m.probabilities(&x).unwrap();
        let explicit: f64 = p
            .iter()
            .flat_map(|pk| x.iter().map(move |xj| ((pk - 1.0 / 3.0) * xj).abs()))
            .sum();
        assert_abs_diff_eq!(gradnorm_score(&m, &x).unwrap(), explicit, epsilon = 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let cfg = SynthConfig { samples_per_class: 10, ..SynthConfig::default() };
        let (train_set, _) = generate(&cfg).unwrap();
        let mc = ModelConfig { learning_rate: 0.0, epochs: 3, ..ModelConfig::default() };
        let (m, _) = train(&train_set, &mc).unwrap();
        assert_eq!(m, ToyModel::init(cfg.num_classes, cfg.feature_dim, &mc).unwrap());
    }

    #[test]
    fn separable_data_is_learned() {
        let cfg = SynthConfig {
            noise_default: 0.0,
            noise_optimal: 0.0,
            noise_other: 0.0,
            samples_per_class: 20,
            ..SynthConfig::default()
        };
        let (train_set, _) = generate(&cfg).unwrap();
        let (_, summary) = train(&train_set, &ModelConfig::default()).unwrap();
        assert!(summary.train_accuracy >= 0.99, "{summary:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = SynthConfig { samples_per_class: 30, ..SynthConfig::default() };
        let (train_set, _) = generate(&cfg).unwrap();
        let mc = ModelConfig { epochs: 5, seed: 9, ..ModelConfig::default() };
        assert_eq!(train(&train_set, &mc).unwrap(), train(&train_set, &mc).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = SynthConfig { samples_per_class: 20, prototype_scale: 1e10, ..SynthConfig::default() };
        let (train_set, _) = generate(&cfg).unwrap();
        let mc = ModelConfig { learning_rate: 1e308, epochs: 3, ..ModelConfig::default() };
        let err = train(&train_set, &mc).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert!(err.to_string().contains("smaller learning rate"));
    }

    #[test]
    fn predict_contracts() {
        let cfg = SynthConfig { samples_per_class: 5, ..SynthConfig::default() };
        let (_, test_set) = generate(&cfg).unwrap();
        let mut m = random_model(3, cfg.num_classes, cfg.feature_dim);

        let manifest = predict(&m, &test_set, 4, 11).unwrap();
        assert!(validate(&manifest).is_empty());
        assert_eq!(manifest.records.len(), test_set.samples.len());
        assert_eq!(manifest, predict(&m, &test_set, 4, 11).unwrap());

        m.dropout_rate = 0.0;
        let manifest = predict(&m, &test_set, 3, 11).unwrap();
        for r in &manifest.records {
            for v in r.views.values() {
                let mc = v.mc_logits.as_ref().unwrap();
                assert!(mc.iter().all(|z| *z == v.logits));
                let e = entropy(&softmax(&v.logits).unwrap()).unwrap().value;
                assert_abs_diff_eq!(mcd(mc, 2).unwrap().value, e, epsilon = 1e-12);
            }
        }

        let mut zeros = test_set.clone();
        for s in &mut zeros.samples {
            s.views.values_mut().for_each(|x| x.iter_mut().for_each(|v| *v = 0.0));
        }
        for r in predict(&m, &zeros, 0, 0).unwrap().records {
            assert!(r.views.values().all(|v| v.logits == m.bias && v.mc_logits.is_none()));
        }

        assert!(predict(&m, &test_set, 1, 0).is_err());
        m.dropout_rate = 1.0;
        assert!(predict(&m, &test_set, 4, 0).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let m = random_model(5, 3, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        m.save(&p).unwrap();
        assert_eq!(ToyModel::load(&p).unwrap(), m);
    }
}
