//! Retrained-from-scratch reference models. The gold standard a sampled
//! "unlearned" classifier is judged against is a model that simply never
//! saw the forgotten classes: same architecture, same head width, trained
//! on the training set with those classes' examples removed.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::zoo::net::{ce_loss_and_grad, init_params, sgd_step, MainNetSpec};

/// Hyperparameters for the reference run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 64,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// Train a fresh classifier on `train` with every example of a class in
/// `forget_classes` removed. The output head keeps all classes, so the
/// model can still be asked about the removed ones; it just never trains
/// on them.
pub fn retrain_baseline(
    spec: &MainNetSpec,
    train: &Dataset,
    forget_classes: &[usize],
    cfg: &RetrainConfig,
) -> Result<Vec<f64>> {
    if train.num_classes != spec.num_classes {
        return Err(Error::structural(format!(
            "training set has {} classes, spec has {}",
            train.num_classes, spec.num_classes
        )));
    }
    if let Some(&bad) = forget_classes.iter().find(|&&c| c >= spec.num_classes) {
        return Err(Error::config(format!(
            "forget class {bad} out of range for {} classes",
            spec.num_classes
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs and batch size must be positive"));
    }
    let retain = train.filter_by(
        |label| !forget_classes.contains(&(label as usize)),
        spec.num_classes,
    );
    if retain.is_empty() {
        return Err(Error::config(
            "removing the forget classes leaves no training data",
        ));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(spec, &mut rng);
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..retain.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array2::zeros((chunk.len(), retain.input_dim()));
            let mut y = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                x.row_mut(row).assign(&retain.features.row(i));
                y.push(retain.labels[i]);
            }
            grad.fill(0.0);
            ce_loss_and_grad(&params, spec, x.view(), &y, &mut grad)?;
            sgd_step(&mut params, &grad, cfg.learning_rate);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blobs;
    use crate::zoo::net::eval_class_losses;
    use rand_chacha::ChaCha8Rng;

    fn blob_sets() -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let train = gaussian_blobs(&mut rng, 120, 8, 4, 0.25);
        let test = gaussian_blobs(&mut rng, 60, 8, 4, 0.25);
        (train, test)
    }

    #[test]
    fn retrained_model_knows_retained_but_not_forgotten_classes() {
        let (train, test) = blob_sets();
        let spec = MainNetSpec::new(8, vec![6], 4).unwrap();
        let cfg = RetrainConfig {
            epochs: 15,
            seed: 7,
            ..RetrainConfig::default()
        };
        let params = retrain_baseline(&spec, &train, &[2], &cfg).unwrap();
        let (_, accs) = eval_class_losses(&params, &spec, &test).unwrap();
        for c in [0usize, 1, 3] {
            assert!(accs[c] > 0.9, "retained class {c} accuracy {}", accs[c]);
        }
        // The head still produces a class-2 logit, but nothing trained it,
        // so class-2 examples land elsewhere.
        assert!(accs[2] < 0.1, "forgotten class accuracy {}", accs[2]);
    }

    #[test]
    fn forgetting_all_but_one_class_still_trains() {
        let (train, test) = blob_sets();
        let spec = MainNetSpec::new(8, vec![6], 4).unwrap();
        let params = retrain_baseline(&spec, &train, &[0, 1, 2], &RetrainConfig::default()).unwrap();
        let (_, accs) = eval_class_losses(&params, &spec, &test).unwrap();
        assert!(accs[3] > 0.95, "sole retained class accuracy {}", accs[3]);
    }

    #[test]
    fn empty_retain_set_is_an_error() {
        let (train, _) = blob_sets();
        let spec = MainNetSpec::new(8, vec![6], 4).unwrap();
        assert!(retrain_baseline(&spec, &train, &[0, 1, 2, 3], &RetrainConfig::default()).is_err());
        assert!(retrain_baseline(&spec, &train, &[9], &RetrainConfig::default()).is_err());
    }

    #[test]
    fn same_seed_reproduces_parameters_exactly() {
        let (train, _) = blob_sets();
        let spec = MainNetSpec::new(8, vec![6], 4).unwrap();
        let cfg = RetrainConfig {
            epochs: 3,
            seed: 42,
            ..RetrainConfig::default()
        };
        let a = retrain_baseline(&spec, &train, &[1], &cfg).unwrap();
        let b = retrain_baseline(&spec, &train, &[1], &cfg).unwrap();
        assert_eq!(a, b);
        let other = RetrainConfig { seed: 43, ..cfg };
        let c = retrain_baseline(&spec, &train, &[1], &other).unwrap();
        assert_ne!(a, c);
    }
}
