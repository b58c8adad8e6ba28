//! Mini-batch SGD with momentum over the robust objective.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{subsample, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm_default, Matrix};
use crate::losses::{total_loss, total_loss_and_gradient, LossConfig};
use crate::network::{accuracy, Network, NetworkSpec};

const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Train on a class-stratified subset of this size.
    pub train_subset_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            train_subset_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        // a zero rate is allowed: it freezes the weights
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Norms of one weight matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorms {
    /// `‖W‖_{1,∞}`, the largest column ℓ1 norm.
    pub col_l1: f64,
    /// `‖Wᵀ‖_{1,∞}`, the largest row ℓ1 norm.
    pub row_l1: f64,
    pub spectral: f64,
}

impl LayerNorms {
    pub fn of(w: &Matrix) -> Self {
        LayerNorms {
            col_l1: w.max_col_l1().1,
            row_l1: w.max_row_l1().1,
            spectral: spectral_norm_default(w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Objective over the whole training set after the epoch.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub layer_norms: Vec<LayerNorms>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

pub fn train(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, RunRecord)> {
    train_with(spec, data, None, config, |_, _| Ok(()))
}

/// Trains from a seeded initialization.
///
/// `on_epoch` runs after every epoch with the current weights, e.g. to write
/// checkpoints; an error from it stops training.
pub fn train_with(
    spec: &NetworkSpec,
    data: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Network, &EpochRecord) -> Result<()>,
) -> Result<(Network, RunRecord)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.input_dim() != spec.input_dim() {
        return Err(Error::dimension(
            "train",
            spec.input_dim(),
            data.input_dim(),
        ));
    }
    if data.num_classes() > spec.num_classes() {
        return Err(Error::InvalidNetwork(format!(
            "dataset has {} classes but the network outputs {}",
            data.num_classes(),
            spec.num_classes()
        )));
    }
    let subset;
    let data = match config.train_subset_size {
        Some(n) => {
            subset = subsample(data, n, config.seed)?;
            &subset
        }
        None => data,
    };
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut net = Network::init(spec, config.seed);
    config.loss.perturbation.validate(&net)?;
    let mut velocity: Vec<Matrix> = net
        .weights()
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut record = RunRecord::default();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = data.select(chunk);
            let (loss, grads) = match total_loss_and_gradient(&net, &batch, &config.loss) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }
            for ((w, v), g) in net.weights_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for ((wv, vv), &gv) in w
                    .as_mut_slice()
                    .iter_mut()
                    .zip(v.as_mut_slice())
                    .zip(g.as_slice())
                {
                    *vv = config.momentum * *vv - config.learning_rate * gv;
                    *wv += *vv;
                }
            }
            if net.weights().iter().any(|w| !w.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }
        }

        let train_loss = total_loss(&net, data, &config.loss).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                epoch,
                batch: usize::MAX,
                loss: f64::NAN,
            },
            other => other,
        })?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            train_accuracy: accuracy(&net, data)?,
            test_accuracy: test.map(|t| accuracy(&net, t)).transpose()?,
            layer_norms: net.weights().iter().map(LayerNorms::of).collect(),
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&net, &rec)?;
        record.epochs.push(rec);
    }
    Ok((net, record))
}

/// Clean accuracy.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    accuracy(net, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::losses::{generalization_regularizer, Regularizer};
    use crate::network::Activation;

    fn separable() -> Dataset {
        synthetic_blobs(2, 2, 40, 0.05, 3).unwrap()
    }

    #[test]
    fn fits_separable_blobs() {
        let spec = NetworkSpec::relu(vec![2, 16, 2]).unwrap();
        let (net, rec) = train(&spec, &separable(), &TrainConfig::default()).unwrap();
        assert_eq!(rec.len(), 20);
        assert_eq!(net.accuracy(&separable()).unwrap(), 1.0);
    }

    #[test]
    fn fits_multiclass_blobs() {
        let data = synthetic_blobs(4, 5, 30, 0.05, 8).unwrap();
        let spec = NetworkSpec::relu(vec![5, 24, 12, 4]).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let (net, _) = train(&spec, &data, &cfg).unwrap();
        assert_eq!(evaluate(&net, &data).unwrap(), 1.0);
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let spec = NetworkSpec::relu(vec![2, 8, 2]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 4,
            ..TrainConfig::default()
        };
        let (net, rec) = train(&spec, &separable(), &cfg).unwrap();
        assert_eq!(net, Network::init(&spec, cfg.seed));
        for e in &rec.epochs[1..] {
            assert_eq!(e.train_loss, rec.epochs[0].train_loss);
            assert_eq!(e.train_accuracy, rec.epochs[0].train_accuracy);
            assert_eq!(e.layer_norms, rec.epochs[0].layer_norms);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = NetworkSpec::relu(vec![2, 8, 2]).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            loss: LossConfig::robust(0.1, 0.01, 0.01, 2).unwrap(),
            ..TrainConfig::default()
        };
        let (a, ra) = train(&spec, &separable(), &cfg).unwrap();
        let (b, rb) = train(&spec, &separable(), &cfg).unwrap();
        assert_eq!(a, b);
        let losses = |r: &RunRecord| r.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>();
        assert_eq!(losses(&ra), losses(&rb));
        let other = TrainConfig { seed: 1, ..cfg };
        assert_ne!(train(&spec, &separable(), &other).unwrap().0, a);
    }

    #[test]
    fn divergence_is_reported() {
        let spec = NetworkSpec::relu(vec![2, 8, 2]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let err = train(&spec, &separable(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
        assert!(err.is_numeric());
    }

    #[test]
    fn config_validation() {
        let spec = NetworkSpec::relu(vec![2, 8, 2]).unwrap();
        for bad in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -0.1,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(
                train(&spec, &separable(), &bad),
                Err(Error::InvalidConfig(_))
            ));
        }
        let wrong = NetworkSpec::relu(vec![3, 8, 2]).unwrap();
        assert!(train(&wrong, &separable(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn subset_training_uses_requested_size() {
        let spec = NetworkSpec::relu(vec![2, 8, 2]).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            train_subset_size: Some(10),
            ..TrainConfig::default()
        };
        assert!(train(&spec, &separable(), &cfg).is_ok());
        let too_many = TrainConfig {
            train_subset_size: Some(1000),
            ..cfg
        };
        assert!(matches!(
            train(&spec, &separable(), &too_many),
            Err(Error::NotEnoughSamples { .. })
        ));
    }

    #[test]
    fn norm_penalty_shrinks_norms_in_most_seeds() {
        let data = synthetic_blobs(3, 6, 30, 0.15, 2).unwrap();
        let spec = NetworkSpec::relu(vec![6, 16, 8, 3]).unwrap();
        let mut wins = 0;
        for seed in 0..3 {
            let run = |mu: f64| {
                let cfg = TrainConfig {
                    seed,
                    epochs: 10,
                    loss: LossConfig::robust(0.05, mu, 0.01, 3).unwrap(),
                    ..TrainConfig::default()
                };
                let (net, _) = train(&spec, &data, &cfg).unwrap();
                generalization_regularizer(&net, Regularizer::SumNorms).unwrap()
            };
            if run(0.05) <= run(0.0) {
                wins += 1;
            }
        }
        assert!(wins >= 2, "penalty reduced norms in {wins}/3 seeds");
    }

    #[test]
    fn evaluate_edge_cases() {
        let data = separable();
        let constant = Network::new(
            Activation::Relu,
            vec![Matrix::zeros(2, 2), Matrix::zeros(2, 2)],
        )
        .unwrap();
        // all-zero logits predict class 0 everywhere
        assert_eq!(evaluate(&constant, &data).unwrap(), 0.5);
        assert!(matches!(
            evaluate(&constant, &data.head(0)),
            Err(Error::EmptyDataset)
        ));
    }
}
