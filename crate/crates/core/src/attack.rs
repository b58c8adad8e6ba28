//! Weight-space PGD and robust-accuracy sweeps.
//!
//! One perturbation is shared by every sample: each step moves all weights
//! by `α · sgn(∇_W CE)` and clips back into the ℓ∞ ball around the original
//! weights.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{total_loss_and_gradient, LossConfig};
use crate::network::{accuracy, Network};

pub const DEFAULT_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub eps_test: f64,
    pub steps: usize,
    /// `α`; defaults to `2.5 ε / steps`.
    pub step_size: Option<f64>,
    /// Samples per gradient step; the whole set when unset.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            eps_test: 0.0,
            steps: DEFAULT_STEPS,
            step_size: None,
            batch_size: None,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn new(eps_test: f64, steps: usize) -> Self {
        AttackConfig {
            eps_test,
            steps,
            ..AttackConfig::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.eps_test / self.steps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_test.is_finite() && self.eps_test >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eps_test must be >= 0, got {}",
                self.eps_test
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if let Some(a) = self.step_size {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "step_size must be > 0, got {a}"
                )));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Attacked copy of `net` with every entry within `eps_test` of the original.
pub fn weight_pgd(net: &Network, data: &Dataset, config: &AttackConfig) -> Result<Network> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let eps = config.eps_test;
    if eps == 0.0 {
        return Ok(net.clone());
    }
    let alpha = config.alpha();
    let loss = LossConfig::cross_entropy();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = net.clone();

    for step in 0..config.steps {
        let grads = match config.batch_size {
            Some(b) if b < data.len() => {
                let mut idx = sample(&mut rng, data.len(), b).into_vec();
                idx.sort_unstable();
                total_loss_and_gradient(&current, &data.select(&idx), &loss)
            }
            _ => total_loss_and_gradient(&current, data, &loss),
        };
        let grads = match grads {
            Ok((_, g)) if g.iter().all(|m| m.all_finite()) => g,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteGradient { step }),
            Err(e) => return Err(e),
        };
        for ((w, w0), g) in current
            .weights_mut()
            .iter_mut()
            .zip(net.weights())
            .zip(&grads)
        {
            for ((v, &v0), &gv) in w
                .as_mut_slice()
                .iter_mut()
                .zip(w0.as_slice())
                .zip(g.as_slice())
            {
                let s = if gv >= 0.0 { 1.0 } else { -1.0 };
                *v = (*v + alpha * s).clamp(v0 - eps, v0 + eps);
            }
        }
        debug_assert!(within_ball(net, &current, eps));
    }
    Ok(current)
}

/// True when every weight of `b` is within `eps` of `a`, up to the rounding
/// of `a ± eps`.
pub fn within_ball(a: &Network, b: &Network, eps: f64) -> bool {
    a.weights().len() == b.weights().len()
        && a.weights().iter().zip(b.weights()).all(|(x, y)| {
            x.shape() == y.shape()
                && x.as_slice()
                    .iter()
                    .zip(y.as_slice())
                    .all(|(&u, &v)| (u - v).abs() <= eps + 2.0 * f64::EPSILON * (u.abs() + eps))
        })
}

/// Accuracy under attack at each `ε` of an ascending grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustCurve {
    pub points: Vec<(f64, f64)>,
}

impl RobustCurve {
    pub fn auc(&self) -> f64 {
        auc(&self.points)
    }

    /// AUC of the first `k` points.
    pub fn auc_to(&self, k: usize) -> f64 {
        auc(&self.points[..k])
    }
}

/// Runs [`weight_pgd`] at every `ε` in `eps_grid` with default step size.
pub fn robust_accuracy_sweep(
    net: &Network,
    data: &Dataset,
    eps_grid: &[f64],
    steps: usize,
) -> Result<RobustCurve> {
    robust_accuracy_sweep_with(net, data, eps_grid, &AttackConfig::new(0.0, steps))
}

/// Sweep reusing every field of `base` except `eps_test`.
pub fn robust_accuracy_sweep_with(
    net: &Network,
    data: &Dataset,
    eps_grid: &[f64],
    base: &AttackConfig,
) -> Result<RobustCurve> {
    if eps_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig(
            "eps grid must be sorted ascending".into(),
        ));
    }
    let mut points = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let cfg = AttackConfig {
            eps_test: eps,
            ..base.clone()
        };
        let attacked = weight_pgd(net, data, &cfg)?;
        points.push((eps, accuracy(&attacked, data)?));
    }
    Ok(RobustCurve { points })
}

/// Trapezoid area under `(ε, accuracy)` divided by the grid span.
///
/// A single point returns its accuracy; an empty curve returns 0.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    match points {
        [] => 0.0,
        [(_, a)] => *a,
        _ => {
            let span = points.last().unwrap().0 - points[0].0;
            if span == 0.0 {
                return points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
            }
            let area: f64 = points
                .windows(2)
                .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
                .sum();
            area / span
        }
    }
}
