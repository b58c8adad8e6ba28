//! Classification losses, their robust surrogates and the training objective.
//!
//! The objective for a batch `B` is
//!
//! ```text
//! (1/|B|) Σ_{(x,y)∈B} [ ℓ_cls(f(x), y) + λ max_{y'≠y} η^{y'y}(x) ] + μ R(W)
//! ```
//!
//! with `R` one of the norm regularizers below. [`total_loss_and_gradient`]
//! evaluates it for a whole batch with matrix products and returns an
//! analytic subgradient.

use serde::{Deserialize, Serialize};

use crate::bounds::{eta_factors, last_layer_distance, psi, PerturbationSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{margin, runner_up, Network};

/// Loss applied to the natural logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationLoss {
    #[default]
    CrossEntropy,
    /// `φ_γ(M)` on the natural margin.
    Ramp,
}

/// Weight-norm penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `Σ_m (‖(W^m)ᵀ‖_{1,∞} + ‖W^m‖_{1,∞})`.
    #[default]
    SumNorms,
    /// `Σ_m (log ‖(W^m)ᵀ‖_{1,∞} + log ‖W^m‖_{1,∞})`.
    LogNorms,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub mu: f64,
    pub gamma: f64,
    pub perturbation: PerturbationSpec,
    pub classification_loss: ClassificationLoss,
    pub regularizer: Regularizer,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.0,
            mu: 0.0,
            gamma: 1.0,
            perturbation: PerturbationSpec::empty(),
            classification_loss: ClassificationLoss::CrossEntropy,
            regularizer: Regularizer::SumNorms,
        }
    }
}

impl LossConfig {
    /// Plain mean cross-entropy.
    pub fn cross_entropy() -> Self {
        LossConfig::default()
    }

    /// Objective with every layer perturbed by `eps_train`.
    pub fn robust(lambda: f64, mu: f64, eps_train: f64, num_layers: usize) -> Result<Self> {
        Ok(LossConfig {
            lambda,
            mu,
            perturbation: PerturbationSpec::all_layers(num_layers, eps_train)?,
            ..LossConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Ramp: 1 for `t <= 0`, 0 for `t >= γ`, linear in between.
pub fn ramp_phi(t: f64, gamma: f64) -> f64 {
    if t <= 0.0 {
        1.0
    } else if t >= gamma {
        0.0
    } else {
        1.0 - t / gamma
    }
}

/// Softmax cross-entropy `log Σ_k e^{f_k} − f_y`.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::InvalidLabel {
            label: y,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[y])
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `φ_γ(M − Ψ)` with a single perturbed layer `N < L`.
pub fn robust_ramp_loss(
    net: &Network,
    x: &[f64],
    y: usize,
    n: usize,
    eps: f64,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    let m = margin(&net.logits(x)?, y)?;
    Ok(ramp_phi(m - psi(net, x, n, eps)?, gamma))
}

/// `φ_γ(M − max_{y'≠y} η^{y'y})`.
pub fn robust_ramp_loss_multi(
    net: &Network,
    x: &[f64],
    y: usize,
    spec: &PerturbationSpec,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    let m = margin(&net.logits(x)?, y)?;
    Ok(ramp_phi(m - max_competitor_eta(net, x, y, spec)?, gamma))
}

/// `CE(f(x), y) + max_{y'≠y} η^{y'y}`.
pub fn robust_cross_entropy(
    net: &Network,
    x: &[f64],
    y: usize,
    spec: &PerturbationSpec,
) -> Result<f64> {
    let ce = cross_entropy(&net.logits(x)?, y)?;
    Ok(ce + max_competitor_eta(net, x, y, spec)?)
}

/// `max_{y'≠y} η^{y'y}(x)`.
pub fn max_competitor_eta(
    net: &Network,
    x: &[f64],
    y: usize,
    spec: &PerturbationSpec,
) -> Result<f64> {
    let k = net.num_classes();
    if y >= k {
        return Err(Error::InvalidLabel {
            label: y,
            classes: k,
        });
    }
    let f = eta_factors(net, x, spec)?;
    Ok((0..k)
        .filter(|&c| c != y)
        .map(|c| f.eta(net, c, y))
        .fold(0.0, f64::max))
}

pub fn generalization_regularizer(net: &Network, variant: Regularizer) -> Result<f64> {
    let mut total = 0.0;
    for (idx, w) in net.weights().iter().enumerate() {
        let row = w.max_row_l1().1;
        let col = w.max_col_l1().1;
        total += match variant {
            Regularizer::SumNorms => row + col,
            Regularizer::LogNorms => {
                check_positive(row, idx + 1, "row")?;
                check_positive(col, idx + 1, "column")?;
                row.ln() + col.ln()
            }
            Regularizer::None => 0.0,
        };
    }
    Ok(total)
}

fn check_positive(v: f64, layer: usize, which: &'static str) -> Result<()> {
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::ZeroNorm { layer, which })
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "gamma must be > 0, got {gamma}"
        )))
    }
}

pub fn total_loss(net: &Network, batch: &Dataset, config: &LossConfig) -> Result<f64> {
    Objective::new(net, batch, config)?
        .run(false)
        .map(|(v, _)| v)
}

/// `∂ℓ*/∂W^k` for every layer.
pub fn total_loss_gradient(
    net: &Network,
    batch: &Dataset,
    config: &LossConfig,
) -> Result<Vec<Matrix>> {
    total_loss_and_gradient(net, batch, config).map(|(_, g)| g)
}

/// Objective value and subgradient in one pass.
///
/// Subgradient choices: the maximizing competitor `y'` takes the whole
/// `max η` gradient; `‖·‖_{1,∞}` terms send the sign pattern of the arg-max
/// row or column; ties go to the lowest index. The starred offsets are
/// constants and the first-layer sign rule carries no gradient.
pub fn total_loss_and_gradient(
    net: &Network,
    batch: &Dataset,
    config: &LossConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let (v, g) = Objective::new(net, batch, config)?.run(true)?;
    Ok((v, g.expect("gradient requested")))
}

struct Objective<'a> {
    net: &'a Network,
    batch: &'a Dataset,
    config: &'a LossConfig,
    l: usize,
}

impl<'a> Objective<'a> {
    fn new(net: &'a Network, batch: &'a Dataset, config: &'a LossConfig) -> Result<Self> {
        config.validate()?;
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch.input_dim() != net.input_dim() {
            return Err(Error::dimension(
                "total_loss",
                net.input_dim(),
                batch.input_dim(),
            ));
        }
        if batch.num_classes() > net.num_classes() {
            return Err(Error::InvalidLabel {
                label: batch.num_classes() - 1,
                classes: net.num_classes(),
            });
        }
        config.perturbation.validate(net)?;
        Ok(Objective {
            net,
            batch,
            config,
            l: net.num_layers(),
        })
    }

    fn run(&self, want_grad: bool) -> Result<(f64, Option<Vec<Matrix>>)> {
        let net = self.net;
        let l = self.l;
        let bsz = self.batch.len();
        let inv_b = 1.0 / bsz as f64;
        let mut grads: Option<Vec<Matrix>> = want_grad.then(|| {
            net.weights()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect()
        });

        // natural forward: zs[k] = z^k for k = 0..L-1
        let zs = forward_chain(net, self.batch.inputs(), |_| 0.0, None)?;
        let logits = zs[l - 1].matmul_transpose_b(net.layer(l))?;

        let (cls, g_logits) = self.classification(&logits, want_grad);
        let mut value = cls * inv_b;
        if let (Some(grads), Some(mut g)) = (grads.as_mut(), g_logits) {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= inv_b);
            backprop(net, &zs, g, grads)?;
        }

        let spec = &self.config.perturbation;
        if self.config.lambda > 0.0 && spec.iter().any(|(_, e)| e > 0.0) {
            value += self.robustness(grads.as_mut(), inv_b)?;
        }

        if self.config.mu > 0.0 && self.config.regularizer != Regularizer::None {
            value += self.config.mu * generalization_regularizer(net, self.config.regularizer)?;
            if let Some(grads) = grads.as_mut() {
                self.regularizer_gradient(grads);
            }
        }

        if !value.is_finite() {
            return Err(Error::NonFinite { what: "loss" });
        }
        Ok((value, grads))
    }

    /// Summed classification loss and its gradient w.r.t. the logits.
    fn classification(&self, logits: &Matrix, want_grad: bool) -> (f64, Option<Matrix>) {
        let labels = self.batch.labels();
        let mut total = 0.0;
        let mut g = want_grad.then(|| Matrix::zeros(logits.rows(), logits.cols()));
        for (b, &y) in labels.iter().enumerate() {
            let f = logits.row(b);
            match self.config.classification_loss {
                ClassificationLoss::CrossEntropy => {
                    let lse = log_sum_exp(f);
                    total += lse - f[y];
                    if let Some(g) = g.as_mut() {
                        let row = g.row_mut(b);
                        for (gv, &fv) in row.iter_mut().zip(f) {
                            *gv = (fv - lse).exp();
                        }
                        row[y] -= 1.0;
                    }
                }
                ClassificationLoss::Ramp => {
                    let gamma = self.config.gamma;
                    let c = runner_up(f, y);
                    let m = f[y] - f[c];
                    total += ramp_phi(m, gamma);
                    if let Some(g) = g.as_mut() {
                        if m > 0.0 && m < gamma {
                            let row = g.row_mut(b);
                            row[y] -= 1.0 / gamma;
                            row[c] += 1.0 / gamma;
                        }
                    }
                }
            }
        }
        (total, g)
    }

    /// Adds `λ · mean_b max_{y'} η^{y'y}` and its gradient; returns the value.
    fn robustness(&self, grads: Option<&mut Vec<Matrix>>, inv_b: f64) -> Result<f64> {
        let net = self.net;
        let l = self.l;
        let spec = &self.config.perturbation;
        let lambda = self.config.lambda;
        let labels = self.batch.labels();
        let bsz = labels.len();
        let k_classes = net.num_classes();

        // starred forward: zs[q] = z^{q*}, norms[q][b] = ‖z^{q*}_b‖₁
        let mut norms: Vec<Vec<f64>> = Vec::with_capacity(l);
        let zs = forward_chain(
            net,
            self.batch.inputs(),
            |k| spec.radius(k),
            Some(&mut norms),
        )?;

        let rows: Vec<(usize, f64)> = (1..l).map(|m| net.layer(m).max_row_l1()).collect();
        let r = |m: usize| rows[m - 1].1;
        // p[k] = Π_{m=k+1}^{L-1} r_m for k = 0..L-1
        let p: Vec<f64> = (0..l).map(|k| ((k + 1)..l).map(r).product()).collect();

        let mut dist = Matrix::zeros(k_classes, k_classes);
        for i in 0..k_classes {
            for j in 0..k_classes {
                dist[(i, j)] = last_layer_distance(net, i, j);
            }
        }

        let eps_last = spec.radius(l);
        let mut value = 0.0;
        let mut per_sample = Vec::with_capacity(bsz);
        for (b, &y) in labels.iter().enumerate() {
            let s: f64 = spec
                .iter()
                .filter(|&(k, _)| k < l)
                .map(|(k, e)| e * norms[k - 1][b] * p[k])
                .sum();
            let f_last = 2.0 * eps_last * norms[l - 1][b];
            let mut best: Option<(usize, f64)> = None;
            for c in (0..k_classes).filter(|&c| c != y) {
                let v = dist[(c, y)] * s + f_last;
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((c, v));
                }
            }
            let (c, eta) = best.expect("at least two classes");
            value += eta;
            per_sample.push((c, s));
        }
        let value = lambda * value * inv_b;

        let Some(grads) = grads else {
            return Ok(value);
        };
        let coef = lambda * inv_b;

        // ‖W^L_c − W^L_y‖₁ through the output layer
        let w_last = net.layer(l);
        for (b, &y) in labels.iter().enumerate() {
            let (c, s) = per_sample[b];
            let scale = coef * s;
            if scale == 0.0 {
                continue;
            }
            let g = &mut grads[l - 1];
            for col in 0..w_last.cols() {
                let d = sgn(w_last[(c, col)] - w_last[(y, col)]) * scale;
                g[(c, col)] += d;
                g[(y, col)] -= d;
            }
        }

        // row-norm products P_k
        if l > 2 {
            let mut coef_r = vec![0.0; l];
            for (b, &y) in labels.iter().enumerate() {
                let (c, _) = per_sample[b];
                let d = dist[(c, y)];
                if d == 0.0 {
                    continue;
                }
                for m in 2..l {
                    let mut ds = 0.0;
                    for (k, e) in spec.iter().filter(|&(k, _)| k < m) {
                        let others: f64 = ((k + 1)..l).filter(|&q| q != m).map(r).product();
                        ds += e * norms[k - 1][b] * others;
                    }
                    coef_r[m] += coef * d * ds;
                }
            }
            for m in 2..l {
                if coef_r[m] != 0.0 {
                    let (row, _) = rows[m - 1];
                    let w = net.layer(m);
                    let g = &mut grads[m - 1];
                    for col in 0..w.cols() {
                        g[(row, col)] += coef_r[m] * sgn(w[(row, col)]);
                    }
                }
            }
        }

        // ‖z^{q*}‖₁ terms, backpropagated through the starred chain
        let upstream = |q: usize, b: usize| -> f64 {
            let (c, _) = per_sample[b];
            let y = labels[b];
            let mut v = 0.0;
            if q + 1 < l && spec.contains(q + 1) {
                v += dist[(c, y)] * spec.radius(q + 1) * p[q + 1];
            }
            if q == l - 1 {
                v += 2.0 * eps_last;
            }
            coef * v
        };
        if l >= 2 {
            let mut g = Matrix::zeros(bsz, zs[l - 1].cols());
            for q in (1..l).rev() {
                for b in 0..bsz {
                    let u = upstream(q, b);
                    if u != 0.0 {
                        g.row_mut(b).iter_mut().for_each(|v| *v += u);
                    }
                }
                mask_inactive(&mut g, &zs[q]);
                grads[q - 1].axpy(1.0, &g.matmul_transpose_a(&zs[q - 1])?)?;
                if q > 1 {
                    let mut prev = g.matmul(net.layer(q))?;
                    let eps_q = spec.radius(q);
                    if eps_q != 0.0 {
                        for b in 0..bsz {
                            let shift = eps_q * g.row(b).iter().sum::<f64>();
                            prev.row_mut(b).iter_mut().for_each(|v| *v += shift);
                        }
                    }
                    g = prev;
                }
            }
        }
        Ok(value)
    }

    fn regularizer_gradient(&self, grads: &mut [Matrix]) {
        let mu = self.config.mu;
        let log = self.config.regularizer == Regularizer::LogNorms;
        for (w, g) in self.net.weights().iter().zip(grads.iter_mut()) {
            let (row, rn) = w.max_row_l1();
            let (col, cn) = w.max_col_l1();
            let rs = if log { mu / rn } else { mu };
            let cs = if log { mu / cn } else { mu };
            for c in 0..w.cols() {
                g[(row, c)] += rs * sgn(w[(row, c)]);
            }
            for r in 0..w.rows() {
                g[(r, col)] += cs * sgn(w[(r, col)]);
            }
        }
    }
}

/// `z^0 = X, z^k = ρ(z^{k−1} (W^k)ᵀ + shift(k) ‖z^{k−1}‖₁)` for `k < L`.
///
/// With `shift = 0` this is the natural forward pass; with `shift(k) = ε_k`
/// it is the starred one. Row `l1` norms are recorded when requested.
fn forward_chain(
    net: &Network,
    inputs: &Matrix,
    shift: impl Fn(usize) -> f64,
    mut norms: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<Matrix>> {
    let l = net.num_layers();
    let act = net.activation();
    let row_l1 = |m: &Matrix| -> Vec<f64> {
        (0..m.rows())
            .map(|b| m.row(b).iter().map(|v| v.abs()).sum())
            .collect()
    };
    let mut zs = Vec::with_capacity(l);
    zs.push(inputs.clone());
    if let Some(n) = norms.as_deref_mut() {
        n.push(row_l1(inputs));
    }
    for k in 1..l {
        let prev = &zs[k - 1];
        let mut a = prev.matmul_transpose_b(net.layer(k))?;
        let eps = shift(k);
        if eps != 0.0 {
            let prev_norms = row_l1(prev);
            for (b, pn) in prev_norms.iter().enumerate() {
                a.row_mut(b).iter_mut().for_each(|v| *v += eps * pn);
            }
        }
        a.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
        if let Some(n) = norms.as_deref_mut() {
            n.push(row_l1(&a));
        }
        zs.push(a);
    }
    Ok(zs)
}

/// Backprop of `g` (gradient w.r.t. the logits) through the natural chain.
fn backprop(net: &Network, zs: &[Matrix], g_logits: Matrix, grads: &mut [Matrix]) -> Result<()> {
    let l = net.num_layers();
    grads[l - 1].axpy(1.0, &g_logits.matmul_transpose_a(&zs[l - 1])?)?;
    let mut g = g_logits.matmul(net.layer(l))?;
    for k in (1..l).rev() {
        mask_inactive(&mut g, &zs[k]);
        grads[k - 1].axpy(1.0, &g.matmul_transpose_a(&zs[k - 1])?)?;
        if k > 1 {
            g = g.matmul(net.layer(k))?;
        }
    }
    Ok(())
}

fn mask_inactive(g: &mut Matrix, z: &Matrix) {
    for (gv, &zv) in g.as_mut_slice().iter_mut().zip(z.as_slice()) {
        if zv <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Sign with `sgn(0) = 0`, the subgradient of `|·|` used here.
#[inline]
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{brute_force_margin_oracle, eta, OracleMode};
    use crate::data::synthetic_blobs;
    use crate::network::{Activation, NetworkSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn ramp_values() {
        assert_eq!(ramp_phi(-1.0, 1.0), 1.0);
        assert_eq!(ramp_phi(0.5, 1.0), 0.5);
        assert_eq!(ramp_phi(2.0, 1.0), 0.0);
        assert_eq!(ramp_phi(0.0, 1.0), 1.0);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let ce = cross_entropy(&[0.0, 2.0], 1).unwrap();
        assert!(close(ce, (1.0 + (-2.0f64).exp()).ln(), 1e-15));
        assert!(cross_entropy(&[0.0, 2.0], 2).is_err());
    }

    #[test]
    fn robust_cross_entropy_two_class_example() {
        let net = Network::new(
            Activation::Relu,
            vec![
                Matrix::from_rows(&[[1.0, -1.0], [0.0, 2.0]]).unwrap(),
                Matrix::identity(2),
            ],
        )
        .unwrap();
        let x = [1.0, 1.0];
        assert_eq!(net.logits(&x).unwrap(), vec![0.0, 2.0]);
        let spec = PerturbationSpec::single(1, 0.1).unwrap();
        let got = robust_cross_entropy(&net, &x, 1, &spec).unwrap();
        assert!(close(got, (1.0 + (-2.0f64).exp()).ln() + 0.4, 1e-14));
        let plain = robust_cross_entropy(&net, &x, 1, &PerturbationSpec::empty()).unwrap();
        assert!(close(plain, cross_entropy(&[0.0, 2.0], 1).unwrap(), 1e-15));
    }

    #[test]
    fn regularizer_identity_weights() {
        let net = Network::new(Activation::Relu, vec![Matrix::identity(3); 3]).unwrap();
        assert_eq!(
            generalization_regularizer(&net, Regularizer::SumNorms).unwrap(),
            6.0
        );
        assert_eq!(
            generalization_regularizer(&net, Regularizer::LogNorms).unwrap(),
            0.0
        );
        assert_eq!(
            generalization_regularizer(&net, Regularizer::None).unwrap(),
            0.0
        );
        let scaled = net
            .with_weights(net.weights().iter().map(|w| w.scale(2.5)).collect())
            .unwrap();
        assert_eq!(
            generalization_regularizer(&scaled, Regularizer::SumNorms).unwrap(),
            15.0
        );
    }

    #[test]
    fn log_regularizer_rejects_zero_layer() {
        let net = Network::new(
            Activation::Relu,
            vec![Matrix::identity(2), Matrix::zeros(2, 2)],
        )
        .unwrap();
        assert!(matches!(
            generalization_regularizer(&net, Regularizer::LogNorms),
            Err(Error::ZeroNorm { layer: 2, .. })
        ));
    }

    fn setup(seed: u64, dims: Vec<usize>) -> (Network, Dataset) {
        let net = Network::init(&NetworkSpec::relu(dims.clone()).unwrap(), seed);
        let data = synthetic_blobs(*dims.last().unwrap(), dims[0], 3, 0.3, seed).unwrap();
        (net, data)
    }

    #[test]
    fn total_loss_reduces_to_mean_classification_loss() {
        let (net, data) = setup(1, vec![4, 6, 5, 3]);
        let cfg = LossConfig::cross_entropy();
        let mean: f64 = (0..data.len())
            .map(|i| cross_entropy(&net.logits(data.input(i)).unwrap(), data.label(i)).unwrap())
            .sum::<f64>()
            / data.len() as f64;
        assert!(close(total_loss(&net, &data, &cfg).unwrap(), mean, 1e-13));

        let zero_eps = LossConfig::robust(0.7, 0.0, 0.0, 3).unwrap();
        assert!(close(
            total_loss(&net, &data, &zero_eps).unwrap(),
            mean,
            1e-13
        ));

        let ramp = LossConfig {
            classification_loss: ClassificationLoss::Ramp,
            gamma: 2.0,
            ..LossConfig::default()
        };
        let ramp_mean: f64 = (0..data.len())
            .map(|i| {
                ramp_phi(
                    margin(&net.logits(data.input(i)).unwrap(), data.label(i)).unwrap(),
                    2.0,
                )
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!(close(
            total_loss(&net, &data, &ramp).unwrap(),
            ramp_mean,
            1e-13
        ));
    }

    #[test]
    fn total_loss_matches_termwise_recomputation() {
        let (net, data) = setup(5, vec![4, 7, 6, 5, 3]);
        let spec = PerturbationSpec::new([(1, 0.02), (3, 0.01), (4, 0.03)]).unwrap();
        let cfg = LossConfig {
            lambda: 0.3,
            mu: 0.05,
            perturbation: spec.clone(),
            ..LossConfig::default()
        };
        let mut expected = 0.0;
        for i in 0..data.len() {
            let x = data.input(i);
            let y = data.label(i);
            let worst = (0..3)
                .filter(|&c| c != y)
                .map(|c| eta(&net, x, c, y, &spec).unwrap())
                .fold(0.0, f64::max);
            expected += cross_entropy(&net.logits(x).unwrap(), y).unwrap() + 0.3 * worst;
        }
        expected /= data.len() as f64;
        let mut reg = 0.0;
        for w in net.weights() {
            let rows = (0..w.rows())
                .map(|r| w.row(r).iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            let cols = (0..w.cols())
                .map(|c| w.column(c).iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            reg += rows + cols;
        }
        expected += 0.05 * reg;
        assert!(close(
            total_loss(&net, &data, &cfg).unwrap(),
            expected,
            1e-12
        ));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (net, data) = setup(1, vec![4, 6, 3]);
        assert!(matches!(
            total_loss(&net, &data.head(0), &LossConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn zero_input_gradient_has_uniform_softmax_pattern() {
        let net = Network::init(&NetworkSpec::relu(vec![3, 4, 4]).unwrap(), 2);
        let data = Dataset::new(Matrix::zeros(2, 3), vec![1, 3], 4).unwrap();
        let g = total_loss_gradient(&net, &data, &LossConfig::default()).unwrap();
        // logits vanish, so dℓ/df = 1/4 − onehot and the last layer sees z = 0
        assert!(g.iter().all(|m| m.max_abs() == 0.0));
        let ones = Dataset::new(Matrix::from_fn(2, 3, |_, _| 1.0), vec![1, 3], 4).unwrap();
        let net = Network::new(
            Activation::Relu,
            vec![Matrix::from_fn(4, 3, |_, _| 0.5), Matrix::zeros(4, 4)],
        )
        .unwrap();
        let g = total_loss_gradient(&net, &ones, &LossConfig::default()).unwrap();
        // each sample contributes (1/4 − onehot) ⊗ z with z = [1.5; 4], averaged over 2 samples
        for r in 0..4 {
            let expected_row = 1.5 * (0.25 - f64::from(u8::from(r == 1 || r == 3)) * 0.5);
            for c in 0..4 {
                assert!(close(g[1][(r, c)], expected_row, 1e-14));
            }
        }
        let col_sums: Vec<f64> = (0..4).map(|c| g[1].column(c).iter().sum()).collect();
        assert!(col_sums.iter().all(|s| s.abs() < 1e-14));
    }

    /// Central differences with a kink guard: coordinates whose one-sided
    /// slopes disagree are reported as `None`.
    fn finite_difference(
        net: &Network,
        data: &Dataset,
        cfg: &LossConfig,
        h: f64,
    ) -> Vec<Vec<Option<f64>>> {
        let base = total_loss(net, data, cfg).unwrap();
        let mut out = Vec::new();
        for k in 0..net.num_layers() {
            let mut layer = Vec::new();
            for idx in 0..net.weights()[k].as_slice().len() {
                let eval = |delta: f64| {
                    let mut w = net.weights().to_vec();
                    w[k].as_mut_slice()[idx] += delta;
                    total_loss(&net.with_weights(w).unwrap(), data, cfg).unwrap()
                };
                let (up, down) = (eval(h), eval(-h));
                let fwd = (up - base) / h;
                let bwd = (base - down) / h;
                let central = (up - down) / (2.0 * h);
                let kink = (fwd - bwd).abs() > 1e-4 * (1.0 + central.abs());
                layer.push((!kink).then_some(central));
            }
            out.push(layer);
        }
        out
    }

    fn gradient_error(net: &Network, data: &Dataset, cfg: &LossConfig) -> (f64, usize) {
        let g = total_loss_gradient(net, data, cfg).unwrap();
        let fd = finite_difference(net, data, cfg, 1e-6);
        let (mut diff, mut norm, mut skipped) = (0.0f64, 0.0f64, 0);
        for (gk, fk) in g.iter().zip(&fd) {
            for (a, f) in gk.as_slice().iter().zip(fk) {
                match f {
                    Some(f) => {
                        diff += (a - f).powi(2);
                        norm += a.powi(2).max(f.powi(2));
                    }
                    None => skipped += 1,
                }
            }
        }
        (diff.sqrt() / norm.sqrt().max(1e-12), skipped)
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let (net, data) = setup(3, vec![4, 6, 5, 3]);
        let (err, _) = gradient_error(&net, &data, &LossConfig::default());
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..12 {
            let depth = rng.gen_range(2..=4);
            let mut dims = vec![rng.gen_range(2..=5)];
            for _ in 1..depth {
                dims.push(rng.gen_range(2..=6));
            }
            dims.push(rng.gen_range(2..=4));
            let (net, data) = setup(case, dims);
            let l = net.num_layers();
            let spec =
                PerturbationSpec::new((1..=l).map(|k| (k, rng.gen_range(0.005..0.05)))).unwrap();
            let cfg = LossConfig {
                lambda: rng.gen_range(0.05..1.0),
                mu: rng.gen_range(0.01..0.2),
                perturbation: spec,
                regularizer: if case % 3 == 0 {
                    Regularizer::LogNorms
                } else {
                    Regularizer::SumNorms
                },
                classification_loss: if case % 4 == 1 {
                    ClassificationLoss::Ramp
                } else {
                    ClassificationLoss::CrossEntropy
                },
                gamma: 1.0,
            };
            let (err, skipped) = gradient_error(&net, &data, &cfg);
            assert!(
                err < 1e-4,
                "case {case}: relative error {err} ({skipped} skipped)"
            );
        }
    }

    #[test]
    fn ramp_sandwich_on_enumerable_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..30 {
            let net = Network::init(&NetworkSpec::relu(vec![2, 3, 2, 2]).unwrap(), case);
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y = rng.gen_range(0..2);
            let n = rng.gen_range(1..=2);
            let eps = rng.gen_range(0.01..0.3);
            let spec = PerturbationSpec::single(n, eps).unwrap();
            let logits = net.logits(&x).unwrap();
            let m = margin(&logits, y).unwrap();
            let worst_growth =
                brute_force_margin_oracle(&net, &x, 1 - y, y, &spec, OracleMode::Corners).unwrap();
            let robust01 = f64::from(u8::from(m - worst_growth <= 0.0));
            let value = robust_ramp_loss(&net, &x, y, n, eps, 0.5).unwrap();
            let upper = f64::from(u8::from(m - psi(&net, &x, n, eps).unwrap() <= 0.5));
            assert!(robust01 <= value && value <= upper, "case {case}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn robust_cross_entropy_offset_is_max_eta(seed in 0u64..5000, eps in 0.0f64..0.1) {
            let (net, data) = setup(seed, vec![3, 5, 4, 3]);
            let spec = PerturbationSpec::all_layers(3, eps).unwrap();
            for i in 0..data.len() {
                let (x, y) = (data.input(i), data.label(i));
                let gap = robust_cross_entropy(&net, x, y, &spec).unwrap() - cross_entropy(&net.logits(x).unwrap(), y).unwrap();
                prop_assert!(close(gap, max_competitor_eta(&net, x, y, &spec).unwrap(), 1e-12));
            }
        }

        #[test]
        fn total_loss_monotone_in_coefficients(seed in 0u64..5000, l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
            let (net, data) = setup(seed, vec![3, 5, 3]);
            let at = |lambda: f64, mu: f64| {
                let cfg = LossConfig::robust(lambda, mu, 0.02, 2).unwrap();
                total_loss(&net, &data, &cfg).unwrap()
            };
            let (lo, hi) = (l1.min(l2), l1.max(l2));
            prop_assert!(at(lo, 0.1) <= at(hi, 0.1) + 1e-12);
            prop_assert!(at(0.1, lo) <= at(0.1, hi) + 1e-12);
        }

        #[test]
        fn multi_ramp_with_single_layer_is_below_psi_version(seed in 0u64..5000, eps in 0.0f64..0.2) {
            let (net, data) = setup(seed, vec![3, 5, 4, 3]);
            for n in 1..3 {
                let spec = PerturbationSpec::single(n, eps).unwrap();
                for i in 0..data.len() {
                    let (x, y) = (data.input(i), data.label(i));
                    let multi = robust_ramp_loss_multi(&net, x, y, &spec, 1.0).unwrap();
                    let single = robust_ramp_loss(&net, x, y, n, eps, 1.0).unwrap();
                    prop_assert!(multi <= single + 1e-12);
                }
            }
        }

        #[test]
        fn ramp_losses_reduce_without_perturbation(seed in 0u64..5000) {
            let (net, data) = setup(seed, vec![3, 5, 3]);
            for i in 0..data.len() {
                let (x, y) = (data.input(i), data.label(i));
                let plain = ramp_phi(margin(&net.logits(x).unwrap(), y).unwrap(), 1.0);
                prop_assert_eq!(robust_ramp_loss(&net, x, y, 1, 0.0, 1.0).unwrap(), plain);
                prop_assert_eq!(robust_ramp_loss_multi(&net, x, y, &PerturbationSpec::empty(), 1.0).unwrap(), plain);
                prop_assert_eq!(robust_ramp_loss(&net, x, y, 1, 1e6, 1.0).unwrap(), 1.0);
            }
        }
    }
}
