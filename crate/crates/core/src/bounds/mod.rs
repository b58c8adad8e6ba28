//! Worst-case pairwise-margin bounds under element-wise weight perturbation.
//!
//! A perturbation set assigns a radius `ε_k` to some layers; every entry of
//! `W^k` may move by at most `ε_k`. The certified error for the class pair
//! `(i, j)` is
//!
//! ```text
//! η^{ij} = Σ_{k∈I, k<L} ε_k ‖W^L_i − W^L_j‖₁ ‖z^{(k−1)*}‖₁ Π_{m=k+1}^{L−1} ‖(W^m)ᵀ‖_{1,∞}
//!        + 1(L∈I) · 2 ε_L ‖z^{(L−1)*}‖₁
//! ```
//!
//! where `z^{k*}` is the forward pass through the starred weights.
//! Because every term except `‖W^L_i − W^L_j‖₁` is shared by all pairs,
//! [`EtaFactors`] computes them once per input.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{l1, Matrix};
use crate::network::{margin, pairwise_margin, Network};

pub mod toeplitz;

pub use toeplitz::{conv_to_toeplitz, ConvGeometry, ConvKernel};

/// Largest number of perturbed entries the corner oracle will enumerate.
pub const MAX_CORNER_BITS: usize = 20;

/// Default sample count for the random oracle.
pub const DEFAULT_ORACLE_SAMPLES: usize = 10_000;

/// Layers allowed to move and how far each entry may move.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<usize, f64>", into = "BTreeMap<usize, f64>")]
pub struct PerturbationSpec {
    radii: BTreeMap<usize, f64>,
}

impl PerturbationSpec {
    /// Builds a spec from `(layer, ε)` pairs with 1-based layer numbers.
    pub fn new(radii: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, eps) in radii {
            if k == 0 {
                return Err(Error::InvalidPerturbation(
                    "layer numbers start at 1".into(),
                ));
            }
            if !(eps.is_finite() && eps >= 0.0) {
                return Err(Error::InvalidPerturbation(format!(
                    "radius for layer {k} must be finite and >= 0, got {eps}"
                )));
            }
            if map.insert(k, eps).is_some() {
                return Err(Error::InvalidPerturbation(format!(
                    "layer {k} listed twice"
                )));
            }
        }
        Ok(PerturbationSpec { radii: map })
    }

    pub fn empty() -> Self {
        PerturbationSpec::default()
    }

    pub fn single(layer: usize, eps: f64) -> Result<Self> {
        PerturbationSpec::new([(layer, eps)])
    }

    /// Every layer `1..=num_layers` with the same radius.
    pub fn all_layers(num_layers: usize, eps: f64) -> Result<Self> {
        PerturbationSpec::new((1..=num_layers).map(|k| (k, eps)))
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.radii.contains_key(&layer)
    }

    /// `ε_k`, or 0 for layers outside the index set.
    pub fn radius(&self, layer: usize) -> f64 {
        self.radii.get(&layer).copied().unwrap_or(0.0)
    }

    /// `(layer, ε)` pairs in increasing layer order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.radii.iter().map(|(&k, &e)| (k, e))
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.radii.keys().copied()
    }

    /// Same index set with every radius multiplied by `c >= 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        PerturbationSpec::new(self.iter().map(|(k, e)| (k, e * c)))
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        let l = net.num_layers();
        match self.radii.keys().next_back() {
            Some(&k) if k > l => Err(Error::LayerOutOfRange {
                layer: k,
                range: format!("1..={l}"),
            }),
            _ => Ok(()),
        }
    }
}

impl TryFrom<BTreeMap<usize, f64>> for PerturbationSpec {
    type Error = Error;

    fn try_from(map: BTreeMap<usize, f64>) -> Result<Self> {
        PerturbationSpec::new(map)
    }
}

impl From<PerturbationSpec> for BTreeMap<usize, f64> {
    fn from(spec: PerturbationSpec) -> Self {
        spec.radii
    }
}

/// Certification outcome for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginCertificate {
    pub sample_id: usize,
    pub label: usize,
    /// `[f]_y − max_{y'≠y} [f]_{y'}`.
    pub natural_margin: f64,
    /// `max_{y'≠y} η^{y'y}`.
    pub eta_max: f64,
    /// One entry per competitor `y' ≠ y`.
    pub pairs: Vec<PairBound>,
    /// `f^{yy'} > η^{y'y}` for every competitor.
    pub certified: bool,
}

/// Margin against a single competitor class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairBound {
    pub competitor: usize,
    /// `f^{yy'}`.
    pub margin: f64,
    /// `η^{y'y}`, the largest possible growth of `f^{y'y}`.
    pub eta: f64,
}

/// Pair-independent parts of `η`: `η^{ij} = ‖W^L_i − W^L_j‖₁ · propagated + final_layer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaFactors {
    pub propagated: f64,
    pub final_layer: f64,
}

impl EtaFactors {
    pub fn eta(&self, net: &Network, i: usize, j: usize) -> f64 {
        self.with_distance(last_layer_distance(net, i, j))
    }

    pub fn with_distance(&self, distance: f64) -> f64 {
        distance * self.propagated + self.final_layer
    }
}

/// `W^{k*}` for every layer.
///
/// Layers outside the index set are returned unchanged. For the first layer
/// the offset follows the sign of the matching input coordinate, with
/// `sgn(0) = +1`.
pub fn starred_weights(net: &Network, spec: &PerturbationSpec, x: &[f64]) -> Result<Vec<Matrix>> {
    check_input(net, x)?;
    spec.validate(net)?;
    Ok(net
        .weights()
        .iter()
        .enumerate()
        .map(|(idx, w)| {
            let k = idx + 1;
            let eps = spec.radius(k);
            if !spec.contains(k) || eps == 0.0 {
                return w.clone();
            }
            if k == 1 {
                Matrix::from_fn(w.rows(), w.cols(), |r, c| w[(r, c)] + sign(x[c]) * eps)
            } else {
                w.map(|v| v + eps)
            }
        })
        .collect())
}

/// `z^{0*} = x, z^{1*}, …, z^{(L−1)*}`.
///
/// Uses `(W + ε𝟙𝟙ᵀ) z = W z + ε ‖z‖₁ 𝟙` for non-negative `z`, and the same
/// identity for the first layer's sign rule, so starred matrices are never
/// materialized.
pub fn z_star_chain(net: &Network, spec: &PerturbationSpec, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_input(net, x)?;
    spec.validate(net)?;
    let act = net.activation();
    let hidden = net.num_layers() - 1;
    let mut chain = Vec::with_capacity(hidden + 1);
    chain.push(x.to_vec());
    for k in 1..=hidden {
        let prev = &chain[k - 1];
        let shift = spec.radius(k) * l1(prev);
        let mut a = net.layer(k).matvec(prev)?;
        a.iter_mut().for_each(|v| *v = act.apply(*v + shift));
        chain.push(a);
    }
    Ok(chain)
}

/// `z^{k*}` for `0 <= k <= L−1`.
pub fn z_star(net: &Network, spec: &PerturbationSpec, x: &[f64], k: usize) -> Result<Vec<f64>> {
    let l = net.num_layers();
    if k >= l {
        return Err(Error::LayerOutOfRange {
            layer: k,
            range: format!("0..={}", l - 1),
        });
    }
    let mut chain = z_star_chain(net, spec, x)?;
    Ok(chain.swap_remove(k))
}

/// `‖W^L_{i,:} − W^L_{j,:}‖₁`.
pub fn last_layer_distance(net: &Network, i: usize, j: usize) -> f64 {
    let w = net.layer(net.num_layers());
    w.row(i)
        .iter()
        .zip(w.row(j))
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// `Π_{m=k+1}^{L−1} ‖(W^m)ᵀ‖_{1,∞}` (max row ℓ1 norms); 1 when empty.
pub fn row_norm_product(net: &Network, k: usize) -> f64 {
    let l = net.num_layers();
    ((k + 1)..l).map(|m| net.layer(m).max_row_l1().1).product()
}

/// Error contributed by perturbing hidden layer `k < L`:
/// `ε_k ‖W^L_i − W^L_j‖₁ ‖z‖₁ Π_{m=k+1}^{L−1} ‖(W^m)ᵀ‖_{1,∞}`.
pub fn delta_term(
    net: &Network,
    eps_k: f64,
    z: &[f64],
    i: usize,
    j: usize,
    k: usize,
) -> Result<f64> {
    let l = net.num_layers();
    if k == 0 || k >= l {
        return Err(Error::LayerOutOfRange {
            layer: k,
            range: format!("1..={}", l - 1),
        });
    }
    check_pair(net, i, j)?;
    let width = net.spec().layer_dims()[k - 1];
    if z.len() != width {
        return Err(Error::dimension("delta_term", width, z.len()));
    }
    Ok(eps_k * last_layer_distance(net, i, j) * l1(z) * row_norm_product(net, k))
}

/// `2 ε_L ‖z‖₁`, the error from perturbing the output layer alone.
pub fn final_layer_term(eps_l: f64, z: &[f64]) -> f64 {
    2.0 * eps_l * l1(z)
}

/// Shared factors of `η^{ij}` for input `x`.
pub fn eta_factors(net: &Network, x: &[f64], spec: &PerturbationSpec) -> Result<EtaFactors> {
    let chain = z_star_chain(net, spec, x)?;
    Ok(factors_from_chain(net, spec, &chain))
}

fn factors_from_chain(net: &Network, spec: &PerturbationSpec, chain: &[Vec<f64>]) -> EtaFactors {
    let l = net.num_layers();
    let mut propagated = 0.0;
    let mut final_layer = 0.0;
    for (k, eps) in spec.iter() {
        if k < l {
            propagated += eps * l1(&chain[k - 1]) * row_norm_product(net, k);
        } else {
            final_layer = final_layer_term(eps, &chain[l - 1]);
        }
    }
    EtaFactors {
        propagated,
        final_layer,
    }
}

/// Worst-case growth of `f^{ij}` over the perturbation ball.
pub fn eta(net: &Network, x: &[f64], i: usize, j: usize, spec: &PerturbationSpec) -> Result<f64> {
    check_pair(net, i, j)?;
    Ok(eta_factors(net, x, spec)?.eta(net, i, j))
}

/// `η^{ij}` for every ordered pair, as a `K × K` matrix with zero diagonal.
pub fn eta_table(net: &Network, x: &[f64], spec: &PerturbationSpec) -> Result<Matrix> {
    let f = eta_factors(net, x, spec)?;
    let k = net.num_classes();
    Ok(Matrix::from_fn(k, k, |i, j| {
        if i == j {
            0.0
        } else {
            f.eta(net, i, j)
        }
    }))
}

/// Worst-case error used by the single-layer robust ramp loss:
/// `2 max_k ε ‖W^L_k‖₁ Π_{m=1}^{N−1} ‖W^m‖_{1,∞} Π_{k=1}^{L−N−1} ‖(W^{L−k})ᵀ‖_{1,∞} ‖x‖₁`.
///
/// Layers before `N` enter through the column norm, layers after through
/// the row norm.
pub fn psi(net: &Network, x: &[f64], n: usize, eps: f64) -> Result<f64> {
    check_input(net, x)?;
    let l = net.num_layers();
    if n == 0 || n >= l {
        return Err(Error::LayerOutOfRange {
            layer: n,
            range: format!("1..={}", l - 1),
        });
    }
    let w_last = net.layer(l);
    let max_row = w_last.row_l1_norms().into_iter().fold(0.0, f64::max);
    let before: f64 = (1..n).map(|m| net.layer(m).max_col_l1().1).product();
    let after: f64 = (1..l - n)
        .map(|k| net.layer(l - k).max_row_l1().1)
        .product();
    Ok(2.0 * eps * max_row * before * after * l1(x))
}

/// How the margin oracle explores the perturbation ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMode {
    /// Every perturbed entry at `±ε`; refuses above [`MAX_CORNER_BITS`] entries.
    Corners,
    /// Seeded random points, half of them box corners and half uniform in the box.
    Random { samples: usize, seed: u64 },
}

/// Largest observed `f^{ij}_Ŵ(x) − f^{ij}_W(x)` over perturbed weights.
///
/// This explores the ball; it is a lower bound on the true supremum.
pub fn brute_force_margin_oracle(
    net: &Network,
    x: &[f64],
    i: usize,
    j: usize,
    spec: &PerturbationSpec,
    mode: OracleMode,
) -> Result<f64> {
    check_input(net, x)?;
    check_pair(net, i, j)?;
    spec.validate(net)?;
    let base = {
        let f = net.logits(x)?;
        pairwise_margin(&f, i, j)
    };
    let entries = perturbed_entries(net, spec);
    let mut best = 0.0f64;
    match mode {
        OracleMode::Corners => {
            if entries.len() > MAX_CORNER_BITS {
                return Err(Error::TooManyCorners {
                    count: entries.len(),
                    max: MAX_CORNER_BITS,
                });
            }
            // Gray-code walk: consecutive corners differ in one entry.
            let mut weights: Vec<Matrix> = net.weights().to_vec();
            for &(k, idx, eps) in &entries {
                weights[k].as_mut_slice()[idx] -= eps;
            }
            let total = 1usize << entries.len();
            for step in 0..total {
                if step > 0 {
                    let bit = step.trailing_zeros() as usize;
                    let (k, idx, eps) = entries[bit];
                    let gray = step ^ (step >> 1);
                    let delta = if gray >> bit & 1 == 1 {
                        2.0 * eps
                    } else {
                        -2.0 * eps
                    };
                    weights[k].as_mut_slice()[idx] += delta;
                }
                best = best.max(margin_under(net, &weights, x, i, j)? - base);
            }
        }
        OracleMode::Random { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for s in 0..samples {
                let weights = sample_perturbation(net, spec, &mut rng, s % 2 == 0);
                best = best.max(margin_under(net, &weights, x, i, j)? - base);
            }
        }
    }
    Ok(best)
}

/// Random weights inside the ball: a uniform corner when `corner` is set,
/// otherwise a uniform point in the box.
pub fn sample_perturbation<R: Rng>(
    net: &Network,
    spec: &PerturbationSpec,
    rng: &mut R,
    corner: bool,
) -> Vec<Matrix> {
    net.weights()
        .iter()
        .enumerate()
        .map(|(idx, w)| {
            let eps = spec.radius(idx + 1);
            if eps == 0.0 {
                return w.clone();
            }
            w.map(|v| {
                let d = if corner {
                    if rng.gen_bool(0.5) {
                        eps
                    } else {
                        -eps
                    }
                } else {
                    rng.gen_range(-eps..=eps)
                };
                v + d
            })
        })
        .collect()
}

fn perturbed_entries(net: &Network, spec: &PerturbationSpec) -> Vec<(usize, usize, f64)> {
    spec.iter()
        .filter(|&(_, eps)| eps > 0.0)
        .flat_map(|(k, eps)| {
            let n = net.layer(k).as_slice().len();
            (0..n).map(move |idx| (k - 1, idx, eps))
        })
        .collect()
}

fn margin_under(net: &Network, weights: &[Matrix], x: &[f64], i: usize, j: usize) -> Result<f64> {
    let act = net.activation();
    let mut z = x.to_vec();
    let last = weights.len() - 1;
    for w in &weights[..last] {
        z = w.matvec(&z)?;
        z.iter_mut().for_each(|v| *v = act.apply(*v));
    }
    let f = weights[last].matvec(&z)?;
    Ok(pairwise_margin(&f, i, j))
}

/// Certificate for one labelled input.
pub fn certify(
    net: &Network,
    sample_id: usize,
    x: &[f64],
    y: usize,
    spec: &PerturbationSpec,
) -> Result<MarginCertificate> {
    let logits = net.logits(x)?;
    let natural_margin = margin(&logits, y)?;
    let factors = eta_factors(net, x, spec)?;
    let pairs: Vec<PairBound> = (0..net.num_classes())
        .filter(|&c| c != y)
        .map(|c| PairBound {
            competitor: c,
            margin: pairwise_margin(&logits, y, c),
            eta: factors.eta(net, c, y),
        })
        .collect();
    let eta_max = pairs.iter().map(|p| p.eta).fold(0.0, f64::max);
    let certified = pairs.iter().all(|p| p.margin > p.eta);
    Ok(MarginCertificate {
        sample_id,
        label: y,
        natural_margin,
        eta_max,
        pairs,
        certified,
    })
}

/// Certificates for every sample, computed in parallel.
pub fn certify_dataset(
    net: &Network,
    data: &Dataset,
    spec: &PerturbationSpec,
) -> Result<Vec<MarginCertificate>> {
    if data.input_dim() != net.input_dim() {
        return Err(Error::dimension(
            "certify_dataset",
            net.input_dim(),
            data.input_dim(),
        ));
    }
    spec.validate(net)?;
    (0..data.len())
        .into_par_iter()
        .map(|s| certify(net, s, data.input(s), data.label(s), spec))
        .collect()
}

/// Fraction of certificates with `certified == true`.
pub fn certified_fraction(certs: &[MarginCertificate]) -> f64 {
    if certs.is_empty() {
        return 0.0;
    }
    certs.iter().filter(|c| c.certified).count() as f64 / certs.len() as f64
}

#[inline]
fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn check_input(net: &Network, x: &[f64]) -> Result<()> {
    if x.len() != net.input_dim() {
        return Err(Error::dimension("input", net.input_dim(), x.len()));
    }
    Ok(())
}

fn check_pair(net: &Network, i: usize, j: usize) -> Result<()> {
    let k = net.num_classes();
    for c in [i, j] {
        if c >= k {
            return Err(Error::InvalidLabel {
                label: c,
                classes: k,
            });
        }
    }
    Ok(())
}
