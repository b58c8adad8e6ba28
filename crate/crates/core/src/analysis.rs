//! Generalization statistics for trained networks.
//!
//! Data matrices are passed with one sample per row, as stored in
//! [`Dataset::inputs`]. Class caps `s_h`, `b_h` are taken from the network's
//! own norms.

use serde::{Deserialize, Serialize};

use crate::attack::{weight_pgd, AttackConfig};
use crate::bounds::{psi, PerturbationSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{l1, spectral_norm_default, Matrix};
use crate::network::{accuracy, margin, Network};

/// Constant in front of the spectral-norm margin complexity term.
pub const RADEMACHER_CONSTANT: f64 = 60.0;

/// `‖X‖_{1,2}`: ℓ2 norm over samples of each sample's ℓ1 norm.
pub fn data_norm_l1_l2(x: &Matrix) -> f64 {
    (0..x.rows())
        .map(|r| l1(x.row(r)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `‖Wᵀ‖_{2,1}`: sum of the ℓ2 norms of the rows of `W`.
pub fn transposed_l2_l1(w: &Matrix) -> f64 {
    (0..w.rows())
        .map(|r| w.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum()
}

/// Per-layer caps `(s_h, b_h) = (‖W^h‖_σ, ‖(W^h)ᵀ‖_{2,1})`.
pub fn layer_caps(net: &Network) -> (Vec<f64>, Vec<f64>) {
    net.weights()
        .iter()
        .map(|w| (spectral_norm_default(w), transposed_l2_l1(w)))
        .unzip()
}

/// Complexity of the plain margin class:
/// `4/n^{3/2} + C ln(n) ln(2 d_max)/n · ‖X‖_F · Π s_h · (Σ (b_h/s_h)^{2/3})^{3/2}`
/// with `C` = [`RADEMACHER_CONSTANT`].
pub fn rademacher_margin_term(
    x: &Matrix,
    spectral: &[f64],
    b: &[f64],
    n: usize,
    d_max: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count n must be >= 1".into()));
    }
    if d_max == 0 {
        return Err(Error::InvalidConfig("d_max must be >= 1".into()));
    }
    if spectral.is_empty() || spectral.len() != b.len() {
        return Err(Error::dimension("norm caps", spectral.len(), b.len()));
    }
    for (h, (&s, &bh)) in spectral.iter().zip(b).enumerate() {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::ZeroNorm {
                layer: h + 1,
                which: "spectral",
            });
        }
        if !(bh > 0.0 && bh.is_finite()) {
            return Err(Error::ZeroNorm {
                layer: h + 1,
                which: "transposed (2,1)",
            });
        }
    }
    let nf = n as f64;
    let prod: f64 = spectral.iter().product();
    let ratio_sum: f64 = spectral
        .iter()
        .zip(b)
        .map(|(s, bh)| (bh / s).powf(2.0 / 3.0))
        .sum();
    let lead = RADEMACHER_CONSTANT * nf.ln() * (2.0 * d_max as f64).ln() / nf;
    Ok(4.0 / nf.powf(1.5) + lead * x.frobenius() * prod * ratio_sum.powf(1.5))
}

/// [`rademacher_margin_term`] with caps read off `net` and `n` = rows of `x`.
pub fn rademacher_margin_term_for(net: &Network, x: &Matrix) -> Result<f64> {
    let (s, b) = layer_caps(net);
    rademacher_margin_term(x, &s, &b, x.rows(), net.spec().max_dim())
}

/// Complexity added by perturbing layer `layer` with radius `eps`:
/// `(2ε/n) Π_{m<N} ‖W^m‖_{1,∞} Π_{k=0}^{L−N−1} ‖(W^{L−k})ᵀ‖_{1,∞} ‖X‖_{1,2}`.
pub fn rademacher_psi_term(
    net: &Network,
    x: &Matrix,
    layer: usize,
    eps: f64,
    n: usize,
) -> Result<f64> {
    check_data(net, x, n)?;
    let l = net.num_layers();
    if layer == 0 || layer >= l {
        return Err(Error::LayerOutOfRange {
            layer,
            range: format!("1..={}", l - 1),
        });
    }
    let before: f64 = (1..layer).map(|m| net.layer(m).max_col_l1().1).product();
    let after: f64 = (0..l - layer)
        .map(|k| net.layer(l - k).max_row_l1().1)
        .product();
    Ok(2.0 * eps / n as f64 * before * after * data_norm_l1_l2(x))
}

/// `‖W^{i*}‖_{1,∞}` for the worst-case in-ball weights of layer `i`.
///
/// Hidden layers shift every entry by `+ε`; the first layer takes the
/// column-wise larger of `±ε` since its sign follows the input.
pub fn starred_col_norm(net: &Network, spec: &PerturbationSpec, i: usize) -> f64 {
    let w = net.layer(i);
    let eps = spec.radius(i);
    if eps == 0.0 {
        return w.max_col_l1().1;
    }
    let col =
        |c: usize, shift: f64| -> f64 { (0..w.rows()).map(|r| (w.row(r)[c] + shift).abs()).sum() };
    (0..w.cols())
        .map(|c| {
            if i == 1 {
                col(c, eps).max(col(c, -eps))
            } else {
                col(c, eps)
            }
        })
        .fold(0.0, f64::max)
}

/// Combined multi-layer complexity term for the perturbed layer set `spec`.
pub fn rademacher_psi_term_multi(
    net: &Network,
    x: &Matrix,
    spec: &PerturbationSpec,
    n: usize,
) -> Result<f64> {
    check_data(net, x, n)?;
    spec.validate(net)?;
    let l = net.num_layers();
    let star: Vec<f64> = (1..=l).map(|i| starred_col_norm(net, spec, i)).collect();
    let star_prod = |upto: usize| -> f64 { star[..upto].iter().product() };
    let row = |j: usize| net.layer(j).max_row_l1().1;

    let mut inner = 0.0;
    for (ell, eps) in spec.iter() {
        if ell + 1 < l {
            let after: f64 = (ell + 1..l).map(row).product();
            inner += eps * star_prod(ell - 1) * after;
        }
    }
    if spec.contains(l - 1) {
        inner += spec.radius(l - 1) * star_prod(l - 2);
    }
    let scale = 2.0 / n as f64 * data_norm_l1_l2(x);
    let last = if spec.contains(l) {
        scale * spec.radius(l) * star_prod(l - 1)
    } else {
        0.0
    };
    Ok(scale * row(l) * inner + last)
}

/// Fraction of samples with `M(f(x), y) − Ψ(x) ≤ γ`.
pub fn empirical_robust_risk(
    net: &Network,
    data: &Dataset,
    layer: usize,
    eps: f64,
    gamma: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for i in 0..data.len() {
        let x = data.input(i);
        let m = margin(&net.logits(x)?, data.label(i))?;
        if m - psi(net, x, layer, eps)? <= gamma {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Terms of the high-probability bound on the robust population risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBound {
    pub empirical_risk: f64,
    pub margin_complexity: f64,
    pub psi_complexity: f64,
    pub confidence: f64,
    pub gamma: f64,
    pub total: f64,
}

/// `R_n + (R(M) + R(Ψ))/γ + 3 sqrt(ln(2/δ)/(2n))` for layer `layer` perturbed
/// by `eps`, evaluated on `data`.
pub fn generalization_bound(
    net: &Network,
    data: &Dataset,
    layer: usize,
    eps: f64,
    gamma: f64,
    delta: f64,
) -> Result<GeneralizationBound> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "gamma must be > 0, got {gamma}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    let empirical_risk = empirical_robust_risk(net, data, layer, eps, gamma)?;
    let x = data.inputs();
    let n = data.len();
    let margin_complexity = rademacher_margin_term_for(net, x)?;
    let psi_complexity = rademacher_psi_term(net, x, layer, eps, n)?;
    let confidence = 3.0 * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt();
    Ok(GeneralizationBound {
        empirical_risk,
        margin_complexity,
        psi_complexity,
        confidence,
        gamma,
        total: empirical_risk + (margin_complexity + psi_complexity) / gamma + confidence,
    })
}

/// Train accuracy minus test accuracy, each set attacked separately with the
/// same configuration when `attack` is given.
pub fn empirical_generalization_gap(
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    attack: Option<&AttackConfig>,
) -> Result<f64> {
    let acc = |data: &Dataset| -> Result<f64> {
        match attack {
            Some(cfg) => accuracy(&weight_pgd(net, data, cfg)?, data),
            None => accuracy(net, data),
        }
    };
    Ok(acc(train)? - acc(test)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundStatistics {
    /// `Π_h ‖W^h‖_σ`.
    pub prod_spectral: f64,
    /// `‖W^L ⋯ W^1‖_σ`.
    pub spectral_of_product: f64,
    /// `ln(prod_spectral / spectral_of_product)`; infinite when the product vanishes.
    pub log_ratio: f64,
}

pub fn bound_statistics(net: &Network) -> BoundStatistics {
    let prod_spectral: f64 = net.weights().iter().map(spectral_norm_default).product();
    let spectral_of_product = spectral_norm_default(&end_to_end(net));
    let log_ratio = if spectral_of_product > 0.0 {
        (prod_spectral / spectral_of_product).ln()
    } else {
        f64::INFINITY
    };
    BoundStatistics {
        prod_spectral,
        spectral_of_product,
        log_ratio,
    }
}

/// `W^L ⋯ W^1`.
pub fn end_to_end(net: &Network) -> Matrix {
    let mut acc = net.layer(1).clone();
    for w in &net.weights()[1..] {
        acc = w.matmul(&acc).expect("network shapes chain");
    }
    acc
}

pub const MAX_QUANT_BITS: u32 = 32;

/// Per-layer symmetric uniform quantization to `2^bits` levels spanning
/// `[−max|W|, max|W|]`. Entries snap to the nearest level; ties go toward zero.
pub fn quantize(net: &Network, bits: u32) -> Result<Network> {
    if bits == 0 || bits > MAX_QUANT_BITS {
        return Err(Error::InvalidConfig(format!(
            "bits must be in 1..={MAX_QUANT_BITS}, got {bits}"
        )));
    }
    let weights = net
        .weights()
        .iter()
        .map(|w| quantize_matrix(w, bits))
        .collect();
    net.with_weights(weights)
}

pub fn quantize_matrix(w: &Matrix, bits: u32) -> Matrix {
    let m = w.max_abs();
    if m == 0.0 {
        return w.clone();
    }
    let top = (1u64 << bits) - 1;
    let k = top as f64;
    let level = |i: u64| m * ((2.0 * i as f64 - k) / k);
    w.map(|v| {
        let t = ((v / m + 1.0) * 0.5 * k).floor().clamp(0.0, k) as u64;
        let lo = level(t);
        if t == top {
            return lo;
        }
        let hi = level(t + 1);
        let (dl, dh) = ((v - lo).abs(), (hi - v).abs());
        if dl < dh || (dl == dh && lo.abs() <= hi.abs()) {
            lo
        } else {
            hi
        }
    })
}

fn check_data(net: &Network, x: &Matrix, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count n must be >= 1".into()));
    }
    if x.cols() != net.input_dim() {
        return Err(Error::dimension(
            "data matrix columns",
            net.input_dim(),
            x.cols(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::network::NetworkSpec;
    use proptest::prelude::*;

    fn random_net(dims: Vec<usize>, seed: u64) -> Network {
        Network::init(&NetworkSpec::relu(dims).unwrap(), seed)
    }

    fn svd_top(w: &Matrix) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice());
        m.singular_values().max()
    }

    #[test]
    fn margin_term_zero_data() {
        let x = Matrix::zeros(9, 3);
        let v = rademacher_margin_term(&x, &[1.0, 1.0], &[1.0, 1.0], 9, 4).unwrap();
        assert!((v - 4.0 / 27.0).abs() < 1e-15);
    }

    #[test]
    fn margin_term_hand_value() {
        // n = 4 samples in R^2, two layers, d_max = 2
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [0.0, 0.0]]).unwrap();
        let s = [2.0, 0.5];
        let b = [3.0, 0.5];
        let frob = 7.0f64.sqrt();
        let ratio = (1.5f64).powf(2.0 / 3.0) + 1.0;
        let expected =
            4.0 / 8.0 + 60.0 * 4f64.ln() * 4f64.ln() / 4.0 * frob * 1.0 * ratio.powf(1.5);
        let v = rademacher_margin_term(&x, &s, &b, 4, 2).unwrap();
        assert!((v - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn margin_term_linear_in_data_scale() {
        let x = Matrix::from_fn(5, 3, |r, c| (r * 3 + c) as f64 * 0.1);
        let base = rademacher_margin_term(&x, &[1.3, 0.7], &[2.0, 1.1], 5, 3).unwrap()
            - 4.0 / 5f64.powf(1.5);
        let scaled = rademacher_margin_term(&x.scale(3.0), &[1.3, 0.7], &[2.0, 1.1], 5, 3).unwrap()
            - 4.0 / 5f64.powf(1.5);
        assert!((scaled - 3.0 * base).abs() <= 1e-12 * scaled);
    }

    #[test]
    fn margin_term_rejects_zero_norms() {
        let x = Matrix::zeros(2, 2);
        assert!(matches!(
            rademacher_margin_term(&x, &[1.0, 0.0], &[1.0, 1.0], 2, 2),
            Err(Error::ZeroNorm { layer: 2, .. })
        ));
        assert!(rademacher_margin_term(&x, &[1.0], &[0.0], 2, 2).is_err());
        assert!(rademacher_margin_term(&x, &[1.0], &[1.0], 0, 2).is_err());
        assert!(rademacher_margin_term(&x, &[1.0], &[1.0, 2.0], 2, 2).is_err());
    }

    #[test]
    fn caps_match_definitions() {
        let net = random_net(vec![4, 5, 3], 2);
        let (s, b) = layer_caps(&net);
        for (h, w) in net.weights().iter().enumerate() {
            assert!((s[h] - svd_top(w)).abs() < 1e-8);
            let direct: f64 = (0..w.rows())
                .map(|r| w.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum();
            assert!((b[h] - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn psi_term_hand_values() {
        let w1 = Matrix::from_rows(&[[1.0, -2.0], [0.5, 1.0]]).unwrap();
        let w2 = Matrix::from_rows(&[[1.0, 1.0], [-3.0, 0.5]]).unwrap();
        let w3 = Matrix::from_rows(&[[0.5, -0.5], [2.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        // ‖X‖_{1,2} = sqrt(3² + 1²)
        let xn = 10f64.sqrt();

        let two = Network::new(Default::default(), vec![w1.clone(), w2.clone()]).unwrap();
        // N = 1: only ‖(W²)ᵀ‖_{1,∞} = 3.5
        let v = rademacher_psi_term(&two, &x, 1, 0.1, 2).unwrap();
        assert!((v - 2.0 * 0.1 / 2.0 * 3.5 * xn).abs() < 1e-14);

        let three = Network::new(Default::default(), vec![w1, w2, w3]).unwrap();
        // N = 2: ‖W¹‖_{1,∞} = 3, ‖(W³)ᵀ‖_{1,∞} = 3
        let v = rademacher_psi_term(&three, &x, 2, 0.1, 2).unwrap();
        assert!((v - 0.1 * 3.0 * 3.0 * xn).abs() < 1e-14);
        // N = 1: ‖(W³)ᵀ‖ · ‖(W²)ᵀ‖ = 3 · 3.5
        let v = rademacher_psi_term(&three, &x, 1, 0.1, 2).unwrap();
        assert!((v - 0.1 * 10.5 * xn).abs() < 1e-14);

        assert!(rademacher_psi_term(&three, &x, 3, 0.1, 2).is_err());
        assert!(rademacher_psi_term(&three, &x, 0, 0.1, 2).is_err());
        assert_eq!(rademacher_psi_term(&three, &x, 1, 0.0, 2).unwrap(), 0.0);
    }

    #[test]
    fn psi_term_averages_pointwise_psi_scale() {
        // with one sample, ‖X‖_{1,2}/n = ‖x‖₁, matching the per-sample Ψ
        let net = random_net(vec![3, 4, 4, 2], 8);
        let x = Matrix::from_rows(&[[0.2, 0.7, 0.1]]).unwrap();
        for layer in 1..3 {
            let a = rademacher_psi_term(&net, &x, layer, 0.03, 1).unwrap();
            let b = psi(&net, x.row(0), layer, 0.03).unwrap();
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn multi_term_reduces_for_single_hidden_layer() {
        // I = {N} with N < L − 1 and unstarred earlier layers gives the single-layer term
        let net = random_net(vec![3, 5, 4, 4, 2], 1);
        let x = Matrix::from_fn(6, 3, |r, c| ((r + 2 * c) % 5) as f64 * 0.2);
        for layer in [1usize, 2] {
            let spec = PerturbationSpec::single(layer, 0.02).unwrap();
            let multi = rademacher_psi_term_multi(&net, &x, &spec, 6).unwrap();
            let single = rademacher_psi_term(&net, &x, layer, 0.02, 6).unwrap();
            assert!((multi - single).abs() <= 1e-12 * single);
        }
    }

    #[test]
    fn multi_term_hand_value() {
        let w1 = Matrix::from_rows(&[[1.0, -2.0], [0.5, 1.0]]).unwrap();
        let w2 = Matrix::from_rows(&[[1.0, 1.0], [-3.0, 0.5]]).unwrap();
        let net = Network::new(Default::default(), vec![w1, w2]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let spec = PerturbationSpec::new([(1, 0.1), (2, 0.2)]).unwrap();
        // L = 2: layer 1 is L − 1 with an empty starred product; layer 2 uses ‖W^{1*}‖.
        // Sign-maximized first-layer columns: col 0 max(|1.1|+|0.6|, |0.9|+|0.4|) = 1.7,
        // col 1 max(|−1.9|+|1.1|, |−2.1|+|0.9|) = 3.0.
        let expected = 2.0 * 2.0 * (3.5 * 0.1) + 2.0 * 2.0 * 0.2 * 3.0;
        let v = rademacher_psi_term_multi(&net, &x, &spec, 1).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((starred_col_norm(&net, &spec, 1) - 3.0).abs() < 1e-12);
        // hidden layers shift by +ε only: columns |1.2|+|−2.8| = 4.0, |1.2|+|0.7| = 1.9
        assert!((starred_col_norm(&net, &spec, 2) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn robust_risk_grows_with_radius() {
        let data = synthetic_blobs(3, 5, 10, 0.1, 2).unwrap();
        let net = random_net(vec![5, 6, 3], 4);
        let a = empirical_robust_risk(&net, &data, 1, 0.0, 0.1).unwrap();
        let b = empirical_robust_risk(&net, &data, 1, 0.5, 0.1).unwrap();
        assert!(a <= b);
        assert_eq!(
            empirical_robust_risk(&net, &data, 1, 100.0, 0.1).unwrap(),
            1.0
        );
    }

    #[test]
    fn bound_terms_add_up() {
        let data = synthetic_blobs(3, 5, 10, 0.1, 2).unwrap();
        let net = random_net(vec![5, 6, 4, 3], 4);
        let g = generalization_bound(&net, &data, 2, 0.01, 1.0, 0.05).unwrap();
        let conf = 3.0 * ((2.0f64 / 0.05).ln() / 60.0).sqrt();
        assert!((g.confidence - conf).abs() < 1e-15);
        assert!(
            (g.total - (g.empirical_risk + g.margin_complexity + g.psi_complexity + g.confidence))
                .abs()
                < 1e-12
        );
        assert!(generalization_bound(&net, &data, 2, 0.01, 0.0, 0.05).is_err());
        assert!(generalization_bound(&net, &data, 2, 0.01, 1.0, 1.0).is_err());
    }

    #[test]
    fn gap_on_identical_sets_is_zero() {
        let data = synthetic_blobs(3, 5, 10, 0.1, 2).unwrap();
        let net = random_net(vec![5, 6, 3], 4);
        assert_eq!(
            empirical_generalization_gap(&net, &data, &data, None).unwrap(),
            0.0
        );
        let cfg = AttackConfig::new(0.05, 5);
        assert_eq!(
            empirical_generalization_gap(&net, &data, &data, Some(&cfg)).unwrap(),
            0.0
        );
    }

    #[test]
    fn identity_statistics() {
        let net = Network::new(Default::default(), vec![Matrix::identity(3); 3]).unwrap();
        let s = bound_statistics(&net);
        assert!((s.prod_spectral - 1.0).abs() < 1e-12);
        assert!((s.spectral_of_product - 1.0).abs() < 1e-12);
        assert!(s.log_ratio.abs() < 1e-12);
    }

    #[test]
    fn statistics_match_svd_oracle() {
        for seed in 0..20 {
            let net = random_net(vec![6, 8, 5, 3], seed);
            let s = bound_statistics(&net);
            let prod: f64 = net.weights().iter().map(svd_top).product();
            let direct = net
                .layer(3)
                .matmul(&net.layer(2).matmul(net.layer(1)).unwrap())
                .unwrap();
            assert!((s.prod_spectral - prod).abs() < 1e-8);
            assert!((s.spectral_of_product - svd_top(&direct)).abs() < 1e-8);
        }
    }

    #[test]
    fn quantize_hand_grid() {
        // 2 bits over [−1, 1]: levels −1, −1/3, 1/3, 1
        let w = Matrix::from_rows(&[[1.0, -1.0, 0.0, 0.5, 0.7, -0.2]]).unwrap();
        let q = quantize_matrix(&w, 2);
        let t = 1.0 / 3.0;
        assert_eq!(q.as_slice(), &[1.0, -1.0, -t, t, 1.0, -t]);
        // 1 bit: levels ±m
        let q1 = quantize_matrix(&w, 1);
        assert_eq!(q1.as_slice(), &[1.0, -1.0, -1.0, 1.0, 1.0, -1.0]);
        // 2 bits over [−3, 3]: levels −3, −1, 1, 3; ±2 are exact midpoints
        let w = Matrix::from_rows(&[[3.0, 2.0, -2.0]]).unwrap();
        assert_eq!(quantize_matrix(&w, 2).as_slice(), &[3.0, 1.0, -1.0]);
    }

    #[test]
    fn quantize_rejects_bad_bits_and_keeps_zero_layers() {
        let net = random_net(vec![3, 4, 2], 0);
        assert!(quantize(&net, 0).is_err());
        assert!(quantize(&net, 33).is_err());
        let z = Matrix::zeros(2, 2);
        assert_eq!(quantize_matrix(&z, 3), z);
    }

    #[test]
    fn thirty_two_bits_preserve_accuracy() {
        let data = synthetic_blobs(3, 5, 20, 0.1, 2).unwrap();
        let net = random_net(vec![5, 6, 3], 4);
        let q = quantize(&net, 32).unwrap();
        assert!((accuracy(&q, &data).unwrap() - accuracy(&net, &data).unwrap()).abs() < 1e-3);
    }

    fn arb_net() -> impl Strategy<Value = Network> {
        (prop::collection::vec(1usize..6, 3..5), any::<u64>())
            .prop_map(|(dims, seed)| random_net(dims, seed))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn psi_term_linear_in_eps_and_inverse_n(net in arb_net(), eps in 0.0f64..1.0, n in 1usize..50, rows in 1usize..5) {
            let x = Matrix::from_fn(rows, net.input_dim(), |r, c| ((r * 7 + c * 3) % 11) as f64 / 11.0);
            let unit = rademacher_psi_term(&net, &x, 1, 1.0, n).unwrap();
            let v = rademacher_psi_term(&net, &x, 1, eps, n).unwrap();
            prop_assert!((v - eps * unit).abs() <= 1e-12 * v.abs().max(1e-300));
            let one = rademacher_psi_term(&net, &x, 1, eps, 1).unwrap();
            prop_assert!((v * n as f64 - one).abs() <= 1e-12 * one.abs().max(1e-300));
        }

        #[test]
        fn log_ratio_nonnegative(net in arb_net()) {
            prop_assert!(bound_statistics(&net).log_ratio >= -1e-10);
        }

        #[test]
        fn quantization_error_within_spacing(net in arb_net(), bits in 1u32..=32) {
            let q = quantize(&net, bits).unwrap();
            for (w, wq) in net.weights().iter().zip(q.weights()) {
                let bound = w.max_abs() / ((1u64 << bits) - 1) as f64;
                prop_assert!(w.max_abs_diff(wq).unwrap() <= bound * (1.0 + 1e-12));
            }
        }

        #[test]
        fn quantization_idempotent_on_coarser_grid(net in arb_net(), bits in 1u32..=8, mult in 1u32..=4) {
            let fine = bits * mult;
            prop_assume!(fine <= 32);
            let q = quantize(&net, bits).unwrap();
            prop_assert_eq!(&quantize(&q, fine).unwrap(), &q);
        }
    }
}
