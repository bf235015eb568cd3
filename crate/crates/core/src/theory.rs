//! Closed-form generalization-bound evaluators.
//!
//! Every logarithm is natural. The functions are pure so they can be driven
//! with hypothetical architectures as well as measured networks.

use serde::{Deserialize, Serialize};

use crate::augment::UncertaintySet;
use crate::autodiff::kernels::softmax_rows;
use crate::autodiff::Tensor;
use crate::losses::{aggregate, ce_hard, ce_soft, check_eps, Aggregator};
use crate::model::{conv_operator_norm, network_distance, spectral_norm, LayerKind, Network};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct BoundConfig {
    /// Output clamp.
    pub eps: f64,
    /// Failure probability.
    pub delta: f64,
    pub n_labeled: f64,
    pub n_unlabeled: f64,
    pub n_classes: f64,
    /// Variants per uncertainty set.
    pub k: f64,
    /// Parameter count of the classifier.
    pub params: f64,
    /// Parameter count with a single output unit.
    pub params_single: f64,
    /// Bound on raw input norms.
    pub chi: f64,
    /// Bound on transformed input norms.
    pub chi_tau: f64,
    /// Budget on the distance to the initialization.
    pub beta_dist: f64,
    /// Slack on the initial operator norms.
    pub nu: f64,
    pub c0: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            delta: 0.05,
            n_labeled: 40.0,
            n_unlabeled: 50_000.0,
            n_classes: 10.0,
            k: 3.0,
            params: 1e5,
            params_single: 1e5,
            chi: 1.0,
            chi_tau: 1.0,
            beta_dist: 2.0,
            nu: 0.0,
            c0: 1.0,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        check_eps(self.eps)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta {} outside (0, 1)",
                self.delta
            )));
        }
        for (name, v) in [
            ("n-unlabeled", self.n_unlabeled),
            ("n-classes", self.n_classes),
            ("k", self.k),
            ("params", self.params),
            ("params-single", self.params_single),
            ("c0", self.c0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.n_labeled >= 2.0 && self.n_labeled.is_finite()) {
            return Err(Error::Config(format!(
                "n-labeled must be at least 2, got {}",
                self.n_labeled
            )));
        }
        for (name, v) in [
            ("chi", self.chi),
            ("chi-tau", self.chi_tau),
            ("beta-dist", self.beta_dist),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if !(self.nu > -1.0 && self.nu.is_finite()) {
            return Err(Error::Config(format!("nu must exceed -1, got {}", self.nu)));
        }
        Ok(())
    }

    /// Sets a field by its kebab-case name (used by parameter sweeps).
    pub fn set(&mut self, field: &str, value: f64) -> Result<()> {
        let slot = match field {
            "eps" => &mut self.eps,
            "delta" => &mut self.delta,
            "n-labeled" => &mut self.n_labeled,
            "n-unlabeled" => &mut self.n_unlabeled,
            "n-classes" => &mut self.n_classes,
            "k" => &mut self.k,
            "params" => &mut self.params,
            "params-single" => &mut self.params_single,
            "chi" => &mut self.chi,
            "chi-tau" => &mut self.chi_tau,
            "beta-dist" => &mut self.beta_dist,
            "nu" => &mut self.nu,
            "c0" => &mut self.c0,
            other => return Err(Error::Config(format!("unknown bound field `{other}`"))),
        };
        *slot = value;
        Ok(())
    }
}

/// Every quantity entering the CNN bound, itemized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct BoundReport {
    pub c1: f64,
    pub c2: f64,
    pub c_n: f64,
    pub c_m: f64,
    /// Multi-output complexity of the labeled class.
    pub psi_small: f64,
    pub psi_big: f64,
    pub risk_labeled: f64,
    pub risk_unlabeled: f64,
    /// `C1 · R̂_DU`.
    pub term_unlabeled_risk: f64,
    /// `C2 (1 + C0/2) · R̂_DL`.
    pub term_labeled_risk: f64,
    /// `C1 · (K-summand + deviation)`.
    pub term_unlabeled_complexity: f64,
    /// `(3 C0 C2 / 2) · Ψ`.
    pub term_labeled_complexity: f64,
    /// The part of the unlabeled complexity term proportional to `K`.
    pub k_summand: f64,
    pub unlabeled_deviation: f64,
    pub total: f64,
}

/// `(C1, C2)` for `n_c` classes and clamp `eps`.
pub fn constants(n_classes: f64, eps: f64) -> Result<(f64, f64)> {
    check_eps(eps)?;
    if !(n_classes > 0.0) {
        return Err(Error::config("class count must be positive"));
    }
    let c1 = 1.0 / (n_classes * eps * (1.0 / (1.0 - eps)).ln());
    Ok((c1, 1.0 / std::f64::consts::LN_2))
}

/// `3χ · e^{β/(1+ν)}`.
pub fn capacity_constant(chi: f64, beta_dist: f64, nu: f64) -> f64 {
    3.0 * chi * (beta_dist / (1.0 + nu)).exp()
}

fn checked_ln(arg: f64, what: &str) -> Result<f64> {
    if !(arg > 1.0) {
        return Err(Error::Config(format!(
            "{what}: logarithm argument {arg} is not above 1, the bound is vacuous"
        )));
    }
    Ok(arg.ln())
}

/// Rademacher bound for multi-output networks.
pub fn rademacher_multi_bound(
    n: f64,
    n_classes: f64,
    params: f64,
    chi: f64,
    beta_dist: f64,
    nu: f64,
) -> Result<f64> {
    let m = n * n_classes;
    if !(m > 0.0) {
        return Err(Error::config("sample and class counts must be positive"));
    }
    let root = m.sqrt();
    let log = checked_ln(
        capacity_constant(chi, beta_dist, nu) * root,
        "multi-output bound",
    )?;
    Ok(4.0 / root + 12.0 / root * (params * log).sqrt())
}

/// Rademacher bound for single-output networks; pass `χ_τ` for the
/// transformed-input version.
pub fn rademacher_single_bound(
    n: f64,
    params_single: f64,
    chi: f64,
    beta_dist: f64,
    nu: f64,
) -> Result<f64> {
    if !(n > 0.0) {
        return Err(Error::config("sample count must be positive"));
    }
    let log = checked_ln(
        capacity_constant(chi, beta_dist, nu) * n,
        "single-output bound",
    )?;
    Ok(4.0 / n.sqrt() + 12.0 / n.sqrt() * (params_single * log).sqrt())
}

/// `Ψ` built from the multi-output complexity `psi_small`.
pub fn psi_big(n_labeled: f64, n_classes: f64, delta: f64, psi_small: f64) -> Result<f64> {
    let e = std::f64::consts::E;
    let lnln = checked_ln(n_labeled, "log log n_l")?.ln();
    Ok(2.0
        * (n_classes.sqrt() * (n_labeled * n_classes * e).ln().powf(1.5) * psi_small
            + 1.0 / n_labeled.sqrt())
        + (n_classes * e).ln() / n_labeled * ((2.0 / delta).ln() + lnln))
}

fn deviation(delta: f64, n: f64) -> f64 {
    3.0 * ((4.0 / delta).ln() / (2.0 * n)).sqrt()
}

/// The CNN bound with every term reported.
pub fn generalization_bound(
    cfg: &BoundConfig,
    risk_labeled: f64,
    risk_unlabeled: f64,
) -> Result<BoundReport> {
    cfg.validate()?;
    if !(risk_labeled >= 0.0 && risk_unlabeled >= 0.0) {
        return Err(Error::config("empirical risks must be nonnegative"));
    }
    let (c1, c2) = constants(cfg.n_classes, cfg.eps)?;
    let growth = (cfg.beta_dist / (1.0 + cfg.nu)).exp();
    let c_n = 3.0 * cfg.chi * growth;
    let c_m = 3.0 * cfg.chi.max(cfg.chi_tau) * growth;

    let psi_small = rademacher_multi_bound(
        cfg.n_labeled,
        cfg.n_classes,
        cfg.params,
        cfg.chi,
        cfg.beta_dist,
        cfg.nu,
    )?;
    let psi_big = psi_big(cfg.n_labeled, cfg.n_classes, cfg.delta, psi_small)?;

    let n_u = cfg.n_unlabeled;
    let log_m = checked_ln(c_m * n_u, "unlabeled complexity")?;
    let k_core = 16.0 * cfg.k * cfg.n_classes / n_u.sqrt() * (1.0 - cfg.eps) / cfg.eps
        * (1.0 + 3.0 * (cfg.params_single * log_m).sqrt());
    let dev_u = deviation(cfg.delta, n_u);

    let term_unlabeled_risk = c1 * risk_unlabeled;
    let term_labeled_risk = c2 * (1.0 + cfg.c0 / 2.0) * risk_labeled;
    let term_unlabeled_complexity = c1 * (k_core + dev_u);
    let term_labeled_complexity = 1.5 * cfg.c0 * c2 * psi_big;
    let total = term_unlabeled_risk
        + term_labeled_risk
        + term_unlabeled_complexity
        + term_labeled_complexity;
    Ok(BoundReport {
        c1,
        c2,
        c_n,
        c_m,
        psi_small,
        psi_big,
        risk_labeled,
        risk_unlabeled,
        term_unlabeled_risk,
        term_labeled_risk,
        term_unlabeled_complexity,
        term_labeled_complexity,
        k_summand: c1 * k_core,
        unlabeled_deviation: c1 * dev_u,
        total,
    })
}

/// Inputs of the general bound, with caller-supplied complexities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GeneralBoundInputs {
    pub c1: f64,
    pub c2: f64,
    pub risk_labeled: f64,
    pub risk_unlabeled: f64,
    pub rad_labeled: f64,
    pub rad_unlabeled: f64,
    pub n_labeled: f64,
    pub n_unlabeled: f64,
    pub delta: f64,
}

/// Sum of the risk, complexity and deviation terms of the general bound.
pub fn assemble_general_bound(inp: &GeneralBoundInputs) -> Result<f64> {
    if !(inp.delta > 0.0 && inp.delta < 1.0) {
        return Err(Error::Config(format!("delta {} outside (0, 1)", inp.delta)));
    }
    if !(inp.n_labeled > 0.0 && inp.n_unlabeled > 0.0) {
        return Err(Error::config("sample counts must be positive"));
    }
    Ok(inp.c1 * inp.risk_unlabeled
        + inp.c2 * inp.risk_labeled
        + 2.0 * inp.c2 * inp.rad_labeled
        + 2.0 * inp.c1 * inp.rad_unlabeled
        + inp.c2 * deviation(inp.delta, inp.n_labeled)
        + inp.c1 * deviation(inp.delta, inp.n_unlabeled))
}

/// The maximizing simplex weights of `Σ w_j ℓ_j` and the optimal value.
pub fn max_simplex_weights(losses: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (value, idx) = aggregate(losses, Aggregator::Max)?;
    let mut w = vec![0.0; losses.len()];
    w[idx] = 1.0;
    Ok((w, value))
}

/// Mean hard cross-entropy of the network on a labeled set.
pub fn empirical_risk_labeled(net: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::config("labeled set is empty"));
    }
    let scores = net.forward(x)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += ce_hard(scores.row(i), y)?;
    }
    Ok(total / labels.len() as f64)
}

/// Mean over samples of the worst clamped soft cross-entropy between a
/// variant's prediction and the sample's own prediction.
pub fn empirical_risk_unlabeled_worst(
    net: &Network,
    x: &Tensor,
    usets: &[UncertaintySet],
    eps: f64,
) -> Result<f64> {
    worst_or_mean(net, x, usets, eps, Aggregator::Max)
}

/// Same as [`empirical_risk_unlabeled_worst`] with any aggregator.
pub fn empirical_risk_unlabeled(
    net: &Network,
    x: &Tensor,
    usets: &[UncertaintySet],
    eps: f64,
    mode: Aggregator,
) -> Result<f64> {
    worst_or_mean(net, x, usets, eps, mode)
}

fn worst_or_mean(
    net: &Network,
    x: &Tensor,
    usets: &[UncertaintySet],
    eps: f64,
    mode: Aggregator,
) -> Result<f64> {
    check_eps(eps)?;
    let n = x.rows();
    if n == 0 {
        return Err(Error::config("unlabeled set is empty"));
    }
    if usets.len() != n {
        return Err(Error::Config(format!(
            "{} samples but {} uncertainty sets",
            n,
            usets.len()
        )));
    }
    let n_c = net.classes();
    let own = softmax_rows(net.forward(x)?.data(), n_c);
    let mut total = 0.0;
    for (i, set) in usets.iter().enumerate() {
        if set.variants.is_empty() {
            return Err(Error::Config(format!(
                "sample {i} has an empty uncertainty set"
            )));
        }
        let vx = Tensor::new(vec![set.k(), net.input_len()], set.variants.concat())?;
        let vp = softmax_rows(net.forward(&vx)?.data(), n_c);
        let target = &own[i * n_c..(i + 1) * n_c];
        let row = vp
            .chunks(n_c)
            .map(|p| ce_soft(p, target, eps))
            .collect::<Result<Vec<_>>>()?;
        total += aggregate(&row, mode)?.0;
    }
    Ok(total / n as f64)
}

/// Measured constants of the bound for a trained network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct NormBounds {
    pub chi: f64,
    pub chi_tau: f64,
    pub nu: f64,
    pub beta_dist: f64,
}

/// Largest operator norm over the layers of a network.
pub fn max_operator_norm(net: &Network) -> Result<f64> {
    let mut best: f64 = 0.0;
    for layer in net.layers() {
        let norm = match &layer.kind {
            LayerKind::Conv {
                height,
                width,
                padding,
                ..
            } => conv_operator_norm(&layer.weight, *height, *width, *padding)?,
            LayerKind::Dense { .. } => spectral_norm(&layer.weight)?,
        };
        best = best.max(norm);
    }
    Ok(best)
}

fn max_row_norm(x: &Tensor) -> f64 {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `χ` and `χ_τ` as the largest raw and transformed input norms, `ν` from
/// the initial operator norms, and `β` as the distance travelled from the
/// initialization.
pub fn measure_norm_bounds(
    init: &Network,
    current: &Network,
    raw: &Tensor,
    transformed: &Tensor,
) -> Result<NormBounds> {
    Ok(NormBounds {
        chi: max_row_norm(raw),
        chi_tau: max_row_norm(transformed),
        nu: (max_operator_norm(init)? - 1.0).max(0.0),
        beta_dist: network_distance(&current.snapshot(), &init.snapshot())?,
    })
}
