//! Closed-form evidence lower bound: Gaussian log-likelihood of the
//! predictive moments plus a per-parameter weighted KL to the prior.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MPModel, Owner, ParamLayout};

/// Which KL expression to use.
///
/// `Standard` is KL(q‖p) between Gaussians. `AsPrinted` divides the
/// squared-mean term by σ²_q instead of σ²_p; the two agree when the
/// variances are equal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    #[default]
    Standard,
    AsPrinted,
}

/// Per-parameter prior means and variances, flat in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStore {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl PriorStore {
    pub fn standard_normal(layout: &ParamLayout) -> Self {
        Self {
            mu: vec![0.0; layout.total],
            sigma2: vec![1.0; layout.total],
        }
    }

    /// The current posterior installed as the prior.
    pub fn from_posterior(model: &MPModel) -> Self {
        Self {
            mu: model.flat_mu(),
            sigma2: model.flat_sigma2(),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn validate(&self, layout: &ParamLayout) -> Result<()> {
        if self.mu.len() != layout.total || self.sigma2.len() != layout.total {
            return Err(Error::shape(
                "PriorStore",
                format!(
                    "{}/{} entries vs {} parameters",
                    self.mu.len(),
                    self.sigma2.len(),
                    layout.total
                ),
            ));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("prior variance must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter KL weights τ, flat in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct KLWeights {
    pub tau: Vec<f64>,
}

impl KLWeights {
    pub fn uniform(len: usize, tau: f64) -> Self {
        Self {
            tau: vec![tau; len],
        }
    }

    pub fn validate(&self, layout: &ParamLayout) -> Result<()> {
        if self.tau.len() != layout.total {
            return Err(Error::shape(
                "KLWeights",
                format!("{} weights vs {} parameters", self.tau.len(), layout.total),
            ));
        }
        if self.tau.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::Invalid("KL weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// `−(N/2)ln 2π − ½Σ ln σ² − ½Σ (y − μ)²/σ²` for one sample.
pub fn gaussian_log_likelihood(
    y_onehot: &[f64],
    mean: &[f64],
    var: &[f64],
    var_floor: f64,
) -> Result<f64> {
    let n = y_onehot.len();
    if mean.len() != n || var.len() != n {
        return Err(Error::shape(
            "gaussian_log_likelihood",
            format!("y {n}, mean {}, var {}", mean.len(), var.len()),
        ));
    }
    let ones = y_onehot.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || y_onehot.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!(
            "not a one-hot vector: {y_onehot:?}"
        )));
    }
    if let Some(&v) = var.iter().find(|&&v| !(v >= var_floor)) {
        return Err(Error::BelowFloor {
            op: "gaussian_log_likelihood",
            value: v,
            floor: var_floor,
        });
    }
    Ok(log_likelihood_unchecked(y_onehot, mean, var))
}

pub(crate) fn log_likelihood_unchecked(y: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut log_det = 0.0;
    let mut quad = 0.0;
    for ((&y, &m), &v) in y.iter().zip(mean).zip(var) {
        log_det += v.ln();
        quad += (y - m) * (y - m) / v;
    }
    -(y.len() as f64) / 2.0 * (2.0 * PI).ln() - 0.5 * log_det - 0.5 * quad
}

/// KL between scalar Gaussians `q = N(mu_q, s2_q)` and `p = N(mu_p, s2_p)`.
pub fn gaussian_kl(mu_q: f64, s2_q: f64, mu_p: f64, s2_p: f64, mode: KlMode) -> Result<f64> {
    if !(s2_q > 0.0) || !(s2_p > 0.0) {
        return Err(Error::Invalid(format!(
            "non-positive variance in KL: q {s2_q}, p {s2_p}"
        )));
    }
    Ok(kl_with_grad(mu_q, s2_q, mu_p, s2_p, mode).0)
}

/// KL value and its derivatives with respect to `mu_q` and `s2_q`.
#[inline]
pub(crate) fn kl_with_grad(
    mu_q: f64,
    s2_q: f64,
    mu_p: f64,
    s2_p: f64,
    mode: KlMode,
) -> (f64, f64, f64) {
    let d = mu_q - mu_p;
    let log_ratio = (s2_p / s2_q).ln();
    match mode {
        KlMode::Standard => (
            0.5 * (log_ratio + (s2_q + d * d) / s2_p - 1.0),
            d / s2_p,
            0.5 * (-1.0 / s2_q + 1.0 / s2_p),
        ),
        KlMode::AsPrinted => (
            0.5 * (-1.0 + d * d / s2_q + log_ratio + s2_q / s2_p),
            d / s2_q,
            0.5 * (-d * d / (s2_q * s2_q) - 1.0 / s2_q + 1.0 / s2_p),
        ),
    }
}

/// Flat index ranges covered by the KL term: the trunk plus the heads of
/// `tasks`.
pub(crate) fn active_ranges(layout: &ParamLayout, tasks: &[usize]) -> Vec<std::ops::Range<usize>> {
    layout
        .slots
        .iter()
        .filter(|s| match s.owner {
            Owner::Trunk => true,
            Owner::Head(h) => tasks.contains(&h),
        })
        .map(|s| s.range())
        .collect()
}

/// `Σ τ_i·KL_i` over the trunk and the heads of `tasks`.
pub fn weighted_kl(
    model: &MPModel,
    prior: &PriorStore,
    weights: &KLWeights,
    tasks: &[usize],
    mode: KlMode,
) -> Result<f64> {
    let layout = model.layout();
    prior.validate(layout)?;
    weights.validate(layout)?;
    let mu = model.flat_mu();
    let s2 = model.flat_sigma2();
    let mut total = 0.0;
    for r in active_ranges(layout, tasks) {
        for i in r {
            if weights.tau[i] != 0.0 {
                total +=
                    weights.tau[i] * gaussian_kl(mu[i], s2[i], prior.mu[i], prior.sigma2[i], mode)?;
            }
        }
    }
    Ok(total)
}

/// `loglik − Σ τ_i·KL_i`, with the KL over the trunk and the heads of
/// `tasks`.
pub fn elbo(
    loglik: f64,
    model: &MPModel,
    prior: &PriorStore,
    weights: &KLWeights,
    tasks: &[usize],
    mode: KlMode,
) -> Result<f64> {
    Ok(loglik - weighted_kl(model, prior, weights, tasks, mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn loglik_zero_residual_unit_variance() {
        let v = gaussian_log_likelihood(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], 1e-6).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn loglik_direct_formula() {
        let v = gaussian_log_likelihood(&[1.0, 0.0], &[0.5, 0.5], &[0.25, 0.25], 1e-6).unwrap();
        let want = -(2.0 * PI).ln() + 4f64.ln() - 1.0;
        assert!((v - want).abs() < 1e-14);
    }

    #[test]
    fn loglik_decreases_when_variance_grows_at_zero_residual() {
        let y = [0.0, 1.0, 0.0];
        let base = gaussian_log_likelihood(&y, &y, &[0.1; 3], 1e-6).unwrap();
        let scaled = gaussian_log_likelihood(&y, &y, &[0.3; 3], 1e-6).unwrap();
        assert!(scaled < base);
    }

    #[test]
    fn loglik_rejects_floor_violation_and_bad_labels() {
        assert!(matches!(
            gaussian_log_likelihood(&[1.0, 0.0], &[1.0, 0.0], &[1e-7, 1.0], 1e-6),
            Err(Error::BelowFloor { .. })
        ));
        assert!(gaussian_log_likelihood(&[1.0, 1.0], &[1.0, 0.0], &[1.0, 1.0], 1e-6).is_err());
    }

    #[test]
    fn kl_hand_cases() {
        for mode in [KlMode::Standard, KlMode::AsPrinted] {
            assert_eq!(gaussian_kl(0.3, 0.7, 0.3, 0.7, mode).unwrap(), 0.0);
            assert!((gaussian_kl(1.0, 1.0, 0.0, 1.0, mode).unwrap() - 0.5).abs() <= 1e-12);
        }
        let s = gaussian_kl(1.0, 2.0, 0.0, 1.0, KlMode::Standard).unwrap();
        let p = gaussian_kl(1.0, 2.0, 0.0, 1.0, KlMode::AsPrinted).unwrap();
        assert!((s - 0.5 * (0.5f64.ln() + 2.0)).abs() < 1e-15);
        assert!((p - 0.5 * (1.5 + 0.5f64.ln())).abs() < 1e-15);
        assert!((s - 0.6534).abs() < 1e-4 && (p - 0.4034).abs() < 1e-4);
        assert!(gaussian_kl(0.0, 0.0, 0.0, 1.0, KlMode::Standard).is_err());
    }

    #[test]
    fn kl_gradient_matches_central_difference() {
        let h = 1e-6;
        for mode in [KlMode::Standard, KlMode::AsPrinted] {
            let (mq, sq, mp, sp) = (0.4, 0.3, -0.2, 1.7);
            let (_, dmu, ds2) = kl_with_grad(mq, sq, mp, sp, mode);
            let f = |m: f64, s: f64| kl_with_grad(m, s, mp, sp, mode).0;
            let nm = (f(mq + h, sq) - f(mq - h, sq)) / (2.0 * h);
            let ns = (f(mq, sq + h) - f(mq, sq - h)) / (2.0 * h);
            assert!((dmu - nm).abs() < 1e-8, "{mode:?}");
            assert!((ds2 - ns).abs() < 1e-8, "{mode:?}");
        }
    }

    #[test]
    fn kl_descent_reaches_prior() {
        // one parameter pulled by KL alone
        let (mut mu, mut rho) = (2.0, -3.0f64);
        let (mp, sp) = (0.5, 0.8);
        for _ in 0..20_000 {
            let s2 = crate::moments::softplus(rho);
            let (_, dm, ds) = kl_with_grad(mu, s2, mp, sp, KlMode::Standard);
            mu -= 0.05 * dm;
            rho -= 0.05 * ds * crate::moments::sigmoid(rho);
        }
        assert!((mu - mp).abs() < 1e-6);
        assert!((crate::moments::softplus(rho) - sp).abs() < 1e-6);
    }

    #[test]
    fn elbo_limits_and_linearity() {
        let m = MPModel::new(
            Architecture::mlp(&[3], &[4], &[2]),
            -5.0,
            &mut SeededRng::new(2),
        )
        .unwrap();
        let l = m.layout().clone();
        let prior = PriorStore::standard_normal(&l);
        let zero = KLWeights::uniform(l.total, 0.0);
        assert_eq!(
            elbo(-3.0, &m, &prior, &zero, &[0], KlMode::Standard).unwrap(),
            -3.0
        );

        let own = PriorStore::from_posterior(&m);
        let big = KLWeights::uniform(l.total, 7.0);
        assert_eq!(
            elbo(-3.0, &m, &own, &big, &[0], KlMode::Standard).unwrap(),
            -3.0
        );

        let tau0 = 1e-3;
        let w = KLWeights::uniform(l.total, tau0);
        let (mu, s2) = (m.flat_mu(), m.flat_sigma2());
        let raw: f64 = (0..l.total)
            .map(|i| kl_with_grad(mu[i], s2[i], 0.0, 1.0, KlMode::Standard).0)
            .sum();
        let got = elbo(-3.0, &m, &prior, &w, &[0], KlMode::Standard).unwrap();
        assert!((got - (-3.0 - tau0 * raw)).abs() < 1e-9 * raw.abs().max(1.0));

        // linear in a single tau
        let mut w2 = w.clone();
        w2.tau[5] += 1.0;
        let d = elbo(-3.0, &m, &prior, &w2, &[0], KlMode::Standard).unwrap() - got;
        let k5 = kl_with_grad(mu[5], s2[5], 0.0, 1.0, KlMode::Standard).0;
        assert!((d + k5).abs() < 1e-9 * k5.max(1.0));

        assert!(elbo(
            0.0,
            &m,
            &prior,
            &KLWeights::uniform(3, 1.0),
            &[0],
            KlMode::Standard
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn standard_kl_is_nonnegative(
            mq in -10.0f64..10.0, lq in -8.0f64..4.0, mp in -10.0f64..10.0, lp in -8.0f64..4.0
        ) {
            let v = gaussian_kl(mq, lq.exp(), mp, lp.exp(), KlMode::Standard).unwrap();
            prop_assert!(v >= -1e-12 * (1.0 + v.abs()));
        }
    }
}
