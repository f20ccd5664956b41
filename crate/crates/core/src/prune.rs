//! Global unstructured pruning of the trunk by parameter uncertainty.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{MPModel, Owner};
use crate::moments::inverse_softplus;
use crate::tensor::SeededRng;
use crate::train::evaluate;

/// Variance given to a pruned parameter; small enough to vanish from the
/// variance path without dividing by zero anywhere.
pub const PRUNED_SIGMA2: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PruneCriterion {
    /// `|μ|/σ²`, smallest first.
    Snr,
    /// Largest σ² first.
    Variance,
    /// Smallest `|μ|` first.
    Magnitude,
    Random {
        seed: u64,
    },
}

impl PruneCriterion {
    pub fn name(&self) -> String {
        match self {
            PruneCriterion::Snr => "snr".into(),
            PruneCriterion::Variance => "variance".into(),
            PruneCriterion::Magnitude => "magnitude".into(),
            PruneCriterion::Random { seed } => format!("random_{seed}"),
        }
    }
}

/// Trunk parameter indices, least important (pruned first) to most.
/// Equal scores keep index order.
pub fn rank_parameters(model: &MPModel, criterion: PruneCriterion) -> Vec<usize> {
    let n = model.layout().trunk_len;
    let mu = model.flat_mu();
    let s2 = model.flat_sigma2();
    let mut order: Vec<usize> = (0..n).collect();
    match criterion {
        PruneCriterion::Snr => {
            order.sort_by(|&a, &b| (mu[a].abs() / s2[a]).total_cmp(&(mu[b].abs() / s2[b])))
        }
        PruneCriterion::Variance => order.sort_by(|&a, &b| s2[b].total_cmp(&s2[a])),
        PruneCriterion::Magnitude => order.sort_by(|&a, &b| mu[a].abs().total_cmp(&mu[b].abs())),
        PruneCriterion::Random { seed } => order = SeededRng::new(seed).permutation(n),
    }
    order
}

/// Copy of `model` with the first `⌊fraction·len⌋` entries of `order` set to
/// `μ = 0`, `σ² = PRUNED_SIGMA2` and excluded from further training.
pub fn prune(model: &MPModel, order: &[usize], fraction: f64) -> Result<MPModel> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Invalid(format!(
            "prune fraction {fraction} outside [0, 1]"
        )));
    }
    let trunk_len = model.layout().trunk_len;
    if let Some(&i) = order.iter().find(|&&i| i >= trunk_len) {
        return Err(Error::Invalid(format!(
            "index {i} is not a trunk parameter ({trunk_len} in trunk)"
        )));
    }
    let k = (fraction * order.len() as f64).floor() as usize;
    let chosen = &order[..k];
    let mut out = model.clone();
    let slots = out.layout().slots.clone();
    let rho = inverse_softplus(PRUNED_SIGMA2);
    {
        let mut params = out.params_mut();
        for &flat in chosen {
            let s = slots
                .iter()
                .position(|s| s.owner == Owner::Trunk && s.range().contains(&flat))
                .expect("trunk index has a slot");
            let j = flat - slots[s].offset;
            params[s].mu.data_mut()[j] = 0.0;
            params[s].rho.data_mut()[j] = rho;
        }
    }
    let mut mask = model.pruned().to_vec();
    mask.extend_from_slice(chosen);
    out.set_pruned(mask);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneCurve {
    pub criterion: PruneCriterion,
    /// Validation accuracy of the unpruned model.
    pub baseline: f64,
    pub fractions: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Percentage points lost against `baseline`.
    pub accuracy_drop: Vec<f64>,
}

/// One curve per criterion, in the order given.
pub fn prune_sweep(
    model: &MPModel,
    criteria: &[PruneCriterion],
    fractions: &[f64],
    val: &LabeledDataset,
    task: usize,
) -> Result<Vec<PruneCurve>> {
    if fractions.is_empty() || fractions.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid(
            "prune fractions must be nonempty and strictly increasing".into(),
        ));
    }
    let baseline = evaluate(model, val, task)?;
    let mut curves = Vec::with_capacity(criteria.len());
    for &criterion in criteria {
        let order = rank_parameters(model, criterion);
        let mut accuracy = Vec::with_capacity(fractions.len());
        for &f in fractions {
            accuracy.push(evaluate(&prune(model, &order, f)?, val, task)?);
        }
        let accuracy_drop = accuracy.iter().map(|a| 100.0 * (baseline - a)).collect();
        curves.push(PruneCurve {
            criterion,
            baseline,
            fractions: fractions.to_vec(),
            accuracy,
            accuracy_drop,
        });
    }
    Ok(curves)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfMetric {
    /// `10·log10(|μ|/σ²)`; `-inf` for `μ = 0`.
    SnrDb,
    /// `|μ|/σ²`.
    Snr,
    Variance,
}

impl CdfMetric {
    pub fn name(&self) -> &'static str {
        match self {
            CdfMetric::SnrDb => "snr_db",
            CdfMetric::Snr => "snr",
            CdfMetric::Variance => "variance",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value: f64,
    pub cum_fraction: f64,
}

/// Empirical CDF over the trunk: one point per distinct value, carrying the
/// fraction of parameters at or below it.
pub fn uncertainty_cdf(model: &MPModel, metric: CdfMetric) -> Vec<CdfPoint> {
    let n = model.layout().trunk_len;
    let mu = model.flat_mu();
    let s2 = model.flat_sigma2();
    let mut v: Vec<f64> = (0..n)
        .map(|i| match metric {
            CdfMetric::SnrDb => 10.0 * (mu[i].abs() / s2[i]).log10(),
            CdfMetric::Snr => mu[i].abs() / s2[i],
            CdfMetric::Variance => s2[i],
        })
        .collect();
    v.sort_by(f64::total_cmp);
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let p = CdfPoint {
            value: x,
            cum_fraction: (i + 1) as f64 / n as f64,
        };
        match out.last_mut() {
            Some(last) if last.value == x => *last = p,
            _ => out.push(p),
        }
    }
    out
}

/// Fraction of trunk parameters with `σ² >= threshold`.
pub fn fraction_with_variance_at_least(model: &MPModel, threshold: f64) -> f64 {
    let n = model.layout().trunk_len;
    let s2 = model.flat_sigma2();
    s2[..n].iter().filter(|&&s| s >= threshold).count() as f64 / n as f64
}
