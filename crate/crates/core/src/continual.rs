//! Task-incremental learning with uncertainty-derived importance:
//! learning-rate adaptation (LRA), per-parameter Bayesian inference (PPBI),
//! and the fine-tuning, feature-freezing and joint-training baselines.

use serde::{Deserialize, Serialize};

use crate::data::TaskSequence;
use crate::elbo::{gaussian_kl, KLWeights, KlMode, PriorStore};
use crate::error::{Error, Result};
use crate::metrics::ResultMatrix;
use crate::model::{Architecture, MPModel, Owner, ParamLayout};
use crate::tensor::SeededRng;
use crate::train::{evaluate, train_task, History, LearningRates, TaskData, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lra,
    Ppbi,
    Ft,
    Ff,
    Jt,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    /// `1/σ²`.
    #[default]
    Variance,
    /// `|μ|/σ²`.
    Snr,
}

fn d_alpha_min() -> f64 {
    1e-12
}
fn d_alpha_max() -> f64 {
    1e-4
}
fn d_tau_min() -> f64 {
    1e-12
}
fn d_tau_max() -> f64 {
    1e-4
}
fn d_tau0() -> f64 {
    1e-5
}
fn d_rho_init() -> f64 {
    -12.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CLConfig {
    pub method: Method,
    #[serde(default)]
    pub metric: ImportanceMetric,
    #[serde(default = "d_alpha_min")]
    pub alpha_min: f64,
    #[serde(default = "d_alpha_max")]
    pub alpha_max: f64,
    /// Uniform rate for the first task (and every task under FT/FF/JT);
    /// `alpha_max` when unset.
    #[serde(default)]
    pub alpha0: Option<f64>,
    #[serde(default = "d_tau_min")]
    pub tau_min: f64,
    #[serde(default = "d_tau_max")]
    pub tau_max: f64,
    #[serde(default = "d_tau0")]
    pub tau0: f64,
    #[serde(default = "d_rho_init")]
    pub rho_init: f64,
    /// Map high importance to α_max / τ_min, the reverse of the default.
    #[serde(default)]
    pub remap_as_printed: bool,
    #[serde(default)]
    pub train: TrainConfig,
}

impl CLConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            metric: ImportanceMetric::default(),
            alpha_min: d_alpha_min(),
            alpha_max: d_alpha_max(),
            alpha0: None,
            tau_min: d_tau_min(),
            tau_max: d_tau_max(),
            tau0: d_tau0(),
            rho_init: d_rho_init(),
            remap_as_printed: false,
            train: TrainConfig::default(),
        }
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0.unwrap_or(self.alpha_max)
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha_min", self.alpha_min),
            ("alpha_max", self.alpha_max),
            ("alpha0", self.alpha0()),
            ("tau_min", self.tau_min),
            ("tau_max", self.tau_max),
            ("tau0", self.tau0),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        if self.alpha_min > self.alpha_max {
            return Err(Error::Invalid(format!(
                "alpha_min {} > alpha_max {}",
                self.alpha_min, self.alpha_max
            )));
        }
        if self.tau_min > self.tau_max {
            return Err(Error::Invalid(format!(
                "tau_min {} > tau_max {}",
                self.tau_min, self.tau_max
            )));
        }
        if !self.rho_init.is_finite() {
            return Err(Error::Invalid("rho_init must be finite".into()));
        }
        self.train.validate()
    }
}

/// Per-element importance of the trunk parameters, in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub iota: Vec<f64>,
    pub metric: ImportanceMetric,
}

pub fn importance(model: &MPModel, metric: ImportanceMetric) -> ImportanceVector {
    let n = model.layout().trunk_len;
    let mu = model.flat_mu();
    let s2 = model.flat_sigma2();
    let iota = (0..n)
        .map(|i| match metric {
            ImportanceMetric::Variance => 1.0 / s2[i],
            ImportanceMetric::Snr => mu[i].abs() / s2[i],
        })
        .collect();
    ImportanceVector { iota, metric }
}

/// Affine map sending the least important entry to `at_least` and the most
/// important to `at_most`. `None` when every entry is equal.
///
/// Results are clamped to the closed interval and the endpoints are hit
/// exactly, so the map is monotone in `iota` even under rounding.
pub fn affine_remap(iota: &[f64], at_least: f64, at_most: f64) -> Option<Vec<f64>> {
    let lo = iota.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = iota.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if iota.is_empty() || !(hi > lo) || !(hi - lo).is_finite() {
        return None;
    }
    let (floor, ceil) = (at_least.min(at_most), at_least.max(at_most));
    let span = at_most - at_least;
    Some(
        iota.iter()
            .map(|&x| {
                let f = (x - lo) / (hi - lo);
                if f >= 1.0 {
                    at_most
                } else if f <= 0.0 {
                    at_least
                } else {
                    (at_least + f * span).clamp(floor, ceil)
                }
            })
            .collect(),
    )
}

/// Trunk rates from importance; heads get `alpha_max`. Batch-norm γ/β carry
/// no variance, so trunk ones are treated as most important.
pub fn remap_lr(
    iota: &ImportanceVector,
    layout: &ParamLayout,
    alpha_min: f64,
    alpha_max: f64,
    as_printed: bool,
) -> Result<LearningRates> {
    check_iota(iota, layout)?;
    let (least, most) = if as_printed {
        (alpha_min, alpha_max)
    } else {
        (alpha_max, alpha_min)
    };
    let trunk = affine_remap(&iota.iota, least, most).unwrap_or_else(|| {
        log::warn!("importance is constant over the trunk; every rate set to alpha_max");
        vec![alpha_max; iota.iota.len()]
    });
    let mut alpha = trunk;
    alpha.resize(layout.total, alpha_max);
    let aux = layout
        .aux
        .iter()
        .map(|(owner, _)| match owner {
            Owner::Trunk => most,
            Owner::Head(_) => alpha_max,
        })
        .collect();
    Ok(LearningRates { alpha, aux })
}

/// Trunk KL weights from importance; heads get `tau_min`.
pub fn remap_tau(
    iota: &ImportanceVector,
    layout: &ParamLayout,
    tau_min: f64,
    tau_max: f64,
    as_printed: bool,
) -> Result<KLWeights> {
    check_iota(iota, layout)?;
    let (least, most) = if as_printed {
        (tau_max, tau_min)
    } else {
        (tau_min, tau_max)
    };
    let mut tau = affine_remap(&iota.iota, least, most).unwrap_or_else(|| {
        log::warn!("importance is constant over the trunk; every KL weight set to tau_min");
        vec![tau_min; iota.iota.len()]
    });
    tau.resize(layout.total, tau_min);
    Ok(KLWeights { tau })
}

fn check_iota(iota: &ImportanceVector, layout: &ParamLayout) -> Result<()> {
    if iota.iota.len() != layout.trunk_len {
        return Err(Error::shape(
            "importance",
            format!(
                "{} entries vs {} trunk parameters",
                iota.iota.len(),
                layout.trunk_len
            ),
        ));
    }
    if iota.iota.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Invalid("importance must be >= 0".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        Some(Self {
            min: s[0],
            median,
            max: s[n - 1],
        })
    }
}

/// Counts of importance values in equal-width bins of `log10(ι)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub log10_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Entries equal to 0, which have no logarithm.
    pub zeros: usize,
}

pub const HISTOGRAM_BINS: usize = 20;

impl Histogram {
    pub fn log10(xs: &[f64], bins: usize) -> Self {
        let logs: Vec<f64> = xs.iter().filter(|&&x| x > 0.0).map(|x| x.log10()).collect();
        let zeros = xs.len() - logs.len();
        if logs.is_empty() || bins == 0 {
            return Self {
                log10_edges: vec![],
                counts: vec![],
                zeros,
            };
        }
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        let w = (hi - lo) / bins as f64;
        let log10_edges = (0..=bins)
            .map(|k| if k == bins { hi } else { lo + k as f64 * w })
            .collect();
        let mut counts = vec![0; bins];
        for l in logs {
            counts[(((l - lo) / w) as usize).min(bins - 1)] += 1;
        }
        Self {
            log10_edges,
            counts,
            zeros,
        }
    }
}

/// What happened while training one task of a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub epochs_run: usize,
    pub history: History,
    /// Test accuracy on tasks `0..=task` after this task.
    pub accuracies: Vec<f64>,
    /// Rates and KL weights the task was trained with.
    pub alpha: Summary,
    pub tau: Summary,
    pub importance: Summary,
    pub importance_histogram: Histogram,
    /// `Σ KL(q‖p)` over every parameter right after a PPBI prior switch.
    pub prior_kl_after_switch: Option<f64>,
    pub results: ResultMatrix,
}

/// State handed to the per-task observer. `alpha`, `weights` and `prior`
/// are those the next task will start from.
pub struct Progress<'a> {
    pub record: &'a TaskRecord,
    pub model: &'a MPModel,
    pub alpha: &'a LearningRates,
    pub weights: &'a KLWeights,
    pub prior: &'a PriorStore,
}

#[derive(Clone, Debug)]
pub struct ContinualRun {
    pub model: MPModel,
    pub results: ResultMatrix,
    pub records: Vec<TaskRecord>,
    pub alpha: LearningRates,
    pub weights: KLWeights,
    pub prior: PriorStore,
    /// Earlier tasks' data was trained on again (JT).
    pub replayed_data: bool,
}

/// A run that stopped at a failing task. `partial` holds the completed
/// tasks, and is `None` when the run was rejected before any training.
#[derive(Debug)]
pub struct Aborted {
    pub task: usize,
    pub error: Error,
    pub partial: Option<Box<ContinualRun>>,
}

impl std::fmt::Display for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "task {} failed: {}", self.task, self.error)
    }
}

impl std::error::Error for Aborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn total_kl(model: &MPModel, prior: &PriorStore) -> Result<f64> {
    let mu = model.flat_mu();
    let s2 = model.flat_sigma2();
    let mut s = 0.0;
    for i in 0..mu.len() {
        s += gaussian_kl(mu[i], s2[i], prior.mu[i], prior.sigma2[i], KlMode::Standard)?;
    }
    Ok(s)
}

fn check_heads(arch: &Architecture, tasks: &TaskSequence) -> Result<()> {
    if tasks.len() < 2 {
        return Err(Error::Invalid(format!(
            "a task sequence needs >= 2 tasks, got {}",
            tasks.len()
        )));
    }
    if arch.heads.len() != tasks.len() {
        return Err(Error::Invalid(format!(
            "{} heads for {} tasks",
            arch.heads.len(),
            tasks.len()
        )));
    }
    Ok(())
}

/// Trains `tasks` in order with one head per task, filling the accuracy
/// matrix as it goes. `observe` runs after every task; an error from it
/// aborts the run like a training failure.
pub fn run_continual(
    arch: &Architecture,
    tasks: &TaskSequence,
    cfg: &CLConfig,
    mut observe: impl FnMut(&Progress) -> Result<()>,
) -> std::result::Result<ContinualRun, Aborted> {
    let start = || -> Result<(MPModel, LearningRates, KLWeights, PriorStore)> {
        cfg.validate()?;
        check_heads(arch, tasks)?;
        let mut rng = SeededRng::new(cfg.train.seed).fork(0);
        let model = MPModel::new(arch.clone(), cfg.rho_init, &mut rng)?;
        let alpha = LearningRates::uniform(&model, cfg.alpha0());
        let weights = KLWeights::uniform(model.layout().total, cfg.tau0);
        let prior = PriorStore::standard_normal(model.layout());
        Ok((model, alpha, weights, prior))
    };
    let (model, alpha, weights, prior) = match start() {
        Ok(s) => s,
        Err(error) => {
            return Err(Aborted {
                task: 0,
                error,
                partial: None,
            })
        }
    };
    let mut run = ContinualRun {
        model,
        results: ResultMatrix::new(tasks.len()),
        records: Vec::new(),
        alpha,
        weights,
        prior,
        replayed_data: cfg.method == Method::Jt && tasks.len() > 1,
    };
    for t in 0..tasks.len() {
        if let Err(error) = step(&mut run, tasks, cfg, t, &mut observe) {
            return Err(Aborted {
                task: t,
                error,
                partial: Some(Box::new(run)),
            });
        }
    }
    Ok(run)
}

fn step(
    run: &mut ContinualRun,
    tasks: &TaskSequence,
    cfg: &CLConfig,
    t: usize,
    observe: &mut impl FnMut(&Progress) -> Result<()>,
) -> Result<()> {
    let parts: Vec<TaskData> = match cfg.method {
        Method::Jt => (0..=t).collect(),
        _ => vec![t],
    }
    .into_iter()
    .map(|k| TaskData {
        task: k,
        train: &tasks.tasks[k].train,
        val: &tasks.tasks[k].val,
    })
    .collect();
    let mut tc = cfg.train.clone();
    tc.seed = cfg.train.seed.wrapping_add(t as u64 + 1);
    let trained_alpha = Summary::of(&run.alpha.alpha).expect("nonempty model");
    let trained_tau = Summary::of(&run.weights.tau).expect("nonempty model");
    let history = train_task(
        &mut run.model,
        &parts,
        &run.prior,
        &run.weights,
        &run.alpha,
        &tc,
    )?;
    log::info!(
        "task {t}: {} epochs, best val {:.4} at epoch {}",
        history.epochs.len(),
        history.best_val_accuracy,
        history.best_epoch
    );

    let mut accuracies = Vec::with_capacity(t + 1);
    for i in 0..=t {
        let a = evaluate(&run.model, &tasks.tasks[i].test, i)?;
        run.results.set(i, t, a)?;
        accuracies.push(a);
    }

    let iota = importance(&run.model, cfg.metric);
    let layout = run.model.layout().clone();
    let mut prior_kl_after_switch = None;
    match cfg.method {
        Method::Lra => {
            run.alpha = remap_lr(
                &iota,
                &layout,
                cfg.alpha_min,
                cfg.alpha_max,
                cfg.remap_as_printed,
            )?;
        }
        Method::Ppbi => {
            run.weights = remap_tau(
                &iota,
                &layout,
                cfg.tau_min,
                cfg.tau_max,
                cfg.remap_as_printed,
            )?;
            run.prior = PriorStore::from_posterior(&run.model);
            prior_kl_after_switch = Some(total_kl(&run.model, &run.prior)?);
        }
        Method::Ff => {
            if t == 0 {
                run.alpha.alpha[..layout.trunk_len].fill(0.0);
                for (rate, (owner, _)) in run.alpha.aux.iter_mut().zip(&layout.aux) {
                    if *owner == Owner::Trunk {
                        *rate = 0.0;
                    }
                }
            }
        }
        Method::Ft | Method::Jt => {}
    }

    let record = TaskRecord {
        task: t,
        epochs_run: history.epochs.len(),
        history,
        accuracies,
        alpha: trained_alpha,
        tau: trained_tau,
        importance: Summary::of(&iota.iota).unwrap_or(Summary {
            min: 0.0,
            median: 0.0,
            max: 0.0,
        }),
        importance_histogram: Histogram::log10(&iota.iota, HISTOGRAM_BINS),
        prior_kl_after_switch,
        results: run.results.prefix(t + 1),
    };
    observe(&Progress {
        record: &record,
        model: &run.model,
        alpha: &run.alpha,
        weights: &run.weights,
        prior: &run.prior,
    })?;
    run.records.push(record);
    Ok(())
}

/// Fine-tuning: uniform rates and KL weights, fixed N(0, 1) prior.
pub fn baseline_ft(
    arch: &Architecture,
    tasks: &TaskSequence,
    cfg: &CLConfig,
) -> std::result::Result<ContinualRun, Aborted> {
    run_continual(
        arch,
        tasks,
        &CLConfig {
            method: Method::Ft,
            ..cfg.clone()
        },
        |_| Ok(()),
    )
}

/// Feature freezing: the trunk stops learning after the first task.
pub fn baseline_ff(
    arch: &Architecture,
    tasks: &TaskSequence,
    cfg: &CLConfig,
) -> std::result::Result<ContinualRun, Aborted> {
    run_continual(
        arch,
        tasks,
        &CLConfig {
            method: Method::Ff,
            ..cfg.clone()
        },
        |_| Ok(()),
    )
}

/// Joint training: task `t` trains on the data of tasks `0..=t`.
pub fn baseline_jt(
    arch: &Architecture,
    tasks: &TaskSequence,
    cfg: &CLConfig,
) -> std::result::Result<ContinualRun, Aborted> {
    run_continual(
        arch,
        tasks,
        &CLConfig {
            method: Method::Jt,
            ..cfg.clone()
        },
        |_| Ok(()),
    )
}
