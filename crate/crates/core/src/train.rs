//! Minibatch training with per-parameter learning rates.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::elbo::{KLWeights, KlMode, PriorStore};
use crate::error::{Error, Result};
use crate::grad::{self, Batch, GradientSet, LossOptions};
use crate::model::MPModel;
use crate::moments::BnMode;
use crate::tensor::{SeededRng, Tensor};

/// Step sizes: one per Gaussian parameter element (shared by its μ and ρ),
/// and one per batch-norm γ/β tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    pub alpha: Vec<f64>,
    pub aux: Vec<f64>,
}

impl LearningRates {
    pub fn uniform(model: &MPModel, alpha: f64) -> Self {
        Self {
            alpha: vec![alpha; model.layout().total],
            aux: vec![alpha; model.layout().aux.len()],
        }
    }

    pub fn validate(&self, model: &MPModel) -> Result<()> {
        let l = model.layout();
        if self.alpha.len() != l.total || self.aux.len() != l.aux.len() {
            return Err(Error::shape(
                "LearningRates",
                format!(
                    "{}+{} rates vs {}+{} parameters",
                    self.alpha.len(),
                    self.aux.len(),
                    l.total,
                    l.aux.len()
                ),
            ));
        }
        if self
            .alpha
            .iter()
            .chain(&self.aux)
            .any(|&a| !(a >= 0.0) || !a.is_finite())
        {
            return Err(Error::Invalid(
                "learning rates must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Update rule applied with the per-parameter rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// `θ ← θ − α·g`.
    Sgd,
    /// Adam moments per coordinate, step `α·m̂/(√v̂ + ε)`; α still sets each
    /// coordinate's step size, and α = 0 leaves it untouched.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn default_max_epochs() -> usize {
    250
}
fn default_batch_size() -> usize {
    500
}
fn default_patience() -> usize {
    5
}
fn default_min_delta() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Epochs without a `min_delta` gain in validation accuracy before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub kl_mode: KlMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: default_max_epochs(),
            batch_size: default_batch_size(),
            patience: default_patience(),
            min_delta: default_min_delta(),
            seed: 0,
            optimizer: Optimizer::default(),
            kl_mode: KlMode::Standard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 || self.batch_size < 1 || self.patience < 1 {
            return Err(Error::Invalid(
                "max_epochs, batch_size and patience must be >= 1".into(),
            ));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Invalid(format!(
                "min_delta {} must be >= 0",
                self.min_delta
            )));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Invalid(
                    "adam needs 0 <= beta < 1 and eps > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

fn check_mirror(model: &MPModel, grads: &GradientSet, alpha: &LearningRates) -> Result<()> {
    if !grads.mirrors(model) {
        return Err(Error::shape(
            "optimizer step",
            "gradient set does not mirror the model",
        ));
    }
    alpha.validate(model)
}

/// Plain gradient step: each coordinate moves by its own α times its gradient.
pub fn sgd_step(model: &mut MPModel, grads: &GradientSet, alpha: &LearningRates) -> Result<()> {
    check_mirror(model, grads, alpha)?;
    let slots = model.layout().slots.clone();
    for ((p, slot), (gm, gr)) in model
        .params_mut()
        .into_iter()
        .zip(&slots)
        .zip(grads.mu.iter().zip(&grads.rho))
    {
        let a = &alpha.alpha[slot.range()];
        for (k, &a) in a.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            p.mu.data_mut()[k] -= a * gm.data()[k];
            p.rho.data_mut()[k] -= a * gr.data()[k];
        }
    }
    for ((t, g), &a) in model
        .aux_params_mut()
        .into_iter()
        .zip(&grads.aux)
        .zip(&alpha.aux)
    {
        if a == 0.0 {
            continue;
        }
        for (v, &g) in t.data_mut().iter_mut().zip(g.data()) {
            *v -= a * g;
        }
    }
    Ok(())
}

/// First and second moment estimates for [`adam_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &MPModel) -> Self {
        let n =
            2 * model.layout().total + model.aux_params().iter().map(|t| t.len()).sum::<usize>();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

pub fn adam_step(
    model: &mut MPModel,
    grads: &GradientSet,
    alpha: &LearningRates,
    state: &mut AdamState,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_mirror(model, grads, alpha)?;
    if state.m.len()
        != 2 * model.layout().total + model.aux_params().iter().map(|t| t.len()).sum::<usize>()
    {
        return Err(Error::shape(
            "adam_step",
            "optimizer state does not match the model",
        ));
    }
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let mut update = |x: &mut f64, g: f64, a: f64, i: usize| {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *x -= a * (*m / c1) / ((*v / c2).sqrt() + eps);
    };
    let total = model.layout().total;
    let slots = model.layout().slots.clone();
    for ((p, slot), (gm, gr)) in model
        .params_mut()
        .into_iter()
        .zip(&slots)
        .zip(grads.mu.iter().zip(&grads.rho))
    {
        for (k, i) in slot.range().enumerate() {
            let a = alpha.alpha[i];
            if a == 0.0 {
                continue;
            }
            update(&mut p.mu.data_mut()[k], gm.data()[k], a, i);
            update(&mut p.rho.data_mut()[k], gr.data()[k], a, total + i);
        }
    }
    let mut i = 2 * total;
    for ((t, g), &a) in model
        .aux_params_mut()
        .into_iter()
        .zip(&grads.aux)
        .zip(&alpha.aux)
    {
        for (x, &g) in t.data_mut().iter_mut().zip(g.data()) {
            if a != 0.0 {
                update(x, g, a, i);
            }
            i += 1;
        }
    }
    Ok(())
}

/// Training and validation data of one task.
#[derive(Clone, Copy, Debug)]
pub struct TaskData<'a> {
    pub task: usize,
    pub train: &'a LabeledDataset,
    pub val: &'a LabeledDataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// Index of the largest value; the first one on ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1000;

/// Predicted classes (argmax of the predictive mean) for every sample.
pub fn predict(model: &MPModel, inputs: &Tensor, task: usize) -> Result<Vec<usize>> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let y = model.forward(&inputs.select_rows(&idx), task)?;
        let k = y.shape()[1];
        out.extend(y.mean.data().chunks_exact(k).map(argmax));
        start = end;
    }
    Ok(out)
}

/// Fraction of samples whose predictive-mean argmax equals the label.
pub fn evaluate(model: &MPModel, dataset: &LabeledDataset, task: usize) -> Result<f64> {
    let (c, n) = correct(model, dataset, task)?;
    Ok(c as f64 / n as f64)
}

fn correct(model: &MPModel, dataset: &LabeledDataset, task: usize) -> Result<(usize, usize)> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let pred = predict(model, &dataset.inputs, task)?;
    let classes = model
        .forward(&dataset.inputs.select_rows(&[0]), task)?
        .shape()[1];
    if let Some(&l) = dataset.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Invalid(format!(
            "label {l} outside head {task}'s {classes} classes"
        )));
    }
    Ok((
        pred.iter()
            .zip(&dataset.labels)
            .filter(|(p, l)| p == l)
            .count(),
        dataset.len(),
    ))
}

fn gather(parts: &[TaskData], picks: &[(usize, usize)]) -> Result<Batch> {
    let sample = parts[picks[0].0].train.sample_shape().to_vec();
    let per: usize = sample.iter().product();
    let mut x = Vec::with_capacity(picks.len() * per);
    let mut labels = Vec::with_capacity(picks.len());
    let mut tasks = Vec::with_capacity(picks.len());
    for &(p, i) in picks {
        let ds = parts[p].train;
        x.extend_from_slice(&ds.inputs.data()[i * per..(i + 1) * per]);
        labels.push(ds.labels[i]);
        tasks.push(parts[p].task);
    }
    let shape: Vec<usize> = std::iter::once(picks.len()).chain(sample).collect();
    Batch::new(Tensor::from_raw(shape, x), labels, tasks)
}

/// Trains until `max_epochs` or a validation plateau, then restores the
/// parameters of the best validation epoch.
///
/// Several parts train jointly: batches mix samples of every part, each
/// scored by its own task head, and validation accuracy is pooled over the
/// parts' validation sets. Coordinates with α = 0 stay bit-identical, and
/// so do the running statistics of batch-norm layers whose γ and β are
/// frozen.
pub fn train_task(
    model: &mut MPModel,
    parts: &[TaskData],
    prior: &PriorStore,
    weights: &KLWeights,
    alpha: &LearningRates,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    alpha.validate(model)?;
    prior.validate(model.layout())?;
    weights.validate(model.layout())?;
    if parts.is_empty() {
        return Err(Error::Empty("task list"));
    }
    for p in parts {
        if p.train.is_empty() || p.val.is_empty() {
            return Err(Error::Empty("train or validation split"));
        }
        model.head(p.task)?;
    }
    let opts = LossOptions {
        kl_mode: cfg.kl_mode,
        bn_mode: BnMode::Train,
    };
    let frozen_bn: Vec<bool> = alpha
        .aux
        .chunks(2)
        .map(|a| a.iter().all(|&r| r == 0.0))
        .collect();
    let mut order: Vec<(usize, usize)> = parts
        .iter()
        .enumerate()
        .flat_map(|(p, d)| (0..d.train.len()).map(move |i| (p, i)))
        .collect();
    let mut rng = SeededRng::new(cfg.seed);
    let mut adam = AdamState::new(model);

    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best = model.clone();
    let mut reference = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for picks in order.chunks(cfg.batch_size) {
            let batch = gather(parts, picks)?;
            let out = grad::backward(model, &batch, prior, weights, &opts)?;
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(model, &out.grads, alpha)?,
                Optimizer::Adam { beta1, beta2, eps } => {
                    adam_step(model, &out.grads, alpha, &mut adam, beta1, beta2, eps)?
                }
            }
            let mut states = model.batchnorm_states_mut();
            for (k, stats) in &out.bn_stats {
                if !frozen_bn[*k] {
                    states[*k].absorb(stats);
                }
            }
            loss_sum += out.loss;
            batches += 1;
        }
        let mut hits = 0;
        let mut total = 0;
        for p in parts {
            let (c, n) = correct(model, p.val, p.task)?;
            hits += c;
            total += n;
        }
        let val_accuracy = hits as f64 / total as f64;
        let train_loss = loss_sum / batches as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.6} val {val_accuracy:.4}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
        if val_accuracy > history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            best = model.clone();
        }
        if val_accuracy > reference + cfg.min_delta {
            reference = val_accuracy;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    *model = best;
    Ok(history)
}
