//! Reverse-mode gradients of the loss `−mean_batch(loglik) + Σ τ·KL`
//! through every moment-propagation rule, and a central finite-difference
//! harness to check them.

use crate::elbo::{self, KLWeights, KlMode, PriorStore};
use crate::error::{Error, Result};
use crate::model::{LayerCache, LayerParamGrads, MPModel, Owner};
use crate::moments::{sigmoid, BnBatchStats, BnMode, MomentPair};
use crate::tensor::Tensor;

/// A minibatch. Each sample names the task whose head scores it, so
/// joint training can mix tasks in one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub tasks: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, tasks: Vec<usize>) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        if labels.len() != n || tasks.len() != n {
            return Err(Error::shape(
                "Batch",
                format!("{n} inputs, {} labels, {} tasks", labels.len(), tasks.len()),
            ));
        }
        Ok(Self {
            inputs,
            labels,
            tasks,
        })
    }

    pub fn single_task(inputs: Tensor, labels: Vec<usize>, task: usize) -> Result<Self> {
        let n = labels.len();
        Self::new(inputs, labels, vec![task; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct task ids, ascending.
    pub fn task_set(&self) -> Vec<usize> {
        let mut t = self.tasks.clone();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// Loss gradients, one tensor per parameter tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    /// d𝓛/dμ per Gaussian parameter, canonical order.
    pub mu: Vec<Tensor>,
    /// d𝓛/dρ per Gaussian parameter, canonical order.
    pub rho: Vec<Tensor>,
    /// d𝓛/dγ and d𝓛/dβ per batch-norm layer.
    pub aux: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(model: &MPModel) -> Self {
        let mu: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            rho: mu.clone(),
            mu,
            aux: model
                .aux_params()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn mirrors(&self, model: &MPModel) -> bool {
        let ps = model.params();
        let aux = model.aux_params();
        self.mu.len() == ps.len()
            && self.rho.len() == ps.len()
            && self.aux.len() == aux.len()
            && ps
                .iter()
                .zip(&self.mu)
                .zip(&self.rho)
                .all(|((p, m), r)| p.shape() == m.shape() && p.shape() == r.shape())
            && aux
                .iter()
                .zip(&self.aux)
                .all(|(a, g)| a.shape() == g.shape())
    }
}

/// How the loss is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub kl_mode: KlMode,
    pub bn_mode: BnMode,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            kl_mode: KlMode::Standard,
            bn_mode: BnMode::Train,
        }
    }
}

/// Result of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub loss: f64,
    /// Batch-mean negative log-likelihood.
    pub nll: f64,
    /// Weighted KL over the trunk and the batch's heads.
    pub kl: f64,
    pub grads: GradientSet,
    /// Train-mode batch statistics, keyed by batch-norm ordinal.
    pub bn_stats: Vec<(usize, BnBatchStats)>,
}

struct HeadTape {
    task: usize,
    rows: Vec<usize>,
    caches: Vec<LayerCache>,
    out: MomentPair,
}

fn layer_tag(owner: Owner, i: usize, name: &str) -> String {
    match owner {
        Owner::Trunk => format!("trunk layer {i} ({name})"),
        Owner::Head(h) => format!("head {h} layer {i} ({name})"),
    }
}

fn check_finite(y: &MomentPair, owner: Owner, i: usize, name: &str) -> Result<()> {
    let ok = y
        .mean
        .data()
        .iter()
        .chain(y.var.data())
        .all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite(layer_tag(owner, i, name)))
    }
}

/// Ordinal of each batch-norm layer and slot index of each Gaussian layer,
/// for the trunk and every head.
struct Index {
    trunk_slot: Vec<Option<usize>>,
    trunk_bn: Vec<Option<usize>>,
    head_slot: Vec<Vec<Option<usize>>>,
    head_bn: Vec<Vec<Option<usize>>>,
}

impl Index {
    fn new(model: &MPModel) -> Self {
        let mut slot = 0;
        let mut bn = 0;
        let mut walk = |layers: &[crate::model::Layer]| {
            let mut s = Vec::with_capacity(layers.len());
            let mut b = Vec::with_capacity(layers.len());
            for l in layers {
                match l {
                    crate::model::Layer::Linear { .. } | crate::model::Layer::Conv2d { .. } => {
                        s.push(Some(slot));
                        slot += 2;
                        b.push(None);
                    }
                    crate::model::Layer::BatchNorm(_) => {
                        s.push(None);
                        b.push(Some(bn));
                        bn += 1;
                    }
                    _ => {
                        s.push(None);
                        b.push(None);
                    }
                }
            }
            (s, b)
        };
        let (trunk_slot, trunk_bn) = walk(model.trunk());
        let mut head_slot = Vec::new();
        let mut head_bn = Vec::new();
        for h in 0..model.num_heads() {
            let (s, b) = walk(model.head(h).expect("head index in range"));
            head_slot.push(s);
            head_bn.push(b);
        }
        Self {
            trunk_slot,
            trunk_bn,
            head_slot,
            head_bn,
        }
    }
}

fn place(
    grads: &mut GradientSet,
    s2_grads: &mut [Vec<f64>],
    slot: Option<usize>,
    bn: Option<usize>,
    pg: LayerParamGrads,
) {
    match pg {
        LayerParamGrads::None => {}
        LayerParamGrads::Gaussian {
            w_mu,
            w_sigma2,
            b_mu,
            b_sigma2,
        } => {
            let s = slot.expect("gaussian layer has a slot");
            for (g, v) in grads.mu[s].data_mut().iter_mut().zip(w_mu) {
                *g += v;
            }
            for (g, v) in grads.mu[s + 1].data_mut().iter_mut().zip(b_mu) {
                *g += v;
            }
            for (g, v) in s2_grads[s].iter_mut().zip(w_sigma2) {
                *g += v;
            }
            for (g, v) in s2_grads[s + 1].iter_mut().zip(b_sigma2) {
                *g += v;
            }
        }
        LayerParamGrads::Aux { gamma, beta } => {
            let b = bn.expect("batch-norm layer has an ordinal");
            for (g, v) in grads.aux[2 * b].data_mut().iter_mut().zip(gamma) {
                *g += v;
            }
            for (g, v) in grads.aux[2 * b + 1].data_mut().iter_mut().zip(beta) {
                *g += v;
            }
        }
    }
}

/// Loss and exact gradients with respect to every μ, ρ, γ and β.
///
/// The loss is `−(1/B)Σ_b loglik_b + Σ τ_i·KL_i`, with the KL over the
/// trunk and the heads of the tasks present in the batch. Heads of other
/// tasks get zero gradient. Pruned trunk elements get zero gradient.
pub fn backward(
    model: &MPModel,
    batch: &Batch,
    prior: &PriorStore,
    weights: &KLWeights,
    opts: &LossOptions,
) -> Result<Backward> {
    backward_scaled(model, batch, prior, weights, opts, 1.0)
}

/// Loss only; same value as [`backward`]'s `loss`.
pub fn loss(
    model: &MPModel,
    batch: &Batch,
    prior: &PriorStore,
    weights: &KLWeights,
    opts: &LossOptions,
) -> Result<f64> {
    let (nll, _, _, _) = forward_nll(model, batch, opts.bn_mode, 1.0, false)?;
    let kl = elbo::weighted_kl(model, prior, weights, &batch.task_set(), opts.kl_mode)?;
    Ok(nll + kl)
}

type ForwardOut = (
    f64,
    Option<(Vec<LayerCache>, Vec<HeadTape>, Vec<(Vec<f64>, Vec<f64>)>)>,
    MomentPair,
    Vec<(usize, BnBatchStats)>,
);

/// Runs the batch forward. With `keep`, also returns the caches and the
/// per-head output gradients of the scaled batch-mean NLL.
fn forward_nll(
    model: &MPModel,
    batch: &Batch,
    mode: BnMode,
    scale: f64,
    keep: bool,
) -> Result<ForwardOut> {
    let arch = model.architecture();
    if batch.inputs.shape()[1..] != arch.input_shape[..] {
        return Err(Error::shape(
            "backward",
            format!(
                "batch {:?} vs sample shape {:?}",
                batch.inputs.shape(),
                arch.input_shape
            ),
        ));
    }
    let index = Index::new(model);
    let mut stats = Vec::new();
    let mut h = MomentPair::deterministic(batch.inputs.clone());
    let mut trunk_caches = Vec::with_capacity(model.trunk().len());
    for (i, layer) in model.trunk().iter().enumerate() {
        let (y, cache, st) = layer.forward(&h, mode)?;
        check_finite(&y, Owner::Trunk, i, layer.name())?;
        if let Some(st) = st {
            stats.push((index.trunk_bn[i].expect("bn ordinal"), st));
        }
        if keep {
            trunk_caches.push(cache);
        }
        h = y;
    }
    let b = batch.len() as f64;
    let mut nll = 0.0;
    let mut heads = Vec::new();
    let mut out_grads = Vec::new();
    for task in batch.task_set() {
        let layers = model.head(task)?;
        let rows: Vec<usize> = (0..batch.len())
            .filter(|&r| batch.tasks[r] == task)
            .collect();
        let mut z = MomentPair::from_raw(
            std::iter::once(rows.len())
                .chain(h.shape()[1..].iter().copied())
                .collect(),
            h.mean.select_rows(&rows).into_data(),
            h.var.select_rows(&rows).into_data(),
        );
        let mut caches = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let (y, cache, st) = layer.forward(&z, mode)?;
            check_finite(&y, Owner::Head(task), i, layer.name())?;
            if let Some(st) = st {
                stats.push((index.head_bn[task][i].expect("bn ordinal"), st));
            }
            caches.push(cache);
            z = y;
        }
        let n = z.shape()[1];
        let mut gm = vec![0.0; z.mean.len()];
        let mut gv = vec![0.0; z.mean.len()];
        let mut y = vec![0.0; n];
        for (k, &r) in rows.iter().enumerate() {
            let label = batch.labels[r];
            if label >= n {
                return Err(Error::Invalid(format!(
                    "label {label} out of range for task {task} with {n} classes"
                )));
            }
            y.iter_mut().for_each(|v| *v = 0.0);
            y[label] = 1.0;
            let m = &z.mean.data()[k * n..(k + 1) * n];
            let v = &z.var.data()[k * n..(k + 1) * n];
            nll -= elbo::log_likelihood_unchecked(&y, m, v);
            if keep {
                for i in 0..n {
                    let d = y[i] - m[i];
                    gm[k * n + i] = -scale * d / v[i] / b;
                    gv[k * n + i] = scale * 0.5 * (1.0 / v[i] - d * d / (v[i] * v[i])) / b;
                }
            }
        }
        if keep {
            heads.push(HeadTape {
                task,
                rows,
                caches,
                out: z,
            });
            out_grads.push((gm, gv));
        }
    }
    let nll = scale * nll / b;
    if !nll.is_finite() {
        return Err(Error::NonFinite("loss (likelihood term)".into()));
    }
    let keep = keep.then_some((trunk_caches, heads, out_grads));
    Ok((nll, keep, h, stats))
}

pub(crate) fn backward_scaled(
    model: &MPModel,
    batch: &Batch,
    prior: &PriorStore,
    weights: &KLWeights,
    opts: &LossOptions,
    scale: f64,
) -> Result<Backward> {
    let layout = model.layout();
    prior.validate(layout)?;
    weights.validate(layout)?;
    let (nll, tape, trunk_out, bn_stats) = forward_nll(model, batch, opts.bn_mode, scale, true)?;
    let (trunk_caches, heads, out_grads) = tape.expect("tape requested");
    let index = Index::new(model);

    let mut grads = GradientSet::zeros_like(model);
    let mut s2_grads: Vec<Vec<f64>> = grads.rho.iter().map(|t| vec![0.0; t.len()]).collect();

    // Heads, scattering their input gradients back onto trunk-output rows.
    let width = trunk_out.mean.len() / batch.len();
    let mut gm_trunk = vec![0.0; trunk_out.mean.len()];
    let mut gv_trunk = vec![0.0; trunk_out.mean.len()];
    for (tape, (mut gm, mut gv)) in heads.into_iter().zip(out_grads) {
        let layers = model.head(tape.task)?;
        debug_assert_eq!(tape.out.mean.len(), gm.len());
        for (i, (layer, cache)) in layers.iter().zip(&tape.caches).enumerate().rev() {
            let (dm, dv, pg) = layer.backward(cache, &gm, &gv, true);
            place(
                &mut grads,
                &mut s2_grads,
                index.head_slot[tape.task][i],
                index.head_bn[tape.task][i],
                pg,
            );
            gm = dm;
            gv = dv;
        }
        for (k, &r) in tape.rows.iter().enumerate() {
            gm_trunk[r * width..(r + 1) * width].copy_from_slice(&gm[k * width..(k + 1) * width]);
            gv_trunk[r * width..(r + 1) * width].copy_from_slice(&gv[k * width..(k + 1) * width]);
        }
    }

    let (mut gm, mut gv) = (gm_trunk, gv_trunk);
    for (i, (layer, cache)) in model.trunk().iter().zip(&trunk_caches).enumerate().rev() {
        let (dm, dv, pg) = layer.backward(cache, &gm, &gv, i > 0);
        place(
            &mut grads,
            &mut s2_grads,
            index.trunk_slot[i],
            index.trunk_bn[i],
            pg,
        );
        gm = dm;
        gv = dv;
    }

    // KL term over the trunk and the batch's heads.
    let mu = model.flat_mu();
    let s2 = model.flat_sigma2();
    let mut kl = 0.0;
    let active = elbo::active_ranges(layout, &batch.task_set());
    for (slot_idx, slot) in layout.slots.iter().enumerate() {
        if !active.contains(&slot.range()) {
            continue;
        }
        let gmu = grads.mu[slot_idx].data_mut();
        let gs2 = &mut s2_grads[slot_idx];
        for (k, i) in slot.range().enumerate() {
            let tau = weights.tau[i];
            if tau == 0.0 {
                continue;
            }
            let (v, dmu, ds2) =
                elbo::kl_with_grad(mu[i], s2[i], prior.mu[i], prior.sigma2[i], opts.kl_mode);
            kl += tau * v;
            gmu[k] += scale * tau * dmu;
            gs2[k] += scale * tau * ds2;
        }
    }
    let kl = scale * kl;

    // Chain σ² = softplus(ρ) and drop pruned coordinates.
    for ((g, s), p) in grads.rho.iter_mut().zip(&s2_grads).zip(model.params()) {
        for ((g, &s), &r) in g.data_mut().iter_mut().zip(s).zip(p.rho.data()) {
            *g = s * sigmoid(r);
        }
    }
    let mut slot = 0;
    for &i in model.pruned() {
        while layout.slots[slot].range().end <= i {
            slot += 1;
        }
        let k = i - layout.slots[slot].offset;
        grads.mu[slot].data_mut()[k] = 0.0;
        grads.rho[slot].data_mut()[k] = 0.0;
    }

    let loss = nll + kl;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss (KL term)".into()));
    }
    for (what, ts) in [("mu", &grads.mu), ("rho", &grads.rho), ("aux", &grads.aux)] {
        for (i, t) in ts.iter().enumerate() {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {what} tensor {i}")));
            }
        }
    }
    Ok(Backward {
        loss,
        nll,
        kl,
        grads,
        bn_stats,
    })
}

/// One coordinate of the parameter space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinate {
    Mu { slot: usize, index: usize },
    Rho { slot: usize, index: usize },
    Aux { tensor: usize, index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdFailure {
    pub coord: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<FdFailure>,
}

fn coord_mut(m: &mut MPModel, slot: usize, which: usize, index: usize) -> &mut f64 {
    let p = m.params_mut().into_iter().nth(slot).expect("slot in range");
    let t = if which == 0 { &mut p.mu } else { &mut p.rho };
    &mut t.data_mut()[index]
}

/// Largest model the finite-difference harness will enumerate.
pub const FD_MAX_PARAMS: usize = 10_000;

/// Compares [`backward`] against central differences on every coordinate.
/// Relative error is `|a − n| / max(1, |n|)`.
pub fn finite_diff_check(
    model: &MPModel,
    batch: &Batch,
    prior: &PriorStore,
    weights: &KLWeights,
    opts: &LossOptions,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    let analytic = backward(model, batch, prior, weights, opts)?.grads;
    compare_with_finite_differences(model, batch, prior, weights, opts, &analytic, h, tol)
}

/// Checks a supplied gradient set against central differences. Pruned
/// coordinates are skipped: their gradient is zero by definition.
#[allow(clippy::too_many_arguments)]
pub fn compare_with_finite_differences(
    model: &MPModel,
    batch: &Batch,
    prior: &PriorStore,
    weights: &KLWeights,
    opts: &LossOptions,
    analytic: &GradientSet,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    let aux_len: usize = model.aux_params().iter().map(|t| t.len()).sum();
    let size = model.layout().total + aux_len;
    if size > FD_MAX_PARAMS {
        return Err(Error::Invalid(format!(
            "finite-difference check limited to {FD_MAX_PARAMS} parameters, model has {size}"
        )));
    }
    if !analytic.mirrors(model) {
        return Err(Error::shape(
            "finite_diff_check",
            "gradient set does not mirror the model",
        ));
    }
    let mut work = model.clone();
    let mut report = FdReport {
        checked: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    let mut record = |coord, a: f64, n: f64| {
        let rel = (a - n).abs() / n.abs().max(1.0);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel);
        if !(rel < tol) {
            report.failures.push(FdFailure {
                coord,
                analytic: a,
                numeric: n,
                rel_err: rel,
            });
        }
    };
    let layout = model.layout().clone();
    let pruned = model.pruned().to_vec();
    let f = |m: &MPModel| loss(m, batch, prior, weights, opts);
    for (slot, info) in layout.slots.iter().enumerate() {
        for index in 0..info.len {
            if pruned.binary_search(&(info.offset + index)).is_ok() {
                continue;
            }
            for which in 0..2 {
                let orig = *coord_mut(&mut work, slot, which, index);
                *coord_mut(&mut work, slot, which, index) = orig + h;
                let up = f(&work)?;
                *coord_mut(&mut work, slot, which, index) = orig - h;
                let down = f(&work)?;
                *coord_mut(&mut work, slot, which, index) = orig;
                let numeric = (up - down) / (2.0 * h);
                let (coord, a) = if which == 0 {
                    (
                        Coordinate::Mu { slot, index },
                        analytic.mu[slot].data()[index],
                    )
                } else {
                    (
                        Coordinate::Rho { slot, index },
                        analytic.rho[slot].data()[index],
                    )
                };
                record(coord, a, numeric);
            }
        }
    }
    let aux_shapes: Vec<usize> = model.aux_params().iter().map(|t| t.len()).collect();
    for (tensor, &len) in aux_shapes.iter().enumerate() {
        for index in 0..len {
            let orig = work.aux_params()[tensor].data()[index];
            work.aux_params_mut()[tensor].data_mut()[index] = orig + h;
            let up = f(&work)?;
            work.aux_params_mut()[tensor].data_mut()[index] = orig - h;
            let down = f(&work)?;
            work.aux_params_mut()[tensor].data_mut()[index] = orig;
            record(
                Coordinate::Aux { tensor, index },
                analytic.aux[tensor].data()[index],
                (up - down) / (2.0 * h),
            );
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::moments::{LayerSpec, DETERMINISTIC_RHO};
    use crate::tensor::{matmul, SeededRng};

    fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn setup(arch: Architecture, rho: f64, seed: u64, b: usize, task: usize) -> (MPModel, Batch) {
        let mut rng = SeededRng::new(seed);
        let model = MPModel::new(arch, rho, &mut rng).unwrap();
        let mut shape = vec![b];
        shape.extend_from_slice(&model.architecture().input_shape);
        let x = rand_tensor(&mut rng, &shape);
        let classes = match model.head(task).unwrap()[0] {
            crate::model::Layer::Linear { ref w, .. } => w.shape()[1],
            _ => unreachable!(),
        };
        let labels = (0..b).map(|_| rng.below(classes)).collect();
        (model, Batch::single_task(x, labels, task).unwrap())
    }

    fn weights(model: &MPModel, tau: f64) -> (PriorStore, KLWeights) {
        let l = model.layout();
        (
            PriorStore::standard_normal(l),
            KLWeights::uniform(l.total, tau),
        )
    }

    #[test]
    fn deterministic_limit_matches_classical_gradient() {
        // one linear layer into softmax; every variance is exactly zero
        let arch = Architecture {
            input_shape: vec![3],
            trunk: vec![],
            heads: vec![vec![
                LayerSpec::Linear {
                    in_features: 3,
                    out_features: 4,
                },
                LayerSpec::SoftmaxHead { var_floor: 0.5 },
            ]],
        };
        let (mut m, batch) = setup(arch, -3.0, 1, 5, 0);
        for p in m.params_mut() {
            p.rho = Tensor::filled(p.shape(), DETERMINISTIC_RHO);
        }
        let (prior, w) = weights(&m, 0.0);
        let g = backward(&m, &batch, &prior, &w, &LossOptions::default()).unwrap();

        // classical network: p = softmax(xW + b), loss = mean ½Σ(y−p)²/0.5
        let ps = m.params();
        let z = matmul(&batch.inputs, &ps[0].mu).unwrap();
        let mut dw = vec![0.0; 12];
        for r in 0..5 {
            let logits: Vec<f64> = (0..4)
                .map(|j| z.data()[r * 4 + j] + ps[1].mu.data()[j])
                .collect();
            let mx = logits.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|v| v / s).collect();
            let dp: Vec<f64> = (0..4)
                .map(|i| -((batch.labels[r] == i) as u8 as f64 - p[i]) / 0.5 / 5.0)
                .collect();
            for k in 0..4 {
                let dz: f64 = (0..4)
                    .map(|i| dp[i] * p[i] * ((i == k) as u8 as f64 - p[k]))
                    .sum();
                for a in 0..3 {
                    dw[a * 4 + k] += batch.inputs.data()[r * 3 + a] * dz;
                }
            }
        }
        for (a, b) in g.grads.mu[0].data().iter().zip(&dw) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn inactive_head_gets_zero_gradient() {
        let (m, batch) = setup(Architecture::mlp(&[4], &[5], &[3, 3]), -4.0, 2, 6, 1);
        let (prior, w) = weights(&m, 1e-2);
        let g = backward(&m, &batch, &prior, &w, &LossOptions::default())
            .unwrap()
            .grads;
        // slots: trunk w,b | head0 w,b | head1 w,b
        for s in [2, 3] {
            assert!(g.mu[s].data().iter().all(|&v| v == 0.0));
            assert!(g.rho[s].data().iter().all(|&v| v == 0.0));
        }
        assert!(g.mu[4].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let (m, batch) = setup(Architecture::mlp(&[4], &[6, 5], &[3]), -2.0, 3, 7, 0);
        let (prior, w) = weights(&m, 1e-3);
        for kl_mode in [KlMode::Standard, KlMode::AsPrinted] {
            let opts = LossOptions {
                kl_mode,
                bn_mode: BnMode::Train,
            };
            let r = finite_diff_check(&m, &batch, &prior, &w, &opts, 1e-5, 1e-4).unwrap();
            assert!(
                r.failures.is_empty(),
                "{:?}",
                &r.failures[..r.failures.len().min(5)]
            );
            assert_eq!(r.checked, 2 * m.layout().total);
        }
    }

    #[test]
    fn conv_bn_pool_tanh_gradients_match_finite_differences() {
        let arch = Architecture {
            input_shape: vec![5, 5, 2],
            trunk: vec![
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: [3, 3],
                    stride: [1, 1],
                    pad: [1, 1],
                },
                LayerSpec::Batchnorm2d {
                    channels: 3,
                    eps: 1e-3,
                    momentum: 0.1,
                },
                LayerSpec::Tanh,
                LayerSpec::Maxpool {
                    size: [2, 2],
                    stride: [2, 2],
                },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 12,
                    out_features: 6,
                },
                LayerSpec::Batchnorm1d {
                    features: 6,
                    eps: 1e-3,
                    momentum: 0.1,
                },
                LayerSpec::Relu,
            ],
            heads: vec![vec![
                LayerSpec::Linear {
                    in_features: 6,
                    out_features: 3,
                },
                LayerSpec::SoftmaxHead { var_floor: 1e-6 },
            ]],
        };
        let (mut m, batch) = setup(arch, -2.5, 4, 6, 0);
        let mut rng = SeededRng::new(40);
        for s in m.batchnorm_states_mut() {
            let c = s.channels();
            s.gamma =
                Tensor::new(vec![c], (0..c).map(|_| rng.uniform(0.5, 1.5)).collect()).unwrap();
            s.beta =
                Tensor::new(vec![c], (0..c).map(|_| rng.uniform(-0.5, 0.5)).collect()).unwrap();
            s.running_mean =
                Tensor::new(vec![c], (0..c).map(|_| rng.uniform(-0.5, 0.5)).collect()).unwrap();
            s.running_var =
                Tensor::new(vec![c], (0..c).map(|_| rng.uniform(0.5, 2.0)).collect()).unwrap();
            s.updates = 1;
        }
        let (prior, w) = weights(&m, 1e-3);
        for bn_mode in [BnMode::Eval, BnMode::Train] {
            let opts = LossOptions {
                kl_mode: KlMode::Standard,
                bn_mode,
            };
            let r = finite_diff_check(&m, &batch, &prior, &w, &opts, 1e-5, 1e-4).unwrap();
            assert!(
                r.failures.is_empty(),
                "{bn_mode:?}: {:?}",
                &r.failures[..r.failures.len().min(5)]
            );
        }
    }

    #[test]
    fn corrupted_gradient_is_reported_and_halving_h_is_stable() {
        let (m, batch) = setup(Architecture::mlp(&[3], &[4], &[2]), -2.0, 5, 4, 0);
        let (prior, w) = weights(&m, 1e-3);
        let opts = LossOptions::default();
        let mut g = backward(&m, &batch, &prior, &w, &opts).unwrap().grads;
        let a =
            compare_with_finite_differences(&m, &batch, &prior, &w, &opts, &g, 1e-5, 1e-4).unwrap();
        let b =
            compare_with_finite_differences(&m, &batch, &prior, &w, &opts, &g, 5e-6, 1e-4).unwrap();
        assert!(b.max_rel_err <= 10.0 * a.max_rel_err.max(1e-12));
        g.mu[0].data_mut()[2] += 0.5;
        let r =
            compare_with_finite_differences(&m, &batch, &prior, &w, &opts, &g, 1e-5, 1e-4).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].coord, Coordinate::Mu { slot: 0, index: 2 });
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let (m, batch) = setup(Architecture::mlp(&[3], &[4], &[2]), -3.0, 6, 4, 0);
        let (prior, w) = weights(&m, 1e-2);
        let opts = LossOptions::default();
        let one = backward_scaled(&m, &batch, &prior, &w, &opts, 1.0).unwrap();
        let two = backward_scaled(&m, &batch, &prior, &w, &opts, 2.0).unwrap();
        assert_eq!(two.loss, 2.0 * one.loss);
        for (a, b) in one
            .grads
            .mu
            .iter()
            .chain(&one.grads.rho)
            .zip(two.grads.mu.iter().chain(&two.grads.rho))
        {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn pruned_coordinates_have_zero_gradient() {
        let (mut m, batch) = setup(Architecture::mlp(&[3], &[4], &[2]), -3.0, 7, 4, 0);
        m.set_pruned(vec![0, 5, 13]);
        let (prior, w) = weights(&m, 1e-2);
        let g = backward(&m, &batch, &prior, &w, &LossOptions::default())
            .unwrap()
            .grads;
        for i in [0usize, 5] {
            assert_eq!(g.mu[0].data()[i], 0.0);
            assert_eq!(g.rho[0].data()[i], 0.0);
        }
        // offset 13 is bias element 1 (weights occupy 0..12)
        assert_eq!(g.mu[1].data()[1], 0.0);
        assert_eq!(g.rho[1].data()[1], 0.0);
    }

    #[test]
    fn guard_rejects_large_models() {
        let (m, batch) = setup(Architecture::mlp(&[100], &[101], &[2]), -3.0, 8, 2, 0);
        let (prior, w) = weights(&m, 0.0);
        let r = finite_diff_check(&m, &batch, &prior, &w, &LossOptions::default(), 1e-5, 1e-4);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }
}
