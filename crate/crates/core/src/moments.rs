//! Moment-propagation layers.
//!
//! Every layer maps a batch of diagonal Gaussians `(mean, var)` to another
//! batch of diagonal Gaussians. Parameters are independent Gaussians
//! `N(mu, softplus(rho))`, independent of the input. Linear and convolutional
//! layers are exact under those assumptions; nonlinearities use a first-order
//! Taylor expansion around the incoming mean.
//!
//! Activations are batched with the sample index leading: a `[B, n]` or
//! `[B, H, W, C]` tensor. The `*_backward` functions are the adjoints used by
//! [`crate::grad`]; they return gradients with respect to `sigma2`, and the
//! caller chains those through softplus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    gemm_acc, gemm_nt_acc, gemm_tn_acc, patches, patches_adjoint, ConvGeometry, Tensor,
};

/// Lower bound on the softmax output variance.
pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

/// Pre-parameter whose softplus underflows to exactly zero variance.
pub const DETERMINISTIC_RHO: f64 = -1.0e4;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// A tensor of independent Gaussian weights, `N(mu, softplus(rho))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParameter {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl GaussianParameter {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::shape(
                "GaussianParameter",
                format!("mu {:?} vs rho {:?}", mu.shape(), rho.shape()),
            ));
        }
        Ok(Self { mu, rho })
    }

    pub fn from_sigma2(mu: Tensor, sigma2: &Tensor) -> Result<Self> {
        if sigma2.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Invalid("sigma2 must be positive".into()));
        }
        Self::new(mu, sigma2.map(inverse_softplus))
    }

    /// Zero-variance parameter; behaves like an ordinary weight.
    pub fn deterministic(mu: Tensor) -> Self {
        let rho = Tensor::filled(mu.shape(), DETERMINISTIC_RHO);
        Self { mu, rho }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma2(&self) -> Tensor {
        self.rho.map(softplus)
    }
}

/// Mean and diagonal variance of a random feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentPair {
    pub mean: Tensor,
    pub var: Tensor,
}

impl MomentPair {
    pub fn new(mean: Tensor, var: Tensor) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(Error::shape(
                "MomentPair",
                format!("mean {:?} vs var {:?}", mean.shape(), var.shape()),
            ));
        }
        check_var(&var, "MomentPair")?;
        Ok(Self { mean, var })
    }

    /// Deterministic input: zero variance.
    pub fn deterministic(mean: Tensor) -> Self {
        let var = Tensor::zeros(mean.shape());
        Self { mean, var }
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub(crate) fn from_raw(shape: Vec<usize>, mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self {
            mean: Tensor::from_raw(shape.clone(), mean),
            var: Tensor::from_raw(shape, var),
        }
    }
}

fn check_var(var: &Tensor, op: &'static str) -> Result<()> {
    if var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::NegativeVariance(op));
    }
    Ok(())
}

fn default_stride() -> [usize; 2] {
    [1, 1]
}

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.1
}

fn default_var_floor() -> f64 {
    DEFAULT_VAR_FLOOR
}

/// One entry of an architecture description.
///
/// Shapes exclude the batch dimension. Images are `[H, W, C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "default_stride")]
        stride: [usize; 2],
        #[serde(default)]
        pad: [usize; 2],
    },
    Batchnorm1d {
        features: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Batchnorm2d {
        channels: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Relu,
    Tanh,
    SoftmaxHead {
        #[serde(default = "default_var_floor")]
        var_floor: f64,
    },
    Flatten,
    Maxpool {
        size: [usize; 2],
        stride: [usize; 2],
    },
}

impl LayerSpec {
    /// Per-sample output shape, or an error if `input` does not compose.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |want: &str| {
            Err(Error::shape(
                "LayerSpec",
                format!("{self:?} expects {want}, got input {input:?}"),
            ))
        };
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match input {
                [n] if *n == in_features => Ok(vec![out_features]),
                _ => bad(&format!("[{in_features}]")),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                ..
            } => match input {
                [_, _, c] if *c == in_channels => {
                    let g = self.conv_geometry(input)?;
                    let [o1, o2] = g.out();
                    Ok(vec![o1, o2, out_channels])
                }
                _ => bad(&format!("[H, W, {in_channels}]")),
            },
            LayerSpec::Batchnorm1d { features, eps, .. } => {
                check_eps(eps)?;
                match input {
                    [n] if *n == features => Ok(input.to_vec()),
                    _ => bad(&format!("[{features}]")),
                }
            }
            LayerSpec::Batchnorm2d { channels, eps, .. } => {
                check_eps(eps)?;
                match input {
                    [_, _, c] if *c == channels => Ok(input.to_vec()),
                    _ => bad(&format!("[H, W, {channels}]")),
                }
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::SoftmaxHead { var_floor } => {
                if !(var_floor > 0.0) {
                    return Err(Error::Invalid(format!("var_floor {var_floor} must be > 0")));
                }
                match input {
                    [n] if *n >= 2 => Ok(input.to_vec()),
                    _ => bad("[N] with N >= 2"),
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Maxpool { size, stride } => match input {
                [h, w, c] => {
                    let g = PoolGeometry::new([*h, *w, *c], size, stride)?;
                    let [o1, o2] = g.out();
                    Ok(vec![o1, o2, *c])
                }
                _ => bad("[H, W, C]"),
            },
        }
    }

    pub(crate) fn conv_geometry(&self, input: &[usize]) -> Result<ConvGeometry> {
        match (self, input) {
            (
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    pad,
                    ..
                },
                [h, w, c],
            ) => ConvGeometry::new([*h, *w, *c], *kernel, *stride, *pad),
            _ => Err(Error::Invalid(format!("{self:?} is not a conv layer"))),
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) {
        return Err(Error::Invalid(format!("batch-norm eps {eps} must be >= 0")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Affine layers (linear, conv): shared patch-row algebra.
// ---------------------------------------------------------------------------

/// Forward state an affine layer needs for its adjoint.
#[derive(Clone, Debug)]
pub(crate) struct AffineCache {
    rows: usize,
    /// Input means, one patch (or feature vector) per row.
    x: Vec<f64>,
    /// Input variances; `None` when identically zero.
    xv: Option<Vec<f64>>,
    sigma2: Vec<f64>,
}

/// Gradients of an affine layer with respect to its inputs and parameters.
#[derive(Clone, Debug)]
pub(crate) struct AffineGrads {
    pub d_mean: Vec<f64>,
    pub d_var: Vec<f64>,
    pub w_mu: Vec<f64>,
    pub w_sigma2: Vec<f64>,
    pub b_mu: Vec<f64>,
    pub b_sigma2: Vec<f64>,
}

/// `rows × n` inputs against an `n × m` weight matrix.
///
/// mean = X·Mw + mb
/// var  = Vx·(Sw + Mw²) + X²·Sw + sb
fn affine_forward(
    rows: usize,
    x: &[f64],
    xv: &[f64],
    w: &GaussianParameter,
    b: &GaussianParameter,
) -> (Vec<f64>, Vec<f64>, AffineCache) {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let mw = w.mu.data();
    let sw = w.sigma2().into_data();
    let mb = b.mu.data();
    let sb = b.sigma2().into_data();

    let mut mean = Vec::with_capacity(rows * m);
    let mut var = Vec::with_capacity(rows * m);
    for _ in 0..rows {
        mean.extend_from_slice(mb);
        var.extend_from_slice(&sb);
    }
    gemm_acc(rows, n, m, x, mw, &mut mean);

    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    gemm_acc(rows, n, m, &x2, &sw, &mut var);
    let has_var = xv.iter().any(|&v| v != 0.0);
    if has_var {
        let total: Vec<f64> = sw.iter().zip(mw).map(|(s, u)| s + u * u).collect();
        gemm_acc(rows, n, m, xv, &total, &mut var);
    }
    let cache = AffineCache {
        rows,
        x: x.to_vec(),
        xv: has_var.then(|| xv.to_vec()),
        sigma2: sw,
    };
    (mean, var, cache)
}

fn affine_backward(
    cache: &AffineCache,
    w: &GaussianParameter,
    gm: &[f64],
    gv: &[f64],
    need_input: bool,
) -> AffineGrads {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let rows = cache.rows;
    let mw = w.mu.data();
    let sw = &cache.sigma2;

    let mut b_mu = vec![0.0; m];
    let mut b_sigma2 = vec![0.0; m];
    for r in 0..rows {
        for j in 0..m {
            b_mu[j] += gm[r * m + j];
            b_sigma2[j] += gv[r * m + j];
        }
    }

    // dMw = Xᵀ·gm + 2·Mw ⊙ (Vxᵀ·gv);  dSw = (Vx + X²)ᵀ·gv
    let mut w_mu = vec![0.0; n * m];
    gemm_tn_acc(n, rows, m, &cache.x, gm, &mut w_mu);
    let u: Vec<f64> = match &cache.xv {
        Some(xv) => cache.x.iter().zip(xv).map(|(x, v)| x * x + v).collect(),
        None => cache.x.iter().map(|x| x * x).collect(),
    };
    let mut w_sigma2 = vec![0.0; n * m];
    gemm_tn_acc(n, rows, m, &u, gv, &mut w_sigma2);
    if let Some(xv) = &cache.xv {
        let mut t = vec![0.0; n * m];
        gemm_tn_acc(n, rows, m, xv, gv, &mut t);
        for ((g, &t), &mu) in w_mu.iter_mut().zip(&t).zip(mw) {
            *g += 2.0 * mu * t;
        }
    }

    let (d_mean, d_var) = if need_input {
        // dX = gm·Mwᵀ + 2·X ⊙ (gv·Swᵀ);  dVx = gv·(Sw + Mw²)ᵀ
        let mut d_mean = vec![0.0; rows * n];
        gemm_nt_acc(rows, m, n, gm, mw, &mut d_mean);
        let mut t = vec![0.0; rows * n];
        gemm_nt_acc(rows, m, n, gv, sw, &mut t);
        for ((d, &t), &x) in d_mean.iter_mut().zip(&t).zip(&cache.x) {
            *d += 2.0 * x * t;
        }
        let total: Vec<f64> = sw.iter().zip(mw).map(|(s, u)| s + u * u).collect();
        let mut d_var = vec![0.0; rows * n];
        gemm_nt_acc(rows, m, n, gv, &total, &mut d_var);
        (d_mean, d_var)
    } else {
        (Vec::new(), Vec::new())
    };

    AffineGrads {
        d_mean,
        d_var,
        w_mu,
        w_sigma2,
        b_mu,
        b_sigma2,
    }
}

fn check_affine(
    op: &'static str,
    w: &GaussianParameter,
    b: &GaussianParameter,
) -> Result<(usize, usize)> {
    let [n, m] = match w.shape() {
        [n, m] => [*n, *m],
        s => return Err(Error::shape(op, format!("weights must be 2-D, got {s:?}"))),
    };
    if b.shape() != [m] {
        return Err(Error::shape(
            op,
            format!("bias {:?} vs {m} outputs", b.shape()),
        ));
    }
    Ok((n, m))
}

/// Splits an activation into `(rows, per-row shape)`, treating an input
/// whose shape equals `sample` as a single unbatched sample.
fn batch_dims(x: &MomentPair, sample: &[usize], op: &'static str) -> Result<(usize, bool)> {
    let s = x.shape();
    if s == sample {
        return Ok((1, false));
    }
    if s.len() == sample.len() + 1 && &s[1..] == sample {
        return Ok((s[0], true));
    }
    Err(Error::shape(
        op,
        format!("input {s:?} vs sample shape {sample:?}"),
    ))
}

fn out_shape(rows: usize, batched: bool, sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(sample.len() + 1);
    if batched {
        s.push(rows);
    }
    s.extend_from_slice(sample);
    s
}

/// Linear layer `z = Wᵀx + b` on a `[n]` sample or `[B, n]` batch.
pub fn linear_forward(
    x: &MomentPair,
    w: &GaussianParameter,
    b: &GaussianParameter,
) -> Result<MomentPair> {
    linear_forward_cached(x, w, b).map(|(y, _)| y)
}

pub(crate) fn linear_forward_cached(
    x: &MomentPair,
    w: &GaussianParameter,
    b: &GaussianParameter,
) -> Result<(MomentPair, AffineCache)> {
    let (n, m) = check_affine("linear_forward", w, b)?;
    let (rows, batched) = batch_dims(x, &[n], "linear_forward")?;
    check_var(&x.var, "linear_forward")?;
    let (mean, var, cache) = affine_forward(rows, x.mean.data(), x.var.data(), w, b);
    Ok((
        MomentPair::from_raw(out_shape(rows, batched, &[m]), mean, var),
        cache,
    ))
}

pub(crate) fn linear_backward(
    cache: &AffineCache,
    w: &GaussianParameter,
    gm: &[f64],
    gv: &[f64],
    need_input: bool,
) -> AffineGrads {
    affine_backward(cache, w, gm, gv, need_input)
}

/// Convolution state: the affine cache over patch rows plus the geometry.
#[derive(Clone, Debug)]
pub(crate) struct ConvCache {
    affine: AffineCache,
    batch: usize,
}

/// 2-D convolution on a `[H, W, C]` sample or `[B, H, W, C]` batch.
///
/// `w` is the `(k1·k2·ch) × f` matrix of vectorised filters, rows ordered
/// like [`crate::tensor::im2col`]. Mean and variance are unfolded with the
/// same patch extraction, and each output pixel follows the linear rule.
pub fn conv2d_forward(
    x: &MomentPair,
    w: &GaussianParameter,
    b: &GaussianParameter,
    geometry: &ConvGeometry,
) -> Result<MomentPair> {
    conv2d_forward_cached(x, w, b, geometry).map(|(y, _)| y)
}

pub(crate) fn conv2d_forward_cached(
    x: &MomentPair,
    w: &GaussianParameter,
    b: &GaussianParameter,
    g: &ConvGeometry,
) -> Result<(MomentPair, ConvCache)> {
    let (p, f) = check_affine("conv2d_forward", w, b)?;
    if p != g.patch_len() {
        return Err(Error::shape(
            "conv2d_forward",
            format!("filter rows {p} vs patch length {}", g.patch_len()),
        ));
    }
    let (batch, batched) = batch_dims(x, &g.input, "conv2d_forward")?;
    check_var(&x.var, "conv2d_forward")?;
    let per = g.input.iter().product::<usize>();
    let o = g.out_pixels();
    let mut pm = Vec::with_capacity(batch * o * p);
    let mut pv = Vec::with_capacity(batch * o * p);
    for s in 0..batch {
        pm.extend(patches(&x.mean.data()[s * per..(s + 1) * per], g));
        pv.extend(patches(&x.var.data()[s * per..(s + 1) * per], g));
    }
    let (mean, var, affine) = affine_forward(batch * o, &pm, &pv, w, b);
    let [o1, o2] = g.out();
    let shape = out_shape(batch, batched, &[o1, o2, f]);
    Ok((
        MomentPair::from_raw(shape, mean, var),
        ConvCache { affine, batch },
    ))
}

pub(crate) fn conv2d_backward(
    cache: &ConvCache,
    w: &GaussianParameter,
    g: &ConvGeometry,
    gm: &[f64],
    gv: &[f64],
    need_input: bool,
) -> AffineGrads {
    let mut grads = affine_backward(&cache.affine, w, gm, gv, need_input);
    if need_input {
        let per = g.input.iter().product::<usize>();
        let chunk = g.out_pixels() * g.patch_len();
        let mut dm = vec![0.0; cache.batch * per];
        let mut dv = vec![0.0; cache.batch * per];
        for s in 0..cache.batch {
            patches_adjoint(
                &grads.d_mean[s * chunk..(s + 1) * chunk],
                g,
                &mut dm[s * per..(s + 1) * per],
            );
            patches_adjoint(
                &grads.d_var[s * chunk..(s + 1) * chunk],
                g,
                &mut dv[s * per..(s + 1) * per],
            );
        }
        grads.d_mean = dm;
        grads.d_var = dv;
    }
    grads
}

// ---------------------------------------------------------------------------
// Batch normalisation.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

/// Learnable affine and running statistics of a batch-norm layer.
///
/// `gamma` and `beta` are ordinary deterministic parameters. Running
/// statistics track the biased batch variance of the means with
/// `running ← (1 − momentum)·running + momentum·batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    /// Number of train-mode batches folded into the running statistics.
    pub updates: u64,
}

impl BatchNormState {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps,
            momentum,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn absorb(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.updates += 1;
    }
}

/// Per-channel statistics of the batch means.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    mode: BnMode,
    /// Normalised means x̂.
    xhat: Vec<f64>,
    /// Input variances.
    xv: Vec<f64>,
    /// σ²_N + ε per channel.
    denom: Vec<f64>,
}

/// Batch norm over a batch of moments. Statistics are per trailing channel:
/// per feature for `[B, n]`, per channel for `[B, H, W, C]`.
///
/// Train mode normalises with the batch statistics of the means and returns
/// them for the caller to fold into `state`; eval mode uses the running
/// statistics verbatim.
pub fn batchnorm_forward(
    x: &MomentPair,
    state: &BatchNormState,
    mode: BnMode,
) -> Result<(MomentPair, Option<BnBatchStats>)> {
    batchnorm_forward_cached(x, state, mode).map(|(y, s, _)| (y, s))
}

pub(crate) fn batchnorm_forward_cached(
    x: &MomentPair,
    state: &BatchNormState,
    mode: BnMode,
) -> Result<(MomentPair, Option<BnBatchStats>, BnCache)> {
    let c = state.channels();
    let shape = x.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != c {
        return Err(Error::shape(
            "batchnorm_forward",
            format!("input {shape:?} vs {c} channels"),
        ));
    }
    check_var(&x.var, "batchnorm_forward")?;
    let count = x.mean.len() / c;
    if count == 0 {
        return Err(Error::Empty("batch"));
    }
    let xm = x.mean.data();
    let (mu_n, var_n, stats) = match mode {
        BnMode::Train => {
            let mut mu = vec![0.0; c];
            for (i, &v) in xm.iter().enumerate() {
                mu[i % c] += v;
            }
            mu.iter_mut().for_each(|v| *v /= count as f64);
            let mut var = vec![0.0; c];
            for (i, &v) in xm.iter().enumerate() {
                let d = v - mu[i % c];
                var[i % c] += d * d;
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let stats = BnBatchStats {
                mean: mu.clone(),
                var: var.clone(),
            };
            (mu, var, Some(stats))
        }
        BnMode::Eval => {
            if state.updates == 0 {
                return Err(Error::Invalid(
                    "batch norm evaluated before any training step".into(),
                ));
            }
            (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
                None,
            )
        }
    };
    let denom: Vec<f64> = var_n.iter().map(|v| v + state.eps).collect();
    let inv_sd: Vec<f64> = denom.iter().map(|d| 1.0 / d.sqrt()).collect();
    let (gamma, beta) = (state.gamma.data(), state.beta.data());
    let n = xm.len();
    let mut xhat = Vec::with_capacity(n);
    let mut mean = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    for (i, (&m, &v)) in xm.iter().zip(x.var.data()).enumerate() {
        let k = i % c;
        let h = (m - mu_n[k]) * inv_sd[k];
        xhat.push(h);
        mean.push(gamma[k] * h + beta[k]);
        var.push(gamma[k] * gamma[k] * v / denom[k]);
    }
    let out = MomentPair::from_raw(shape.to_vec(), mean, var);
    let cache = BnCache {
        mode,
        xhat,
        xv: x.var.data().to_vec(),
        denom,
    };
    Ok((out, stats, cache))
}

pub(crate) struct BnGrads {
    pub d_mean: Vec<f64>,
    pub d_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) fn batchnorm_backward(
    cache: &BnCache,
    state: &BatchNormState,
    gm: &[f64],
    gv: &[f64],
) -> BnGrads {
    let c = state.channels();
    let gamma = state.gamma.data();
    let n = gm.len();
    let count = (n / c) as f64;
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    let mut d_var = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        d_beta[k] += gm[i];
        d_gamma[k] += gm[i] * cache.xhat[i] + gv[i] * 2.0 * gamma[k] * cache.xv[i] / cache.denom[k];
        d_var.push(gv[i] * gamma[k] * gamma[k] / cache.denom[k]);
    }
    let d_mean = match cache.mode {
        BnMode::Eval => (0..n)
            .map(|i| {
                let k = i % c;
                gm[i] * gamma[k] / cache.denom[k].sqrt()
            })
            .collect(),
        BnMode::Train => {
            // D = σ²_N + ε depends on the batch through σ²_N, and so does
            // μ_N. Collect ∂L/∂D from both the mean and variance outputs.
            let mut sum_dxhat = vec![0.0; c];
            let mut sum_dxhat_xhat = vec![0.0; c];
            let mut d_denom_var = vec![0.0; c];
            for i in 0..n {
                let k = i % c;
                let dxh = gm[i] * gamma[k];
                sum_dxhat[k] += dxh;
                sum_dxhat_xhat[k] += dxh * cache.xhat[i];
                d_denom_var[k] -=
                    gv[i] * gamma[k] * gamma[k] * cache.xv[i] / (cache.denom[k] * cache.denom[k]);
            }
            (0..n)
                .map(|i| {
                    let k = i % c;
                    let sd = cache.denom[k].sqrt();
                    let dxh = gm[i] * gamma[k];
                    // standard batch-norm adjoint for the mean path
                    let mean_path =
                        (dxh - sum_dxhat[k] / count - cache.xhat[i] * sum_dxhat_xhat[k] / count)
                            / sd;
                    // ∂D/∂μ_i = 2(μ_i − μ_N)/count = 2·x̂_i·sd/count
                    let var_path = d_denom_var[k] * 2.0 * cache.xhat[i] * sd / count;
                    mean_path + var_path
                })
                .collect()
        }
    };
    BnGrads {
        d_mean,
        d_var,
        gamma: d_gamma,
        beta: d_beta,
    }
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn eval(self, x: f64) -> (f64, f64, f64) {
        match self {
            // derivative at exactly 0 is taken as 0
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
        }
    }
}

/// First-order Taylor propagation: `mean ← Ψ(μ)`, `var ← σ²·Ψ′(μ)²`.
pub fn activation_forward(x: &MomentPair, kind: Activation) -> Result<MomentPair> {
    check_var(&x.var, "activation_forward")?;
    let (mean, var) = x
        .mean
        .data()
        .iter()
        .zip(x.var.data())
        .map(|(&m, &v)| {
            let (y, d, _) = kind.eval(m);
            (y, v * d * d)
        })
        .unzip();
    Ok(MomentPair::from_raw(x.shape().to_vec(), mean, var))
}

/// Adjoint of [`activation_forward`] given the incoming moments.
pub(crate) fn activation_backward(
    x: &MomentPair,
    kind: Activation,
    gm: &[f64],
    gv: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut dm = Vec::with_capacity(gm.len());
    let mut dv = Vec::with_capacity(gm.len());
    for (i, (&m, &v)) in x.mean.data().iter().zip(x.var.data()).enumerate() {
        let (_, d, dd) = kind.eval(m);
        dm.push(gm[i] * d + gv[i] * v * 2.0 * d * dd);
        dv.push(gv[i] * d * d);
    }
    (dm, dv)
}

// ---------------------------------------------------------------------------
// Softmax output head.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub(crate) struct SoftmaxCache {
    classes: usize,
    probs: Vec<f64>,
    in_var: Vec<f64>,
    /// Whether each output variance exceeded the floor.
    live: Vec<bool>,
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Softmax of the mean; variance through the full softmax Jacobian,
/// `var_i = Σ_j J_ij²·σ²_j` with `J_ij = p_i(δ_ij − p_j)`, floored at
/// `var_floor`. Works on `[N]` or `[B, N]`.
pub fn softmax_head_forward(z: &MomentPair, var_floor: f64) -> Result<MomentPair> {
    softmax_head_forward_cached(z, var_floor).map(|(y, _)| y)
}

pub(crate) fn softmax_head_forward_cached(
    z: &MomentPair,
    var_floor: f64,
) -> Result<(MomentPair, SoftmaxCache)> {
    let n = *z
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax_head_forward", "scalar input"))?;
    if n < 2 || z.shape().len() > 2 {
        return Err(Error::shape(
            "softmax_head_forward",
            format!("need [N] or [B, N] with N >= 2, got {:?}", z.shape()),
        ));
    }
    check_var(&z.var, "softmax_head_forward")?;
    let total = z.mean.len();
    let mut probs = vec![0.0; total];
    let mut var = vec![0.0; total];
    let mut live = vec![false; total];
    for ((zm, zv), (p, (v, l))) in z
        .mean
        .data()
        .chunks_exact(n)
        .zip(z.var.data().chunks_exact(n))
        .zip(
            probs
                .chunks_exact_mut(n)
                .zip(var.chunks_exact_mut(n).zip(live.chunks_exact_mut(n))),
        )
    {
        softmax_row(zm, p);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let jij = p[i] * (if i == j { 1.0 } else { 0.0 } - p[j]);
                acc += jij * jij * zv[j];
            }
            l[i] = acc > var_floor;
            v[i] = if l[i] { acc } else { var_floor };
        }
    }
    let out = MomentPair::from_raw(z.shape().to_vec(), probs.clone(), var);
    let cache = SoftmaxCache {
        classes: n,
        probs,
        in_var: z.var.data().to_vec(),
        live,
    };
    Ok((out, cache))
}

pub(crate) fn softmax_head_backward(
    cache: &SoftmaxCache,
    gm: &[f64],
    gv: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = cache.classes;
    let mut dm = vec![0.0; cache.probs.len()];
    let mut dv = vec![0.0; cache.probs.len()];
    let mut jac = vec![0.0; n * n];
    for (r, p) in cache.probs.chunks_exact(n).enumerate() {
        let base = r * n;
        let v = &cache.in_var[base..base + n];
        for i in 0..n {
            for j in 0..n {
                jac[i * n + j] = p[i] * (if i == j { 1.0 } else { 0.0 } - p[j]);
            }
        }
        for k in 0..n {
            // mean path: ∂p_i/∂z_k = J_ik
            let mut acc = 0.0;
            for i in 0..n {
                acc += gm[base + i] * jac[i * n + k];
            }
            dm[base + k] = acc;
        }
        for i in 0..n {
            if !cache.live[base + i] {
                continue;
            }
            let g = gv[base + i];
            for j in 0..n {
                let jij = jac[i * n + j];
                dv[base + j] += g * jij * jij;
                // ∂J_ij/∂z_k = J_ik(δ_ij − p_j) − p_i·J_jk
                let coeff = 2.0 * g * jij * v[j];
                if coeff == 0.0 {
                    continue;
                }
                let delta = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    dm[base + k] +=
                        coeff * (jac[i * n + k] * (delta - p[j]) - p[i] * jac[j * n + k]);
                }
            }
        }
    }
    (dm, dv)
}

// ---------------------------------------------------------------------------
// Max pooling.
// ---------------------------------------------------------------------------

/// Unpadded pooling window over a `[H, W, C]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub input: [usize; 3],
    pub size: [usize; 2],
    pub stride: [usize; 2],
}

impl PoolGeometry {
    pub fn new(input: [usize; 3], size: [usize; 2], stride: [usize; 2]) -> Result<Self> {
        if size.contains(&0) || stride.contains(&0) || size[0] > input[0] || size[1] > input[1] {
            return Err(Error::Invalid(format!(
                "pool window {size:?}/{stride:?} does not fit {input:?}"
            )));
        }
        Ok(Self {
            input,
            size,
            stride,
        })
    }

    pub fn out(&self) -> [usize; 2] {
        [0, 1].map(|d| (self.input[d] - self.size[d]) / self.stride[d] + 1)
    }
}

/// Max pooling on the mean; the variance is read at the winning position.
/// Ties go to the first position in row-major window order.
pub fn maxpool_forward(x: &MomentPair, g: &PoolGeometry) -> Result<MomentPair> {
    maxpool_forward_cached(x, g).map(|(y, _)| y)
}

pub(crate) fn maxpool_forward_cached(
    x: &MomentPair,
    g: &PoolGeometry,
) -> Result<(MomentPair, Vec<usize>)> {
    let (batch, batched) = batch_dims(x, &g.input, "maxpool_forward")?;
    check_var(&x.var, "maxpool_forward")?;
    let [h, w, c] = g.input;
    let [o1, o2] = g.out();
    let per = h * w * c;
    let mut argmax = Vec::with_capacity(batch * o1 * o2 * c);
    for s in 0..batch {
        let xm = &x.mean.data()[s * per..(s + 1) * per];
        for oi in 0..o1 {
            for oj in 0..o2 {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for ki in 0..g.size[0] {
                        for kj in 0..g.size[1] {
                            let idx =
                                ((oi * g.stride[0] + ki) * w + oj * g.stride[1] + kj) * c + ch;
                            if best == usize::MAX || xm[idx] > xm[best] {
                                best = idx;
                            }
                        }
                    }
                    argmax.push(s * per + best);
                }
            }
        }
    }
    let mean = argmax.iter().map(|&i| x.mean.data()[i]).collect();
    let var = argmax.iter().map(|&i| x.var.data()[i]).collect();
    let shape = out_shape(batch, batched, &[o1, o2, c]);
    Ok((MomentPair::from_raw(shape, mean, var), argmax))
}

pub(crate) fn maxpool_backward(
    argmax: &[usize],
    input_len: usize,
    gm: &[f64],
    gv: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut dm = vec![0.0; input_len];
    let mut dv = vec![0.0; input_len];
    for (o, &i) in argmax.iter().enumerate() {
        dm[i] += gm[o];
        dv[i] += gv[o];
    }
    (dm, dv)
}
