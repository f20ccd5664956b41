//! Multi-head moment-propagation network.
//!
//! A shared trunk feeds one head per task; each head ends in a softmax
//! output layer. Gaussian parameters are enumerated in a fixed canonical
//! order (trunk layers first, then heads in task order, weight before bias
//! within a layer), and every flat per-parameter vector in the crate
//! (learning rates, KL weights, priors, importance) follows that order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{
    self, Activation, AffineGrads, BatchNormState, BnBatchStats, BnMode, GaussianParameter,
    LayerSpec, MomentPair, PoolGeometry,
};
use crate::tensor::{ConvGeometry, SeededRng, Tensor};

/// Trunk and head layer lists plus the per-sample input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub trunk: Vec<LayerSpec>,
    pub heads: Vec<Vec<LayerSpec>>,
}

impl Architecture {
    /// Multi-layer perceptron on `[H, W, C]` images: flatten, `hidden`
    /// ReLU layers, and one linear+softmax head per entry of `head_classes`.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], head_classes: &[usize]) -> Self {
        let mut trunk = vec![LayerSpec::Flatten];
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            trunk.push(LayerSpec::Linear {
                in_features: width,
                out_features: h,
            });
            trunk.push(LayerSpec::Relu);
            width = h;
        }
        let heads = head_classes
            .iter()
            .map(|&k| {
                vec![
                    LayerSpec::Linear {
                        in_features: width,
                        out_features: k,
                    },
                    LayerSpec::SoftmaxHead {
                        var_floor: moments::DEFAULT_VAR_FLOOR,
                    },
                ]
            })
            .collect();
        Self {
            input_shape: input_shape.to_vec(),
            trunk,
            heads,
        }
    }

    /// Checks that every layer composes and returns the trunk output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.heads.is_empty() {
            return Err(Error::Invalid("architecture has no heads".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, spec) in self.trunk.iter().enumerate() {
            if matches!(spec, LayerSpec::SoftmaxHead { .. }) {
                return Err(Error::Invalid(format!(
                    "trunk layer {i}: softmax_head belongs in a head"
                )));
            }
            shape = spec.output_shape(&shape)?;
        }
        for (h, head) in self.heads.iter().enumerate() {
            let mut s = shape.clone();
            for (i, spec) in head.iter().enumerate() {
                let last = i + 1 == head.len();
                if matches!(spec, LayerSpec::SoftmaxHead { .. }) != last {
                    return Err(Error::Invalid(format!(
                        "head {h}: softmax_head must be the last layer"
                    )));
                }
                s = spec.output_shape(&s)?;
            }
            if head.is_empty() {
                return Err(Error::Invalid(format!("head {h} is empty")));
            }
        }
        Ok(shape)
    }
}

/// A network layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear {
        w: GaussianParameter,
        b: GaussianParameter,
    },
    Conv2d {
        geometry: ConvGeometry,
        w: GaussianParameter,
        b: GaussianParameter,
    },
    BatchNorm(BatchNormState),
    Activation(Activation),
    SoftmaxHead {
        var_floor: f64,
    },
    Flatten,
    MaxPool(PoolGeometry),
}

impl Layer {
    fn build(spec: &LayerSpec, input: &[usize], rho: f64, rng: &mut SeededRng) -> Result<Self> {
        let gaussian = |rng: &mut SeededRng, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mu = (0..fan_in * fan_out)
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            let w = GaussianParameter {
                mu: Tensor::from_raw(vec![fan_in, fan_out], mu),
                rho: Tensor::filled(&[fan_in, fan_out], rho),
            };
            let b = GaussianParameter {
                mu: Tensor::zeros(&[fan_out]),
                rho: Tensor::filled(&[fan_out], rho),
            };
            (w, b)
        };
        Ok(match spec {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let (w, b) = gaussian(rng, *in_features, *out_features);
                Layer::Linear { w, b }
            }
            LayerSpec::Conv2d { out_channels, .. } => {
                let geometry = spec.conv_geometry(input)?;
                let (w, b) = gaussian(rng, geometry.patch_len(), *out_channels);
                Layer::Conv2d { geometry, w, b }
            }
            LayerSpec::Batchnorm1d {
                features,
                eps,
                momentum,
            } => Layer::BatchNorm(BatchNormState::new(*features, *eps, *momentum)),
            LayerSpec::Batchnorm2d {
                channels,
                eps,
                momentum,
            } => Layer::BatchNorm(BatchNormState::new(*channels, *eps, *momentum)),
            LayerSpec::Relu => Layer::Activation(Activation::Relu),
            LayerSpec::Tanh => Layer::Activation(Activation::Tanh),
            LayerSpec::SoftmaxHead { var_floor } => Layer::SoftmaxHead {
                var_floor: *var_floor,
            },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Maxpool { size, stride } => {
                let [h, w, c] = match input {
                    [h, w, c] => [*h, *w, *c],
                    _ => return Err(Error::shape("maxpool", format!("{input:?}"))),
                };
                Layer::MaxPool(PoolGeometry::new([h, w, c], *size, *stride)?)
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Activation(Activation::Relu) => "relu",
            Layer::Activation(Activation::Tanh) => "tanh",
            Layer::SoftmaxHead { .. } => "softmax_head",
            Layer::Flatten => "flatten",
            Layer::MaxPool(_) => "maxpool",
        }
    }

    fn gaussians(&self) -> Option<[&GaussianParameter; 2]> {
        match self {
            Layer::Linear { w, b } | Layer::Conv2d { w, b, .. } => Some([w, b]),
            _ => None,
        }
    }

    fn gaussians_mut(&mut self) -> Option<[&mut GaussianParameter; 2]> {
        match self {
            Layer::Linear { w, b } | Layer::Conv2d { w, b, .. } => Some([w, b]),
            _ => None,
        }
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Trunk,
    Head(usize),
}

/// Position of one Gaussian parameter tensor in the flat canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub owner: Owner,
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat index space over every Gaussian parameter element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub slots: Vec<Slot>,
    /// Trunk elements occupy `0..trunk_len`.
    pub trunk_len: usize,
    pub total: usize,
    /// One entry per deterministic batch-norm tensor (γ, then β).
    pub aux: Vec<(Owner, usize)>,
}

impl ParamLayout {
    pub fn head_range(&self, head: usize) -> std::ops::Range<usize> {
        let mut it = self.slots.iter().filter(|s| s.owner == Owner::Head(head));
        match it.next() {
            Some(first) => {
                let end = it
                    .next_back()
                    .map_or(first.offset + first.len, |s| s.offset + s.len);
                first.offset..end
            }
            None => 0..0,
        }
    }
}

/// Forward state of a single layer, consumed by its adjoint.
pub(crate) enum LayerCache {
    Affine(moments::AffineCache),
    Conv(moments::ConvCache),
    BatchNorm(moments::BnCache),
    Activation(MomentPair),
    Softmax(moments::SoftmaxCache),
    Flatten,
    MaxPool(Vec<usize>, usize),
}

/// Gradients for the parameters a layer owns.
pub(crate) enum LayerParamGrads {
    None,
    Gaussian {
        w_mu: Vec<f64>,
        w_sigma2: Vec<f64>,
        b_mu: Vec<f64>,
        b_sigma2: Vec<f64>,
    },
    Aux {
        gamma: Vec<f64>,
        beta: Vec<f64>,
    },
}

impl Layer {
    pub(crate) fn forward(
        &self,
        x: &MomentPair,
        mode: BnMode,
    ) -> Result<(MomentPair, LayerCache, Option<BnBatchStats>)> {
        Ok(match self {
            Layer::Linear { w, b } => {
                let (y, c) = moments::linear_forward_cached(x, w, b)?;
                (y, LayerCache::Affine(c), None)
            }
            Layer::Conv2d { geometry, w, b } => {
                let (y, c) = moments::conv2d_forward_cached(x, w, b, geometry)?;
                (y, LayerCache::Conv(c), None)
            }
            Layer::BatchNorm(state) => {
                let (y, stats, c) = moments::batchnorm_forward_cached(x, state, mode)?;
                (y, LayerCache::BatchNorm(c), stats)
            }
            Layer::Activation(kind) => {
                let y = moments::activation_forward(x, *kind)?;
                (y, LayerCache::Activation(x.clone()), None)
            }
            Layer::SoftmaxHead { var_floor } => {
                let (y, c) = moments::softmax_head_forward_cached(x, *var_floor)?;
                (y, LayerCache::Softmax(c), None)
            }
            Layer::Flatten => {
                let s = x.shape();
                let rows = s[0];
                let shape = vec![rows, s[1..].iter().product()];
                let y = MomentPair::from_raw(shape, x.mean.data().to_vec(), x.var.data().to_vec());
                (y, LayerCache::Flatten, None)
            }
            Layer::MaxPool(g) => {
                let (y, argmax) = moments::maxpool_forward_cached(x, g)?;
                (y, LayerCache::MaxPool(argmax, x.mean.len()), None)
            }
        })
    }

    /// Returns input-moment gradients (empty when `need_input` is false and
    /// the layer can skip them) and the layer's parameter gradients.
    pub(crate) fn backward(
        &self,
        cache: &LayerCache,
        gm: &[f64],
        gv: &[f64],
        need_input: bool,
    ) -> (Vec<f64>, Vec<f64>, LayerParamGrads) {
        let gauss = |g: AffineGrads| {
            (
                g.d_mean,
                g.d_var,
                LayerParamGrads::Gaussian {
                    w_mu: g.w_mu,
                    w_sigma2: g.w_sigma2,
                    b_mu: g.b_mu,
                    b_sigma2: g.b_sigma2,
                },
            )
        };
        match (self, cache) {
            (Layer::Linear { w, .. }, LayerCache::Affine(c)) => {
                gauss(moments::linear_backward(c, w, gm, gv, need_input))
            }
            (Layer::Conv2d { geometry, w, .. }, LayerCache::Conv(c)) => {
                gauss(moments::conv2d_backward(c, w, geometry, gm, gv, need_input))
            }
            (Layer::BatchNorm(state), LayerCache::BatchNorm(c)) => {
                let g = moments::batchnorm_backward(c, state, gm, gv);
                (
                    g.d_mean,
                    g.d_var,
                    LayerParamGrads::Aux {
                        gamma: g.gamma,
                        beta: g.beta,
                    },
                )
            }
            (Layer::Activation(kind), LayerCache::Activation(x)) => {
                let (dm, dv) = moments::activation_backward(x, *kind, gm, gv);
                (dm, dv, LayerParamGrads::None)
            }
            (Layer::SoftmaxHead { .. }, LayerCache::Softmax(c)) => {
                let (dm, dv) = moments::softmax_head_backward(c, gm, gv);
                (dm, dv, LayerParamGrads::None)
            }
            (Layer::Flatten, LayerCache::Flatten) => {
                (gm.to_vec(), gv.to_vec(), LayerParamGrads::None)
            }
            (Layer::MaxPool(_), LayerCache::MaxPool(argmax, len)) => {
                let (dm, dv) = moments::maxpool_backward(argmax, *len, gm, gv);
                (dm, dv, LayerParamGrads::None)
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }
}

/// The network: architecture, layers, and a prune mask over trunk elements.
#[derive(Clone, Debug, PartialEq)]
pub struct MPModel {
    arch: Architecture,
    trunk: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
    layout: ParamLayout,
    /// Flat trunk indices removed by pruning; they receive no gradient.
    pruned: Vec<usize>,
}

impl MPModel {
    /// Builds a model with fan-in-scaled uniform means, zero bias means, and
    /// every pre-parameter set to `rho_init`.
    pub fn new(arch: Architecture, rho_init: f64, rng: &mut SeededRng) -> Result<Self> {
        if !rho_init.is_finite() {
            return Err(Error::Invalid(format!("rho_init {rho_init}")));
        }
        arch.validate()?;
        let build =
            |specs: &[LayerSpec], mut shape: Vec<usize>, rng: &mut SeededRng| -> Result<_> {
                let mut layers = Vec::with_capacity(specs.len());
                for spec in specs {
                    layers.push(Layer::build(spec, &shape, rho_init, rng)?);
                    shape = spec.output_shape(&shape)?;
                }
                Ok((layers, shape))
            };
        let (trunk, feat) = build(&arch.trunk, arch.input_shape.clone(), rng)?;
        let mut heads = Vec::with_capacity(arch.heads.len());
        for specs in &arch.heads {
            heads.push(build(specs, feat.clone(), rng)?.0);
        }
        Ok(Self::assemble(arch, trunk, heads))
    }

    pub(crate) fn assemble(arch: Architecture, trunk: Vec<Layer>, heads: Vec<Vec<Layer>>) -> Self {
        let mut slots = Vec::new();
        let mut aux = Vec::new();
        let mut offset = 0;
        let owners = std::iter::once((Owner::Trunk, &trunk))
            .chain(heads.iter().enumerate().map(|(h, l)| (Owner::Head(h), l)));
        let mut trunk_len = 0;
        for (owner, layers) in owners {
            for (i, layer) in layers.iter().enumerate() {
                if let Some(ps) = layer.gaussians() {
                    for p in ps {
                        slots.push(Slot {
                            owner,
                            offset,
                            len: p.len(),
                        });
                        offset += p.len();
                    }
                }
                if let Layer::BatchNorm(_) = layer {
                    aux.push((owner, i));
                    aux.push((owner, i));
                }
            }
            if owner == Owner::Trunk {
                trunk_len = offset;
            }
        }
        let layout = ParamLayout {
            slots,
            trunk_len,
            total: offset,
            aux,
        };
        Self {
            arch,
            trunk,
            heads,
            layout,
            pruned: Vec::new(),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn trunk(&self) -> &[Layer] {
        &self.trunk
    }

    pub fn head(&self, task: usize) -> Result<&[Layer]> {
        self.heads
            .get(task)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownTask(task))
    }

    pub fn pruned(&self) -> &[usize] {
        &self.pruned
    }

    pub(crate) fn set_pruned(&mut self, mut idx: Vec<usize>) {
        idx.sort_unstable();
        idx.dedup();
        self.pruned = idx;
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(self.heads.iter().flatten())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk.iter_mut().chain(self.heads.iter_mut().flatten())
    }

    /// Gaussian parameters in canonical order, aligned with `layout().slots`.
    pub fn params(&self) -> Vec<&GaussianParameter> {
        self.layers()
            .filter_map(Layer::gaussians)
            .flatten()
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut GaussianParameter> {
        self.layers_mut()
            .filter_map(Layer::gaussians_mut)
            .flatten()
            .collect()
    }

    /// Deterministic batch-norm tensors (γ then β per layer), aligned with
    /// `layout().aux`.
    pub fn aux_params(&self) -> Vec<&Tensor> {
        self.layers()
            .filter_map(|l| match l {
                Layer::BatchNorm(s) => Some([&s.gamma, &s.beta]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn aux_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .filter_map(|l| match l {
                Layer::BatchNorm(s) => Some([&mut s.gamma, &mut s.beta]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn batchnorm_states(&self) -> Vec<&BatchNormState> {
        self.layers()
            .filter_map(|l| match l {
                Layer::BatchNorm(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    pub fn batchnorm_states_mut(&mut self) -> Vec<&mut BatchNormState> {
        self.layers_mut()
            .filter_map(|l| match l {
                Layer::BatchNorm(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    /// Flat means in canonical order.
    pub fn flat_mu(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.mu.data().iter().copied())
            .collect()
    }

    /// Flat variances `softplus(rho)` in canonical order.
    pub fn flat_sigma2(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.rho.data().iter().map(|&r| moments::softplus(r)))
            .collect()
    }

    /// Predictive moments for a `[input_shape]` sample or a batch of them,
    /// with batch norm in eval mode.
    pub fn forward(&self, x: &Tensor, task: usize) -> Result<MomentPair> {
        let head = self.head(task)?;
        let single = x.shape() == self.arch.input_shape.as_slice();
        let batched_shape: Vec<usize> = if single {
            std::iter::once(1)
                .chain(x.shape().iter().copied())
                .collect()
        } else {
            if x.shape().len() != self.arch.input_shape.len() + 1
                || x.shape()[1..] != self.arch.input_shape[..]
            {
                return Err(Error::shape(
                    "model_forward",
                    format!(
                        "input {:?} vs sample shape {:?}",
                        x.shape(),
                        self.arch.input_shape
                    ),
                ));
            }
            x.shape().to_vec()
        };
        let mut h = MomentPair::deterministic(Tensor::from_raw(batched_shape, x.data().to_vec()));
        for layer in self.trunk.iter().chain(head) {
            h = layer.forward(&h, BnMode::Eval)?.0;
        }
        if single {
            let n = h.mean.len();
            h = MomentPair::from_raw(vec![n], h.mean.into_data(), h.var.into_data());
        }
        Ok(h)
    }

    /// SHA-256 over every parameter and state value, for change detection.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        for p in self.params() {
            feed(&p.mu);
            feed(&p.rho);
        }
        for s in self.batchnorm_states() {
            feed(&s.gamma);
            feed(&s.beta);
            feed(&s.running_mean);
            feed(&s.running_var);
        }
        for &i in &self.pruned {
            h.update((i as u64).to_le_bytes());
        }
        crate::report::hex(&h.finalize())
    }
}
