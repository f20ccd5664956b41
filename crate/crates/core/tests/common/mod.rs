//! Independent oracles shared by the integration tests and the acceptance
//! suite: weight-sampling Monte Carlo for single layers, and a generator of
//! small random architectures for gradient checks.
#![allow(dead_code)]

use mpcl_core::grad::Batch;
use mpcl_core::moments::{
    activation_forward, batchnorm_forward, conv2d_forward, linear_forward, softmax_head_forward,
    softplus,
};
use mpcl_core::{
    Activation, Architecture, BatchNormState, BnMode, ConvGeometry, GaussianParameter, LayerSpec,
    MPModel, MomentPair, SeededRng, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv2d,
    BatchnormEval,
    Relu,
    Tanh,
    SoftmaxHead,
}

pub const LAYER_KINDS: [LayerKind; 6] = [
    LayerKind::Linear,
    LayerKind::Conv2d,
    LayerKind::BatchnormEval,
    LayerKind::Relu,
    LayerKind::Tanh,
    LayerKind::SoftmaxHead,
];

impl LayerKind {
    /// Allowed relative variance error; the Taylor-linearised layers get
    /// the looser bound.
    pub fn var_tolerance(self) -> f64 {
        match self {
            LayerKind::Tanh | LayerKind::SoftmaxHead => 0.10,
            _ => 0.05,
        }
    }
}

/// Worst deviations of one configuration.
#[derive(Clone, Copy, Debug)]
pub struct McOutcome {
    /// Largest `|mean_prop − mean_mc| / SE`.
    pub mean_z: f64,
    /// Largest `|var_prop − var_mc| / var_mc`.
    pub var_rel: f64,
}

fn gauss(rng: &mut SeededRng, mean: &[f64], var: &[f64], out: &mut [f64]) {
    for i in 0..mean.len() {
        out[i] = mean[i] + var[i].sqrt() * rng.normal();
    }
}

fn rand_vec(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Means in `±[lo, hi]` with a random sign, kept away from 0.
fn away_from_zero(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.uniform(lo, hi);
            if rng.below(2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn param(rng: &mut SeededRng, shape: &[usize], s2_lo: f64, s2_hi: f64) -> GaussianParameter {
    let n: usize = shape.iter().product();
    let mu = Tensor::new(shape.to_vec(), rand_vec(rng, n, -1.0, 1.0)).unwrap();
    let s2 = Tensor::new(shape.to_vec(), rand_vec(rng, n, s2_lo, s2_hi)).unwrap();
    GaussianParameter::from_sigma2(mu, &s2).unwrap()
}

fn sigma2(p: &GaussianParameter) -> Vec<f64> {
    p.rho.data().iter().map(|&r| softplus(r)).collect()
}

/// Welford accumulation of `draws` samples of a vector-valued function.
fn accumulate(draws: usize, dim: usize, mut f: impl FnMut(&mut [f64])) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut y = vec![0.0; dim];
    for k in 0..draws {
        f(&mut y);
        let n = (k + 1) as f64;
        for i in 0..dim {
            let d = y[i] - mean[i];
            mean[i] += d / n;
            m2[i] += d * (y[i] - mean[i]);
        }
    }
    let var = m2.iter().map(|v| v / (draws - 1) as f64).collect();
    (mean, var)
}

fn compare(prop: &MomentPair, mc_mean: &[f64], mc_var: &[f64], draws: usize) -> McOutcome {
    let mut out = McOutcome {
        mean_z: 0.0,
        var_rel: 0.0,
    };
    for i in 0..mc_mean.len() {
        let se = (mc_var[i] / draws as f64).sqrt();
        let diff = (prop.mean.data()[i] - mc_mean[i]).abs();
        let z = if se > 0.0 {
            diff / se
        } else if diff < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        out.mean_z = out.mean_z.max(z);
        let rel = (prop.var.data()[i] - mc_var[i]).abs() / mc_var[i];
        out.var_rel = out.var_rel.max(rel);
    }
    out
}

/// Samples inputs and weights, pushes each draw through the layer's plain
/// (deterministic) definition, and compares the sample moments with the
/// propagated ones.
pub fn monte_carlo_case(kind: LayerKind, seed: u64, draws: usize) -> McOutcome {
    let mut rng = SeededRng::new(seed);
    match kind {
        LayerKind::Linear => {
            let (n_in, n_out) = (2 + rng.below(6), 1 + rng.below(5));
            let xm = rand_vec(&mut rng, n_in, -1.0, 1.0);
            let xv = rand_vec(&mut rng, n_in, 0.0, 0.5);
            let w = param(&mut rng, &[n_in, n_out], 1e-3, 0.5);
            let b = param(&mut rng, &[n_out], 1e-3, 0.5);
            let x = MomentPair::new(
                Tensor::new(vec![n_in], xm.clone()).unwrap(),
                Tensor::new(vec![n_in], xv.clone()).unwrap(),
            )
            .unwrap();
            let prop = linear_forward(&x, &w, &b).unwrap();
            let (ws2, bs2) = (sigma2(&w), sigma2(&b));
            let mut xs = vec![0.0; n_in];
            let mut ws = vec![0.0; n_in * n_out];
            let mut bs = vec![0.0; n_out];
            let (mean, var) = accumulate(draws, n_out, |y| {
                gauss(&mut rng, &xm, &xv, &mut xs);
                gauss(&mut rng, w.mu.data(), &ws2, &mut ws);
                gauss(&mut rng, b.mu.data(), &bs2, &mut bs);
                for j in 0..n_out {
                    y[j] = bs[j] + (0..n_in).map(|i| xs[i] * ws[i * n_out + j]).sum::<f64>();
                }
            });
            compare(&prop, &mean, &var, draws)
        }
        LayerKind::Conv2d => {
            let (h, wd, c) = (3 + rng.below(3), 3 + rng.below(3), 1 + rng.below(2));
            let k = [1 + rng.below(3), 1 + rng.below(3)];
            let stride = [1 + rng.below(2), 1 + rng.below(2)];
            let pad = [rng.below(2), rng.below(2)];
            let f = 1 + rng.below(3);
            let g = ConvGeometry::new([h, wd, c], k, stride, pad).unwrap();
            let n_in = h * wd * c;
            let xm = rand_vec(&mut rng, n_in, -1.0, 1.0);
            let xv = rand_vec(&mut rng, n_in, 0.0, 0.5);
            let w = param(&mut rng, &[g.patch_len(), f], 1e-3, 0.5);
            let b = param(&mut rng, &[f], 1e-3, 0.5);
            let x = MomentPair::new(
                Tensor::new(vec![h, wd, c], xm.clone()).unwrap(),
                Tensor::new(vec![h, wd, c], xv.clone()).unwrap(),
            )
            .unwrap();
            let prop = conv2d_forward(&x, &w, &b, &g).unwrap();
            let [o1, o2] = g.out();
            let (ws2, bs2) = (sigma2(&w), sigma2(&b));
            let mut xs = vec![0.0; n_in];
            let mut ws = vec![0.0; g.patch_len() * f];
            let mut bs = vec![0.0; f];
            let (mean, var) = accumulate(draws, o1 * o2 * f, |y| {
                gauss(&mut rng, &xm, &xv, &mut xs);
                gauss(&mut rng, w.mu.data(), &ws2, &mut ws);
                gauss(&mut rng, b.mu.data(), &bs2, &mut bs);
                // direct sliding-window sum over the zero-padded input
                for oi in 0..o1 {
                    for oj in 0..o2 {
                        for ff in 0..f {
                            let mut s = bs[ff];
                            for ki in 0..k[0] {
                                for kj in 0..k[1] {
                                    let r = (oi * stride[0] + ki) as isize - pad[0] as isize;
                                    let q = (oj * stride[1] + kj) as isize - pad[1] as isize;
                                    if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                        continue;
                                    }
                                    for ch in 0..c {
                                        let xi = (r as usize * wd + q as usize) * c + ch;
                                        s += xs[xi] * ws[((ki * k[1] + kj) * c + ch) * f + ff];
                                    }
                                }
                            }
                            y[(oi * o2 + oj) * f + ff] = s;
                        }
                    }
                }
            });
            compare(&prop, &mean, &var, draws)
        }
        LayerKind::BatchnormEval => {
            let c = 1 + rng.below(4);
            let n = 1 + rng.below(3);
            let mut st = BatchNormState::new(c, 1e-5, 0.1);
            st.gamma = Tensor::new(vec![c], rand_vec(&mut rng, c, 0.5, 2.0)).unwrap();
            st.beta = Tensor::new(vec![c], rand_vec(&mut rng, c, -1.0, 1.0)).unwrap();
            st.running_mean = Tensor::new(vec![c], rand_vec(&mut rng, c, -1.0, 1.0)).unwrap();
            st.running_var = Tensor::new(vec![c], rand_vec(&mut rng, c, 0.1, 2.0)).unwrap();
            st.updates = 1;
            let xm = rand_vec(&mut rng, n * c, -2.0, 2.0);
            let xv = rand_vec(&mut rng, n * c, 0.01, 1.0);
            let x = MomentPair::new(
                Tensor::new(vec![n, c], xm.clone()).unwrap(),
                Tensor::new(vec![n, c], xv.clone()).unwrap(),
            )
            .unwrap();
            let (prop, _) = batchnorm_forward(&x, &st, BnMode::Eval).unwrap();
            let mut xs = vec![0.0; n * c];
            let (mean, var) = accumulate(draws, n * c, |y| {
                gauss(&mut rng, &xm, &xv, &mut xs);
                for i in 0..n * c {
                    let ch = i % c;
                    let norm = (xs[i] - st.running_mean.data()[ch])
                        / (st.running_var.data()[ch] + st.eps).sqrt();
                    y[i] = st.gamma.data()[ch] * norm + st.beta.data()[ch];
                }
            });
            compare(&prop, &mean, &var, draws)
        }
        LayerKind::Relu | LayerKind::Tanh => {
            let n = 2 + rng.below(8);
            let xm = away_from_zero(&mut rng, n, 0.1, 1.5);
            let xv = rand_vec(&mut rng, n, 1e-6, 1e-4);
            let x = MomentPair::new(
                Tensor::new(vec![n], xm.clone()).unwrap(),
                Tensor::new(vec![n], xv.clone()).unwrap(),
            )
            .unwrap();
            let act = if kind == LayerKind::Relu {
                Activation::Relu
            } else {
                Activation::Tanh
            };
            let prop = activation_forward(&x, act).unwrap();
            let mut xs = vec![0.0; n];
            let (mean, var) = accumulate(draws, n, |y| {
                gauss(&mut rng, &xm, &xv, &mut xs);
                for i in 0..n {
                    y[i] = if kind == LayerKind::Relu {
                        xs[i].max(0.0)
                    } else {
                        xs[i].tanh()
                    };
                }
            });
            compare(&prop, &mean, &var, draws)
        }
        LayerKind::SoftmaxHead => {
            let n = 2 + rng.below(6);
            let zm = rand_vec(&mut rng, n, -1.0, 1.0);
            let zv = rand_vec(&mut rng, n, 1e-4, 1e-3);
            let z = MomentPair::new(
                Tensor::new(vec![n], zm.clone()).unwrap(),
                Tensor::new(vec![n], zv.clone()).unwrap(),
            )
            .unwrap();
            let prop = softmax_head_forward(&z, 1e-12).unwrap();
            let mut zs = vec![0.0; n];
            let (mean, var) = accumulate(draws, n, |y| {
                gauss(&mut rng, &zm, &zv, &mut zs);
                let mx = zs.iter().copied().fold(f64::MIN, f64::max);
                let s: f64 = zs.iter().map(|v| (v - mx).exp()).sum();
                for i in 0..n {
                    y[i] = (zs[i] - mx).exp() / s;
                }
            });
            compare(&prop, &mean, &var, draws)
        }
    }
}

/// A random small network plus a labelled batch for head `task`.
pub struct GradCase {
    pub model: MPModel,
    pub batch: Batch,
    pub description: String,
}

fn head(features: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear {
            in_features: features,
            out_features: classes,
        },
        LayerSpec::SoftmaxHead { var_floor: 1e-6 },
    ]
}

/// Draws one of several architecture families (dense, convolutional,
/// with or without batch norm and pooling) with random sizes.
pub fn random_grad_case(seed: u64) -> GradCase {
    let mut rng = SeededRng::new(seed);
    let act = || {
        if seed % 2 == 0 {
            LayerSpec::Tanh
        } else {
            LayerSpec::Relu
        }
    };
    let family = rng.below(4);
    let (input_shape, trunk, features) = match family {
        0 => {
            let d = 2 + rng.below(6);
            let h = 2 + rng.below(8);
            (
                vec![d],
                vec![
                    LayerSpec::Linear {
                        in_features: d,
                        out_features: h,
                    },
                    act(),
                ],
                h,
            )
        }
        1 => {
            let d = 2 + rng.below(6);
            let h1 = 2 + rng.below(6);
            let h2 = 2 + rng.below(6);
            (
                vec![d],
                vec![
                    LayerSpec::Linear {
                        in_features: d,
                        out_features: h1,
                    },
                    LayerSpec::Batchnorm1d {
                        features: h1,
                        eps: 1e-5,
                        momentum: 0.1,
                    },
                    act(),
                    LayerSpec::Linear {
                        in_features: h1,
                        out_features: h2,
                    },
                    LayerSpec::Tanh,
                ],
                h2,
            )
        }
        2 => {
            let s = 4 + rng.below(3);
            let c = 1 + rng.below(2);
            let f = 1 + rng.below(3);
            // 3x3 conv with padding 1 keeps the size; pool 2x2 stride 2
            let o = s / 2;
            (
                vec![s, s, c],
                vec![
                    LayerSpec::Conv2d {
                        in_channels: c,
                        out_channels: f,
                        kernel: [3, 3],
                        stride: [1, 1],
                        pad: [1, 1],
                    },
                    LayerSpec::Batchnorm2d {
                        channels: f,
                        eps: 1e-5,
                        momentum: 0.1,
                    },
                    act(),
                    LayerSpec::Maxpool {
                        size: [2, 2],
                        stride: [2, 2],
                    },
                    LayerSpec::Flatten,
                ],
                o * o * f,
            )
        }
        _ => {
            let s = 3 + rng.below(3);
            let f = 1 + rng.below(3);
            let o = s - 1;
            (
                vec![s, s, 1],
                vec![
                    LayerSpec::Conv2d {
                        in_channels: 1,
                        out_channels: f,
                        kernel: [2, 2],
                        stride: [1, 1],
                        pad: [0, 0],
                    },
                    act(),
                    LayerSpec::Flatten,
                    LayerSpec::Linear {
                        in_features: o * o * f,
                        out_features: 4,
                    },
                    LayerSpec::Tanh,
                ],
                4,
            )
        }
    };
    let classes = [2 + rng.below(3), 2 + rng.below(3)];
    let arch = Architecture {
        input_shape: input_shape.clone(),
        trunk,
        heads: classes.iter().map(|&k| head(features, k)).collect(),
    };
    let description = format!("{arch:?}");
    let rho = rng.uniform(-4.0, -1.0);
    let mut model = MPModel::new(arch, rho, &mut rng).unwrap();
    for p in model.params_mut() {
        // spread the pre-parameters so σ² differs per coordinate
        let spread = (0..p.len()).map(|_| rho + rng.uniform(-1.0, 1.0)).collect();
        p.rho = Tensor::new(p.shape().to_vec(), spread).unwrap();
    }
    let b = 3 + rng.below(4);
    let per: usize = input_shape.iter().product();
    let mut shape = vec![b];
    shape.extend_from_slice(&input_shape);
    let x = Tensor::new(shape, (0..b * per).map(|_| rng.normal()).collect()).unwrap();
    let tasks: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let labels = tasks.iter().map(|&t| rng.below(classes[t])).collect();
    GradCase {
        model,
        batch: Batch::new(x, labels, tasks).unwrap(),
        description,
    }
}
