//! Layer specifications and the fixed-sequence network that executes them.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::Rng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Affine map to `width` outputs with optional weight penalties.
    Dense {
        width: usize,
        l1: f64,
        l2: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    BatchNorm,
    Dropout {
        rate: f64,
    },
    /// Maps every value below `floor` to `floor`.
    ClipFloor {
        floor: f64,
    },
    MultiplyScalar {
        factor: f64,
    },
    /// `ln(1 + e^(x + shift))`, strictly positive. A shift of `ln(e - 1)`
    /// makes a zero input map to exactly one.
    Softplus {
        shift: f64,
    },
}

impl LayerSpec {
    pub fn dense(width: usize) -> Self {
        LayerSpec::Dense {
            width,
            l1: 0.0,
            l2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { width, l1, l2 } => {
                if width == 0 {
                    return Err(Error::Config("dense layer width must be positive".into()));
                }
                if l1 < 0.0 || l2 < 0.0 || !l1.is_finite() || !l2.is_finite() {
                    return Err(Error::Config("penalty coefficients must be >= 0".into()));
                }
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return Err(Error::Config(format!("dropout rate {rate} not in [0,1)")));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Dense {
        w: ParamId,
        b: ParamId,
    },
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
    },
    Dropout {
        rate: f64,
    },
    ClipFloor {
        floor: f64,
    },
    MultiplyScalar {
        factor: f64,
    },
    Softplus {
        shift: f64,
    },
}

/// What a layer remembers from its forward pass for the backward pass.
#[derive(Debug, Clone)]
enum Cache {
    Input(Tensor2),
    Output(Tensor2),
    Mask(Vec<f64>),
    Norm { xhat: Tensor2, inv_std: Vec<f64> },
    NormEval { xhat: Tensor2, inv_std: Vec<f64> },
    Nothing,
}

/// A fixed sequence of layers whose parameters live in a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Sequential {
    input_width: usize,
    output_width: usize,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    caches: Vec<Cache>,
}

impl Sequential {
    /// Registers the parameters of `specs` under `prefix` and initialises
    /// dense weights with a seeded fan-in scaled uniform (He-style) draw.
    pub fn build(
        prefix: &str,
        input_width: usize,
        specs: &[LayerSpec],
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input_width == 0 {
            return Err(Error::Config("network input width must be positive".into()));
        }
        let mut width = input_width;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let layer = match *spec {
                LayerSpec::Dense { width: out, l1, l2 } => {
                    let bound = (6.0 / width as f64).sqrt();
                    let data = (0..width * out).map(|_| rng.random_range(-bound..bound)).collect();
                    let w = store.add(
                        format!("{prefix}.{i}.weight"),
                        Tensor2::from_vec(width, out, data)?,
                        l1,
                        l2,
                    );
                    let b = store.add(format!("{prefix}.{i}.bias"), Tensor2::zeros(1, out), 0.0, 0.0);
                    width = out;
                    Layer::Dense { w, b }
                }
                LayerSpec::BatchNorm => Layer::BatchNorm {
                    gamma: store.add(format!("{prefix}.{i}.gamma"), Tensor2::filled(1, width, 1.0), 0.0, 0.0),
                    beta: store.add(format!("{prefix}.{i}.beta"), Tensor2::zeros(1, width), 0.0, 0.0),
                    running_mean: store.add_buffer(format!("{prefix}.{i}.running_mean"), vec![0.0; width]),
                    running_var: store.add_buffer(format!("{prefix}.{i}.running_var"), vec![1.0; width]),
                },
                LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu { slope },
                LayerSpec::Tanh => Layer::Tanh,
                LayerSpec::Dropout { rate } => Layer::Dropout { rate },
                LayerSpec::ClipFloor { floor } => Layer::ClipFloor { floor },
                LayerSpec::MultiplyScalar { factor } => Layer::MultiplyScalar { factor },
                LayerSpec::Softplus { shift } => Layer::Softplus { shift },
            };
            layers.push(layer);
        }
        Ok(Self {
            input_width,
            output_width: width,
            specs: specs.to_vec(),
            caches: vec![Cache::Nothing; layers.len()],
            layers,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Parameter ids of dense layers in order: `(weight, bias)`.
    pub fn dense_params(&self) -> Vec<(ParamId, ParamId)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense { w, b } => Some((*w, *b)),
                _ => None,
            })
            .collect()
    }

    pub fn forward(&mut self, store: &mut ParamStore, x: &Tensor2, mode: Mode, rng: &mut Rng) -> Result<Tensor2> {
        if x.cols() != self.input_width {
            return Err(Error::Dimension {
                context: "Sequential::forward input",
                expected: self.input_width,
                got: x.cols(),
            });
        }
        let mut h = x.clone();
        for (layer, cache) in self.layers.iter().zip(self.caches.iter_mut()) {
            h = forward_layer(layer, cache, store, h, mode, rng)?;
        }
        if !h.is_finite() {
            return Err(Error::Numerical("non-finite network output".into()));
        }
        Ok(h)
    }

    /// Propagates `grad_out` (dL/d output) back through the cached forward
    /// pass, accumulating parameter gradients. Returns dL/d input.
    pub fn backward(&mut self, store: &mut ParamStore, grad_out: &Tensor2) -> Result<Tensor2> {
        if grad_out.cols() != self.output_width {
            return Err(Error::Dimension {
                context: "Sequential::backward",
                expected: self.output_width,
                got: grad_out.cols(),
            });
        }
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(self.caches.iter_mut()).rev() {
            let c = std::mem::replace(cache, Cache::Nothing);
            g = backward_layer(layer, c, store, g)?;
        }
        Ok(g)
    }
}

fn forward_layer(
    layer: &Layer,
    cache: &mut Cache,
    store: &mut ParamStore,
    h: Tensor2,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor2> {
    Ok(match *layer {
        Layer::Dense { w, b } => {
            let mut out = h.matmul(&store.param(w).value)?;
            out.add_row_vector(store.param(b).value.data());
            *cache = Cache::Input(h);
            out
        }
        Layer::LeakyRelu { slope } => {
            let out = h.map(|x| if x >= 0.0 { x } else { slope * x });
            *cache = Cache::Input(h);
            out
        }
        Layer::Tanh => {
            let out = h.map(f64::tanh);
            *cache = Cache::Output(out.clone());
            out
        }
        Layer::ClipFloor { floor } => {
            let out = h.map(|x| if x < floor { floor } else { x });
            *cache = Cache::Input(h);
            out
        }
        Layer::MultiplyScalar { factor } => {
            *cache = Cache::Nothing;
            h.map(|x| x * factor)
        }
        Layer::Softplus { shift } => {
            let out = h.map(|x| softplus(x + shift));
            *cache = Cache::Input(h);
            out
        }
        Layer::Dropout { rate } => match mode {
            Mode::Eval => {
                *cache = Cache::Nothing;
                h
            }
            Mode::Train => {
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..h.data().len())
                    .map(|_| {
                        if rate == 0.0 || rng.random::<f64>() >= rate {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mut out = h;
                for (x, m) in out.data_mut().iter_mut().zip(&mask) {
                    *x *= m;
                }
                *cache = Cache::Mask(mask);
                out
            }
        },
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        } => {
            let (n, d) = h.shape();
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = h.sum_rows();
                    mean.iter_mut().for_each(|m| *m /= n as f64);
                    let mut var = vec![0.0; d];
                    for r in 0..n {
                        for (j, x) in h.row(r).iter().enumerate() {
                            var[j] += (x - mean[j]).powi(2);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= n as f64);
                    let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                    let rm = store.buffer_mut(running_mean);
                    for (r, m) in rm.iter_mut().zip(&mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                    let rv = store.buffer_mut(running_var);
                    for (r, v) in rv.iter_mut().zip(&var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbiased;
                    }
                    (mean, var)
                }
                Mode::Eval => (store.buffer(running_mean).to_vec(), store.buffer(running_var).to_vec()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let g = store.param(gamma).value.data();
            let bt = store.param(beta).value.data();
            let mut xhat = h;
            let mut out = Tensor2::zeros(n, d);
            for r in 0..n {
                let xr = xhat.row_mut(r);
                for j in 0..d {
                    xr[j] = (xr[j] - mean[j]) * inv_std[j];
                }
                let o = out.row_mut(r);
                for j in 0..d {
                    o[j] = g[j] * xr[j] + bt[j];
                }
            }
            *cache = match mode {
                Mode::Train => Cache::Norm { xhat, inv_std },
                Mode::Eval => Cache::NormEval { xhat, inv_std },
            };
            out
        }
    })
}

fn backward_layer(layer: &Layer, cache: Cache, store: &mut ParamStore, g: Tensor2) -> Result<Tensor2> {
    let missing = || Error::State("backward called before forward".into());
    Ok(match (layer, cache) {
        (Layer::Dense { w, b }, Cache::Input(x)) => {
            let gw = x.t_matmul(&g)?;
            let gb = g.sum_rows();
            let pw = store.param_mut(*w);
            for (acc, v) in pw.grad.data_mut().iter_mut().zip(gw.data()) {
                *acc += v;
            }
            let pb = store.param_mut(*b);
            for (acc, v) in pb.grad.data_mut().iter_mut().zip(&gb) {
                *acc += v;
            }
            g.matmul_t(&store.param(*w).value)?
        }
        (Layer::LeakyRelu { slope }, Cache::Input(x)) => {
            let mut g = g;
            for (gi, xi) in g.data_mut().iter_mut().zip(x.data()) {
                if *xi < 0.0 {
                    *gi *= slope;
                }
            }
            g
        }
        (Layer::Tanh, Cache::Output(y)) => {
            let mut g = g;
            for (gi, yi) in g.data_mut().iter_mut().zip(y.data()) {
                *gi *= 1.0 - yi * yi;
            }
            g
        }
        (Layer::ClipFloor { floor }, Cache::Input(x)) => {
            let mut g = g;
            for (gi, xi) in g.data_mut().iter_mut().zip(x.data()) {
                if *xi < *floor {
                    *gi = 0.0;
                }
            }
            g
        }
        (Layer::MultiplyScalar { factor }, _) => g.map(|v| v * factor),
        (Layer::Softplus { shift }, Cache::Input(x)) => {
            let mut g = g;
            for (gi, xi) in g.data_mut().iter_mut().zip(x.data()) {
                *gi *= sigmoid(*xi + shift);
            }
            g
        }
        (Layer::Dropout { .. }, Cache::Mask(mask)) => {
            let mut g = g;
            for (gi, m) in g.data_mut().iter_mut().zip(&mask) {
                *gi *= m;
            }
            g
        }
        (Layer::Dropout { .. }, Cache::Nothing) => g,
        (Layer::BatchNorm { gamma, beta, .. }, Cache::Norm { xhat, inv_std }) => {
            let (n, d) = g.shape();
            let nf = n as f64;
            let mut sum_g = vec![0.0; d];
            let mut sum_gx = vec![0.0; d];
            for r in 0..n {
                let gr = g.row(r);
                let xr = xhat.row(r);
                for j in 0..d {
                    sum_g[j] += gr[j];
                    sum_gx[j] += gr[j] * xr[j];
                }
            }
            accumulate(store, *gamma, &sum_gx);
            accumulate(store, *beta, &sum_g);
            let gm = store.param(*gamma).value.data().to_vec();
            let mut out = Tensor2::zeros(n, d);
            for r in 0..n {
                let gr = g.row(r);
                let xr = xhat.row(r);
                let o = out.row_mut(r);
                for j in 0..d {
                    o[j] = gm[j] * inv_std[j] / nf * (nf * gr[j] - sum_g[j] - xr[j] * sum_gx[j]);
                }
            }
            out
        }
        (Layer::BatchNorm { gamma, beta, .. }, Cache::NormEval { xhat, inv_std }) => {
            // Running statistics are constants in eval mode, so the layer is affine.
            let (n, d) = g.shape();
            let mut sum_g = vec![0.0; d];
            let mut sum_gx = vec![0.0; d];
            for r in 0..n {
                for j in 0..d {
                    sum_g[j] += g.get(r, j);
                    sum_gx[j] += g.get(r, j) * xhat.get(r, j);
                }
            }
            accumulate(store, *gamma, &sum_gx);
            accumulate(store, *beta, &sum_g);
            let gm = store.param(*gamma).value.data().to_vec();
            let mut out = g;
            for r in 0..n {
                let o = out.row_mut(r);
                for j in 0..d {
                    o[j] *= gm[j] * inv_std[j];
                }
            }
            out
        }
        _ => return Err(missing()),
    })
}

fn accumulate(store: &mut ParamStore, id: ParamId, g: &[f64]) {
    for (acc, v) in store.param_mut(id).grad.data_mut().iter_mut().zip(g) {
        *acc += v;
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
