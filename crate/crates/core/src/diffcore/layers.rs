//! Parameterised layers and the [`Module`] visitor used for optimisation
//! and checkpointing.

use std::sync::Mutex;

use rand::Rng;

use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Read-only walk over trainable parameters and persistent buffers.
pub trait Visitor {
    fn param(&mut self, name: &str, t: &Tensor);
    fn buffer(&mut self, _name: &str, _shape: &[usize], _data: &[f64]) {}
}

/// Mutable walk; used by optimisers (params) and checkpoint loading (both).
pub trait VisitorMut {
    fn param(&mut self, name: &str, t: &mut Tensor);
    fn buffer(&mut self, _name: &str, _shape: &[usize], _data: &mut Vec<f64>) {}
}

pub trait Module {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor);
    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut);
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All trainable parameters by dotted name, in visiting order.
pub fn named_params(m: &dyn Module) -> Vec<(String, Tensor)> {
    struct Collect(Vec<(String, Tensor)>);
    impl Visitor for Collect {
        fn param(&mut self, name: &str, t: &Tensor) {
            self.0.push((name.to_string(), t.clone()));
        }
    }
    let mut c = Collect(Vec::new());
    m.visit("", &mut c);
    c.0
}

pub fn param_count(m: &dyn Module) -> usize {
    named_params(m).iter().map(|(_, t)| t.numel()).sum()
}

pub fn zero_grads(m: &dyn Module) {
    for (_, t) in named_params(m) {
        t.zero_grad();
    }
}

/// Replaces the parameter called `name` with a leaf holding `data`.
pub fn set_param(m: &mut dyn Module, name: &str, data: Vec<f64>) -> Result<()> {
    struct Set<'a> {
        name: &'a str,
        data: Option<Vec<f64>>,
        err: Option<Error>,
    }
    impl VisitorMut for Set<'_> {
        fn param(&mut self, name: &str, t: &mut Tensor) {
            if name == self.name {
                if let Some(d) = self.data.take() {
                    match t.with_data(d) {
                        Ok(nt) => *t = nt,
                        Err(e) => self.err = Some(e),
                    }
                }
            }
        }
    }
    let mut s = Set { name, data: Some(data), err: None };
    m.visit_mut("", &mut s);
    if let Some(e) = s.err {
        return Err(e);
    }
    if s.data.is_some() {
        return Err(Error::contract(format!("no parameter named {name}")));
    }
    Ok(())
}

fn uniform_init(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    /// Weights uniform in ±sqrt(1/fan_in), bias zero.
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = Tensor::param(&[fan_out, fan_in], uniform_init(rng, fan_out * fan_in, fan_in))
            .expect("consistent shape");
        let bias = bias.then(|| Tensor::param(&[fan_out], vec![0.0; fan_out]).expect("consistent shape"));
        Self { weight, bias }
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::dim(format!("linear weight {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::dim(format!(
                    "linear bias {:?} vs weight {:?}",
                    b.shape(),
                    weight.shape()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }
}

impl Module for LinearLayer {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Batch normalisation over the channel axis of `[N, C]` (per-feature) or
/// `[C, H, W]` (per-plane) inputs.
#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running: Mutex<RunningStats>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Clone for BatchNorm {
    fn clone(&self) -> Self {
        let r = self.running.lock().expect("running stats lock");
        Self {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running: Mutex::new(RunningStats {
                mean: r.mean.clone(),
                var: r.var.clone(),
            }),
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("shape"),
            beta: Tensor::param(&[channels], vec![0.0; channels]).expect("shape"),
            running: Mutex::new(RunningStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            }),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn with_affine(gamma: Tensor, beta: Tensor) -> Result<Self> {
        if gamma.shape().len() != 1 || gamma.shape() != beta.shape() {
            return Err(Error::dim(format!(
                "batchnorm gamma {:?} / beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let bn = Self::new(gamma.numel());
        Ok(Self { gamma, beta, ..bn })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running_mean(&self) -> Vec<f64> {
        self.running.lock().expect("running stats lock").mean.clone()
    }

    pub fn running_var(&self) -> Vec<f64> {
        self.running.lock().expect("running stats lock").var.clone()
    }

    pub fn set_running(&self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("running stats length"));
        }
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::contract("running_var must be strictly positive"));
        }
        *self.running.lock().expect("running stats lock") = RunningStats { mean, var };
        Ok(())
    }

    /// Training mode normalises with batch statistics and folds them into the
    /// running estimates; inference mode uses the running estimates.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let c = self.channels();
        let (outer, inner) = match x.shape() {
            [n, ch] if *ch == c => (*n, 1),
            [ch, h, w] if *ch == c => (1, h * w),
            s => return Err(Error::dim(format!("batchnorm over {c} channels got {s:?}"))),
        };
        let m = outer * inner;
        if m == 0 {
            return Err(Error::EmptySet("batchnorm over an empty batch".into()));
        }
        let xd = x.data();
        let idx = move |o: usize, ch: usize, i: usize| (o * c + ch) * inner + i;

        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for o in 0..outer {
                    for i in 0..inner {
                        s += xd[idx(o, ch, i)];
                    }
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for o in 0..outer {
                    for i in 0..inner {
                        let d = xd[idx(o, ch, i)] - mu;
                        v += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = v / m as f64;
            }
            let mut r = self.running.lock().expect("running stats lock");
            // Biased variance, the same one used to normalise: on small feature
            // maps the n/(n-1) correction alone opens a visible train/eval gap.
            for ch in 0..c {
                r.mean[ch] = (1.0 - self.momentum) * r.mean[ch] + self.momentum * mean[ch];
                r.var[ch] = (1.0 - self.momentum) * r.var[ch] + self.momentum * var[ch];
            }
            (mean, var)
        } else {
            let r = self.running.lock().expect("running stats lock");
            (r.mean.clone(), r.var.clone())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let gamma = self.gamma.to_vec();
        let beta = self.beta.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                for i in 0..inner {
                    let k = idx(o, ch, i);
                    xhat[k] = (xd[k] - mean[ch]) * inv_std[ch];
                    out[k] = gamma[ch] * xhat[k] + beta[ch];
                }
            }
        }

        Ok(Tensor::from_op(
            x.shape().to_vec(),
            out,
            &[x, &self.gamma, &self.beta],
            move |g| {
                let mut g_gamma = vec![0.0; c];
                let mut g_beta = vec![0.0; c];
                let mut g_xhat_sum = vec![0.0; c];
                let mut g_xhat_dot = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        for i in 0..inner {
                            let k = idx(o, ch, i);
                            g_gamma[ch] += g[k] * xhat[k];
                            g_beta[ch] += g[k];
                            let gx = g[k] * gamma[ch];
                            g_xhat_sum[ch] += gx;
                            g_xhat_dot[ch] += gx * xhat[k];
                        }
                    }
                }
                let mut gx = vec![0.0; g.len()];
                let mf = m as f64;
                for o in 0..outer {
                    for ch in 0..c {
                        for i in 0..inner {
                            let k = idx(o, ch, i);
                            let gh = g[k] * gamma[ch];
                            gx[k] = if training {
                                inv_std[ch] * (gh - g_xhat_sum[ch] / mf - xhat[k] * g_xhat_dot[ch] / mf)
                            } else {
                                gh * inv_std[ch]
                            };
                        }
                    }
                }
                vec![Some(gx), Some(g_gamma), Some(g_beta)]
            },
        ))
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "gamma"), &self.gamma);
        v.param(&join(prefix, "beta"), &self.beta);
        let r = self.running.lock().expect("running stats lock");
        v.buffer(&join(prefix, "running_mean"), &[r.mean.len()], &r.mean);
        v.buffer(&join(prefix, "running_var"), &[r.var.len()], &r.var);
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        v.param(&join(prefix, "gamma"), &mut self.gamma);
        v.param(&join(prefix, "beta"), &mut self.beta);
        let r = self.running.get_mut().expect("running stats lock");
        let c = r.mean.len();
        v.buffer(&join(prefix, "running_mean"), &[c], &mut r.mean);
        v.buffer(&join(prefix, "running_var"), &[c], &mut r.var);
    }
}

/// Square-kernel 2D convolution.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * k * k;
        let kernel = Tensor::param(&[c_out, c_in, k, k], uniform_init(rng, c_out * fan_in, fan_in))
            .expect("consistent shape");
        let bias = bias.then(|| Tensor::param(&[c_out], vec![0.0; c_out]).expect("shape"));
        Self { kernel, bias, stride, padding }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.kernel, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl Module for Conv2dLayer {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "kernel"), &self.kernel);
        if let Some(b) = &self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        v.param(&join(prefix, "kernel"), &mut self.kernel);
        if let Some(b) = &mut self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }
}

/// Non-overlapping transposed convolution (kernel = stride).
#[derive(Debug, Clone)]
pub struct UpConvLayer {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

impl UpConvLayer {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, stride: usize, bias: bool) -> Self {
        let kernel = Tensor::param(
            &[c_in, c_out, stride, stride],
            uniform_init(rng, c_in * c_out * stride * stride, c_in),
        )
        .expect("consistent shape");
        let bias = bias.then(|| Tensor::param(&[c_out], vec![0.0; c_out]).expect("shape"));
        Self { kernel, bias }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::upconv2d(x, &self.kernel, self.bias.as_ref())
    }
}

impl Module for UpConvLayer {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "kernel"), &self.kernel);
        if let Some(b) = &self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        v.param(&join(prefix, "kernel"), &mut self.kernel);
        if let Some(b) = &mut self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }
}

/// Linear → BatchNorm → ReLU.
#[derive(Debug, Clone)]
pub struct LinearBnRelu {
    pub linear: LinearLayer,
    pub bn: BatchNorm,
}

impl LinearBnRelu {
    /// The linear layer carries no bias: the following BN shift subsumes it.
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            linear: LinearLayer::new(rng, fan_in, fan_out, false),
            bn: BatchNorm::new(fan_out),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.linear.in_dim(), self.linear.out_dim())
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let h = self.linear.forward(x)?;
        Ok(ops::relu(&self.bn.forward(&h, training)?))
    }
}

impl Module for LinearBnRelu {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        self.linear.visit(&join(prefix, "linear"), v);
        self.bn.visit(&join(prefix, "bn"), v);
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        self.linear.visit_mut(&join(prefix, "linear"), v);
        self.bn.visit_mut(&join(prefix, "bn"), v);
    }
}

/// Conv → BatchNorm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    /// Bias-free `k×k` convolution followed by BN and ReLU.
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            conv: Conv2dLayer::new(rng, c_in, c_out, k, stride, padding, false),
            bn: BatchNorm::new(c_out),
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let h = self.conv.forward(x)?;
        Ok(ops::relu(&self.bn.forward(&h, training)?))
    }
}

impl Module for ConvBnRelu {
    fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
        self.conv.visit(&join(prefix, "conv"), v);
        self.bn.visit(&join(prefix, "bn"), v);
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
        self.conv.visit_mut(&join(prefix, "conv"), v);
        self.bn.visit_mut(&join(prefix, "bn"), v);
    }
}
