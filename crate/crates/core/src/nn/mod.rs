//! Differentiable layers built on the tape, plus the candidate operation set.

mod ops;

pub use ops::{CandidateOpKind, OpInstance};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::{BufferId, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One forward pass: a fresh tape over a parameter store, in training or evaluation mode.
pub struct Ctx<'s> {
    pub tape: Tape,
    pub store: &'s mut ParamStore,
    pub training: bool,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s mut ParamStore, training: bool) -> Self {
        Self { tape: Tape::new(), store, training }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        self.tape.param(id, &p.value, p.requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backpropagates `loss` and adds the result into the store's gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        grads.accumulate_into(self.store);
        Ok(())
    }
}

/// A classifier mapping an NCHW batch to `[batch, classes]` logits.
pub trait Model {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var>;

    fn num_classes(&self) -> usize;

    /// Learnable scalars, computed from the architecture rather than the store.
    fn count_params(&self) -> usize;
}

fn channels_of(ctx: &Ctx, x: Var) -> usize {
    let s = ctx.value(x).shape();
    if s.len() == 4 {
        s[1]
    } else {
        0
    }
}

pub(crate) fn expect_channels(ctx: &Ctx, x: Var, want: usize, what: &str) -> Result<()> {
    let got = channels_of(ctx, x);
    if got != want {
        return Err(Error::Shape(format!(
            "{what}: expected {want} input channels, got tensor of shape {:?}",
            ctx.value(x).shape()
        )));
    }
    Ok(())
}

/// Bias-free 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        if spec.groups == 0 || in_channels % spec.groups != 0 || out_channels % spec.groups != 0 {
            return Err(Error::Shape(format!(
                "{name}: channels {in_channels}->{out_channels} incompatible with groups={}",
                spec.groups
            )));
        }
        let cin_g = in_channels / spec.groups;
        let fan_in = (cin_g * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let shape = [out_channels, cin_g, kernel, kernel];
        let weight = Tensor::from_fn(&shape, |_| dist.sample(rng));
        let weight = store.add(format!("{name}.weight"), ParamGroup::Weights, weight);
        Ok(Self { weight, spec, in_channels, out_channels, kernel })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.tape.conv2d(x, w, self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * (self.in_channels / self.spec.groups) * self.kernel * self.kernel
    }
}

/// Batch normalization with learnable scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ParamGroup::Weights, Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), ParamGroup::Weights, Tensor::zeros(&[channels]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]));
        Self { gamma, beta, running_mean, running_var, channels }
    }

    /// Training mode normalizes with batch statistics and folds them into the running
    /// averages; evaluation mode uses the running averages (initially mean 0, variance 1).
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.training {
            let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let blend = |buf: &mut Tensor, batch: &[f64]| {
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            };
            blend(ctx.store.buffer_mut(self.running_mean), &stats.mean);
            blend(ctx.store.buffer_mut(self.running_var), &stats.var_unbiased);
            Ok(y)
        } else {
            let mean = ctx.store.buffer(self.running_mean).data().to_vec();
            let var = ctx.store.buffer(self.running_var).data().to_vec();
            ctx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// ReLU → convolution → batch norm.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ReluConvBn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, kernel, spec)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), out_channels);
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let r = ctx.tape.relu(x);
        let c = self.conv.forward(ctx, r)?;
        self.bn.forward(ctx, c)
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}

/// Fully connected layer `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_features: usize, out_features: usize) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = Tensor::from_fn(&[in_features, out_features], |_| dist.sample(rng));
        let b = Tensor::from_fn(&[out_features], |_| dist.sample(rng));
        let weight = store.add(format!("{name}.weight"), ParamGroup::Weights, w);
        let bias = store.add(format!("{name}.bias"), ParamGroup::Weights, b);
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}

/// 3×3 convolution + batch norm that lifts the input image to the working channel width.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl Stem {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, in_channels: usize, channels: usize) -> Result<Self> {
        let spec = ConvSpec { stride: 1, padding: 1, dilation: 1, groups: 1 };
        let conv = Conv2d::new(store, rng, "stem.conv", in_channels, channels, 3, spec)?;
        let bn = BatchNorm::new(store, "stem.bn", channels);
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.conv.in_channels, "stem")?;
        let c = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, c)
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}
