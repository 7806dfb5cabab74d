use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{expect_channels, BatchNorm, Conv2d, Ctx};
use crate::error::{Error, Result};
use crate::kernels::{ConvSpec, PoolSpec};
use crate::params::ParamStore;
use crate::tape::Var;

/// The seven operations an edge of a cell can carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CandidateOpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    Identity,
}

impl CandidateOpKind {
    pub const ALL: [CandidateOpKind; 7] = [
        CandidateOpKind::SepConv3x3,
        CandidateOpKind::SepConv5x5,
        CandidateOpKind::DilConv3x3,
        CandidateOpKind::DilConv5x5,
        CandidateOpKind::MaxPool3x3,
        CandidateOpKind::AvgPool3x3,
        CandidateOpKind::Identity,
    ];

    pub const COUNT: usize = Self::ALL.len();

    /// Position of this kind in [`CandidateOpKind::ALL`], which is also its index in an α vector.
    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Short name used in genotype files.
    pub fn name(self) -> &'static str {
        match self {
            CandidateOpKind::SepConv3x3 => "sep3",
            CandidateOpKind::SepConv5x5 => "sep5",
            CandidateOpKind::DilConv3x3 => "dil3",
            CandidateOpKind::DilConv5x5 => "dil5",
            CandidateOpKind::MaxPool3x3 => "max3",
            CandidateOpKind::AvgPool3x3 => "avg3",
            CandidateOpKind::Identity => "id",
        }
    }

    pub fn is_parametric(self) -> bool {
        !matches!(self, CandidateOpKind::MaxPool3x3 | CandidateOpKind::AvgPool3x3 | CandidateOpKind::Identity)
    }
}

impl fmt::Display for CandidateOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CandidateOpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation {s:?}")))
    }
}

impl Serialize for CandidateOpKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CandidateOpKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// ReLU → depthwise k×k → pointwise 1×1 → batch norm.
#[derive(Clone, Debug)]
struct SepBlock {
    depthwise: Conv2d,
    pointwise: Conv2d,
    bn: BatchNorm,
}

impl SepBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let padding = dilation * (kernel - 1) / 2;
        let dw_spec = ConvSpec { stride, padding, dilation, groups: cin };
        let depthwise = Conv2d::new(store, rng, &format!("{name}.dw"), cin, cin, kernel, dw_spec)?;
        let pointwise = Conv2d::new(store, rng, &format!("{name}.pw"), cin, cout, 1, ConvSpec::default())?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout);
        Ok(Self { depthwise, pointwise, bn })
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let r = ctx.tape.relu(x);
        let d = self.depthwise.forward(ctx, r)?;
        let p = self.pointwise.forward(ctx, d)?;
        self.bn.forward(ctx, p)
    }

    fn num_params(&self) -> usize {
        self.depthwise.num_params() + self.pointwise.num_params() + self.bn.num_params()
    }
}

#[derive(Clone, Debug)]
enum OpBody {
    SepConv(SepBlock, SepBlock),
    DilConv(SepBlock),
    Pool { max: bool, bn: Option<BatchNorm> },
    Identity,
    FactorizedReduce { even: Conv2d, odd: Conv2d, bn: BatchNorm },
}

/// A candidate operation bound to channel counts, a stride and its own parameters.
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub kind: CandidateOpKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    body: OpBody,
}

const POOL: fn(usize) -> PoolSpec = |stride| PoolSpec { kernel: 3, stride, padding: 1 };

impl OpInstance {
    /// Builds `kind` and registers its parameters in `store` under `name`.
    ///
    /// Pools and identity keep the channel count, so they require `in == out`. A strided
    /// identity becomes a factorized reduce, and strided pools are followed by a batch norm.
    pub fn new(
        kind: CandidateOpKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("{name}: stride must be 1 or 2, got {stride}")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!("{name}: zero channels")));
        }
        let keeps_channels = !kind.is_parametric() && !(kind == CandidateOpKind::Identity && stride == 2);
        if keeps_channels && in_channels != out_channels {
            return Err(Error::Config(format!(
                "{name}: {kind} cannot map {in_channels} to {out_channels} channels"
            )));
        }
        let prefix = format!("{name}.{kind}");
        let body = match kind {
            CandidateOpKind::SepConv3x3 | CandidateOpKind::SepConv5x5 => {
                let k = if kind == CandidateOpKind::SepConv3x3 { 3 } else { 5 };
                let first = SepBlock::new(store, rng, &format!("{prefix}.0"), in_channels, in_channels, k, stride, 1)?;
                let second = SepBlock::new(store, rng, &format!("{prefix}.1"), in_channels, out_channels, k, 1, 1)?;
                OpBody::SepConv(first, second)
            }
            CandidateOpKind::DilConv3x3 | CandidateOpKind::DilConv5x5 => {
                let k = if kind == CandidateOpKind::DilConv3x3 { 3 } else { 5 };
                OpBody::DilConv(SepBlock::new(store, rng, &prefix, in_channels, out_channels, k, stride, 2)?)
            }
            CandidateOpKind::MaxPool3x3 | CandidateOpKind::AvgPool3x3 => OpBody::Pool {
                max: kind == CandidateOpKind::MaxPool3x3,
                bn: (stride == 2).then(|| BatchNorm::new(store, &format!("{prefix}.bn"), out_channels)),
            },
            CandidateOpKind::Identity if stride == 1 => OpBody::Identity,
            CandidateOpKind::Identity => {
                if out_channels % 2 != 0 {
                    return Err(Error::Config(format!(
                        "{name}: factorized reduce needs an even output width, got {out_channels}"
                    )));
                }
                let spec = ConvSpec { stride: 2, ..ConvSpec::default() };
                let half = out_channels / 2;
                OpBody::FactorizedReduce {
                    even: Conv2d::new(store, rng, &format!("{prefix}.even"), in_channels, half, 1, spec)?,
                    odd: Conv2d::new(store, rng, &format!("{prefix}.odd"), in_channels, half, 1, spec)?,
                    bn: BatchNorm::new(store, &format!("{prefix}.bn"), out_channels),
                }
            }
        };
        Ok(Self { kind, in_channels, out_channels, stride, body })
    }

    /// Applies the operation to an NCHW tensor with `in_channels` channels.
    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.in_channels, self.kind.name())?;
        match &self.body {
            OpBody::SepConv(a, b) => {
                let y = a.forward(ctx, x)?;
                b.forward(ctx, y)
            }
            OpBody::DilConv(block) => block.forward(ctx, x),
            OpBody::Pool { max, bn } => {
                let y = if *max {
                    ctx.tape.max_pool2d(x, POOL(self.stride))?
                } else {
                    ctx.tape.avg_pool2d(x, POOL(self.stride))?
                };
                match bn {
                    Some(bn) => bn.forward(ctx, y),
                    None => Ok(y),
                }
            }
            OpBody::Identity => Ok(x),
            OpBody::FactorizedReduce { even, odd, bn } => {
                let r = ctx.tape.relu(x);
                let a = even.forward(ctx, r)?;
                let shifted = ctx.tape.shift_crop(r)?;
                let b = odd.forward(ctx, shifted)?;
                let cat = ctx.tape.concat_channels(&[a, b])?;
                bn.forward(ctx, cat)
            }
        }
    }

    /// Learnable scalars in this operation: kernels plus norm scale/shift (no biases).
    pub fn count_params(&self) -> usize {
        match &self.body {
            OpBody::SepConv(a, b) => a.num_params() + b.num_params(),
            OpBody::DilConv(block) => block.num_params(),
            OpBody::Pool { bn, .. } => bn.as_ref().map_or(0, BatchNorm::num_params),
            OpBody::Identity => 0,
            OpBody::FactorizedReduce { even, odd, bn } => even.num_params() + odd.num_params() + bn.num_params(),
        }
    }
}
