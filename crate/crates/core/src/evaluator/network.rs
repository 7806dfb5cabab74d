use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, Model, OpInstance, Stem};
use crate::params::ParamStore;
use crate::search_space::{stack_plan, CellInputs, CellPlan, CellTopology, Genotype};
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub genotype: Genotype,
    pub n_cells: usize,
    pub init_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.genotype.validate()?;
        if self.n_cells < 2 || self.init_channels == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "network needs n_cells >= 2 and non-zero widths/classes (cells {}, channels {}, in {}, classes {})",
                self.n_cells, self.init_channels, self.in_channels, self.num_classes
            )));
        }
        Ok(())
    }
}

/// A discrete cell: every intermediate node sums two chosen operations of earlier nodes.
#[derive(Clone, Debug)]
pub struct EvalCell {
    pub reduction: bool,
    inputs: CellInputs,
    nodes: Vec<[(OpInstance, usize); 2]>,
}

impl EvalCell {
    pub fn new(genotype: &Genotype, plan: &CellPlan, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Self> {
        let inputs = CellInputs::new(plan, store, rng, name)?;
        let mut nodes = Vec::new();
        for (k, pair) in genotype.cell(plan.reduction).iter().enumerate() {
            let node = CellTopology::N_INPUTS + k;
            let mut build = |(kind, from): (_, usize)| -> Result<(OpInstance, usize)> {
                let stride = if plan.reduction && from < CellTopology::N_INPUTS { 2 } else { 1 };
                let op = OpInstance::new(kind, plan.c, plan.c, stride, store, rng, &format!("{name}.node{node}.from{from}"))?;
                Ok((op, from))
            };
            nodes.push([build(pair[0])?, build(pair[1])?]);
        }
        Ok(Self { reduction: plan.reduction, inputs, nodes })
    }

    pub fn forward(&self, ctx: &mut Ctx, s0: Var, s1: Var) -> Result<Var> {
        let (a, b) = self.inputs.forward(ctx, s0, s1)?;
        let mut states = vec![a, b];
        for pair in &self.nodes {
            let x = pair[0].0.apply(ctx, states[pair[0].1])?;
            let y = pair[1].0.apply(ctx, states[pair[1].1])?;
            states.push(ctx.tape.add(x, y)?);
        }
        ctx.tape.concat_channels(&states[CellTopology::N_INPUTS..])
    }

    pub fn count_params(&self) -> usize {
        self.inputs.count_params() + self.nodes.iter().flatten().map(|(op, _)| op.count_params()).sum::<usize>()
    }
}

/// Network built from a genotype: stem, `n_cells` cells with untied weights (reduction cells
/// at `⌊n/3⌋` and `⌊2n/3⌋`), global average pooling and a linear classifier.
#[derive(Clone, Debug)]
pub struct EvalNetwork {
    pub config: NetworkConfig,
    stem: Stem,
    cells: Vec<EvalCell>,
    head: Linear,
}

impl EvalNetwork {
    pub fn new(config: NetworkConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let topology = config.genotype.topology()?;
        let stem = Stem::new(store, rng, config.in_channels, config.init_channels)?;
        let (plans, c_out) = stack_plan(config.n_cells, config.init_channels, topology.n_intermediate());
        let cells = plans
            .iter()
            .enumerate()
            .map(|(i, plan)| EvalCell::new(&config.genotype, plan, store, rng, &format!("cell{i}")))
            .collect::<Result<_>>()?;
        let head = Linear::new(store, rng, "head", c_out, config.num_classes);
        Ok(Self { config, stem, cells, head })
    }

    pub fn cells(&self) -> &[EvalCell] {
        &self.cells
    }

    /// Output of the last cell, before pooling.
    pub fn features(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let stem = self.stem.forward(ctx, x)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let out = cell.forward(ctx, s0, s1)?;
            s0 = s1;
            s1 = out;
        }
        Ok(s1)
    }
}

impl Model for EvalNetwork {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let features = self.features(ctx, x)?;
        let pooled = ctx.tape.global_avg_pool(features)?;
        self.head.forward(ctx, pooled)
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn count_params(&self) -> usize {
        self.stem.num_params() + self.cells.iter().map(EvalCell::count_params).sum::<usize>() + self.head.num_params()
    }
}
