//! Continuous cell search space: topology, mixed edges, the weight-sharing supernet and
//! discrete genotype derivation.

mod genotype;
mod mixed;
mod topology;

pub use genotype::{derive_genotype, edge_strength, AlphaParams, Genotype, NodeInputs};
pub use mixed::{cell_forward, mixed_edge_forward, MixedEdge};
pub use topology::{CellTopology, Edge};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::nn::{CandidateOpKind, Ctx, Linear, Model, OpInstance, ReluConvBn, Stem};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// 0-based positions of the two reduction cells in a stack of `n_cells`: `⌊n/3⌋` and `⌊2n/3⌋`.
pub fn reduction_positions(n_cells: usize) -> [usize; 2] {
    [n_cells / 3, 2 * n_cells / 3]
}

/// Channel bookkeeping for one cell of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellPlan {
    pub reduction: bool,
    pub reduction_prev: bool,
    /// Channels of the cell output two steps back.
    pub c_prev_prev: usize,
    /// Channels of the previous cell output.
    pub c_prev: usize,
    /// Working width of every node inside the cell.
    pub c: usize,
}

/// Lays out `n_cells` cells after a stem of `channels`; width doubles at each reduction cell
/// and every cell outputs `n_intermediate · c` channels. Returns the plans and the final width.
pub fn stack_plan(n_cells: usize, channels: usize, n_intermediate: usize) -> (Vec<CellPlan>, usize) {
    let reductions = reduction_positions(n_cells);
    let (mut c_pp, mut c_p, mut c) = (channels, channels, channels);
    let mut reduction_prev = false;
    let mut plans = Vec::with_capacity(n_cells);
    for i in 0..n_cells {
        let reduction = reductions.contains(&i);
        if reduction {
            c *= 2;
        }
        plans.push(CellPlan { reduction, reduction_prev, c_prev_prev: c_pp, c_prev: c_p, c });
        c_pp = c_p;
        c_p = n_intermediate * c;
        reduction_prev = reduction;
    }
    (plans, c_p)
}

/// Brings the two previous cell outputs to the working width and a common resolution. When
/// the previous cell reduced, the older input is factorized-reduced to match.
#[derive(Clone, Debug)]
pub struct CellInputs {
    pre0: Preprocess,
    pre1: ReluConvBn,
}

#[derive(Clone, Debug)]
enum Preprocess {
    Reduce(OpInstance),
    Conv(ReluConvBn),
}

impl CellInputs {
    pub fn new(plan: &CellPlan, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Self> {
        let pre0 = if plan.reduction_prev {
            Preprocess::Reduce(OpInstance::new(
                CandidateOpKind::Identity,
                plan.c_prev_prev,
                plan.c,
                2,
                store,
                rng,
                &format!("{name}.pre0"),
            )?)
        } else {
            Preprocess::Conv(ReluConvBn::new(store, rng, &format!("{name}.pre0"), plan.c_prev_prev, plan.c, 1, ConvSpec::default())?)
        };
        let pre1 = ReluConvBn::new(store, rng, &format!("{name}.pre1"), plan.c_prev, plan.c, 1, ConvSpec::default())?;
        Ok(Self { pre0, pre1 })
    }

    pub fn forward(&self, ctx: &mut Ctx, s0: Var, s1: Var) -> Result<(Var, Var)> {
        let a = match &self.pre0 {
            Preprocess::Reduce(op) => op.apply(ctx, s0)?,
            Preprocess::Conv(block) => block.forward(ctx, s0)?,
        };
        let b = self.pre1.forward(ctx, s1)?;
        Ok((a, b))
    }

    pub fn count_params(&self) -> usize {
        let p0 = match &self.pre0 {
            Preprocess::Reduce(op) => op.count_params(),
            Preprocess::Conv(block) => block.num_params(),
        };
        p0 + self.pre1.num_params()
    }
}

/// One cell of the supernet: preprocessing plus a mixed edge for every DAG edge.
#[derive(Clone, Debug)]
pub struct SearchCell {
    pub reduction: bool,
    inputs: CellInputs,
    edges: Vec<MixedEdge>,
}

impl SearchCell {
    pub fn new(topology: &CellTopology, plan: &CellPlan, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Self> {
        let inputs = CellInputs::new(plan, store, rng, name)?;
        let edges = topology
            .edges()
            .iter()
            .map(|e| {
                let stride = if plan.reduction && e.from < CellTopology::N_INPUTS { 2 } else { 1 };
                MixedEdge::new(plan.c, stride, store, rng, &format!("{name}.edge{}_{}", e.from, e.to))
            })
            .collect::<Result<_>>()?;
        Ok(Self { reduction: plan.reduction, inputs, edges })
    }

    pub fn edges(&self) -> &[MixedEdge] {
        &self.edges
    }

    pub fn forward(&self, ctx: &mut Ctx, topology: &CellTopology, s0: Var, s1: Var, alphas: &[Var]) -> Result<Var> {
        let (a, b) = self.inputs.forward(ctx, s0, s1)?;
        cell_forward(ctx, a, b, topology, &self.edges, alphas)
    }

    pub fn count_params(&self) -> usize {
        self.inputs.count_params() + self.edges.iter().map(MixedEdge::count_params).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperNetConfig {
    pub n_cells: usize,
    pub n_nodes: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

/// Weight-sharing search network: stem, stacked mixed cells, global average pooling and a
/// linear classifier. All regular cells share one set of α rows and all reduction cells
/// share another.
#[derive(Clone, Debug)]
pub struct SuperNet {
    pub config: SuperNetConfig,
    pub topology: CellTopology,
    stem: Stem,
    cells: Vec<SearchCell>,
    head: Linear,
    alpha_normal: Vec<ParamId>,
    alpha_reduce: Vec<ParamId>,
}

impl SuperNet {
    /// Registers all weights and α rows in `store`. α starts at uniform noise of magnitude
    /// `alpha_noise` around zero.
    pub fn new(config: SuperNetConfig, store: &mut ParamStore, rng: &mut impl Rng, alpha_noise: f64) -> Result<Self> {
        if config.n_cells < 2 || config.channels == 0 || config.num_classes == 0 || config.in_channels == 0 {
            return Err(Error::Config(format!("invalid supernet config {config:?}")));
        }
        let topology = CellTopology::new(config.n_nodes)?;
        let stem = Stem::new(store, rng, config.in_channels, config.channels)?;
        let (plans, c_out) = stack_plan(config.n_cells, config.channels, topology.n_intermediate());
        let cells = plans
            .iter()
            .enumerate()
            .map(|(i, plan)| SearchCell::new(&topology, plan, store, rng, &format!("cell{i}")))
            .collect::<Result<_>>()?;
        let head = Linear::new(store, rng, "head", c_out, config.num_classes);
        let mut alpha_rows = |kind: &str| -> Vec<ParamId> {
            topology
                .edges()
                .iter()
                .map(|e| {
                    let row = Tensor::from_fn(&[CandidateOpKind::COUNT], |_| {
                        if alpha_noise > 0.0 {
                            rng.gen_range(-alpha_noise..=alpha_noise)
                        } else {
                            0.0
                        }
                    });
                    store.add(format!("alpha.{kind}.{}_{}", e.from, e.to), ParamGroup::Architecture, row)
                })
                .collect()
        };
        let alpha_normal = alpha_rows("normal");
        let alpha_reduce = alpha_rows("reduce");
        Ok(Self { config, topology, stem, cells, head, alpha_normal, alpha_reduce })
    }

    pub fn cells(&self) -> &[SearchCell] {
        &self.cells
    }

    pub fn alpha_ids(&self, reduction: bool) -> &[ParamId] {
        if reduction {
            &self.alpha_reduce
        } else {
            &self.alpha_normal
        }
    }

    /// Current α values read from `store`.
    pub fn alphas(&self, store: &ParamStore) -> AlphaParams {
        let rows = |ids: &[ParamId]| {
            ids.iter()
                .map(|&id| {
                    let mut row = [0.0; CandidateOpKind::COUNT];
                    row.copy_from_slice(store.get(id).value.data());
                    row
                })
                .collect()
        };
        AlphaParams { topology: self.topology, normal: rows(&self.alpha_normal), reduce: rows(&self.alpha_reduce) }
    }

    pub fn set_alphas(&self, store: &mut ParamStore, alphas: &AlphaParams) {
        for (ids, rows) in [(&self.alpha_normal, &alphas.normal), (&self.alpha_reduce, &alphas.reduce)] {
            for (&id, row) in ids.iter().zip(rows) {
                store.get_mut(id).value.data_mut().copy_from_slice(row);
            }
        }
    }

    pub fn genotype(&self, store: &ParamStore) -> Genotype {
        derive_genotype(&self.alphas(store))
    }
}

impl Model for SuperNet {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let stem = self.stem.forward(ctx, x)?;
        let normal: Vec<Var> = self.alpha_normal.iter().map(|&id| ctx.param(id)).collect();
        let reduce: Vec<Var> = self.alpha_reduce.iter().map(|&id| ctx.param(id)).collect();
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let alphas = if cell.reduction { &reduce } else { &normal };
            let out = cell.forward(ctx, &self.topology, s0, s1, alphas)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = ctx.tape.global_avg_pool(s1)?;
        self.head.forward(ctx, pooled)
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn count_params(&self) -> usize {
        self.stem.num_params() + self.cells.iter().map(SearchCell::count_params).sum::<usize>() + self.head.num_params()
    }
}
