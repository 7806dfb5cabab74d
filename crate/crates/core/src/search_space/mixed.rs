use rand::Rng;

use super::topology::CellTopology;
use crate::error::{Error, Result};
use crate::nn::{CandidateOpKind, Ctx, OpInstance};
use crate::params::ParamStore;
use crate::tape::Var;

/// All seven candidate operations of one edge, sharing channel counts and stride.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub ops: Vec<OpInstance>,
}

impl MixedEdge {
    pub fn new(channels: usize, stride: usize, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Self> {
        let ops = CandidateOpKind::ALL
            .iter()
            .map(|&kind| OpInstance::new(kind, channels, channels, stride, store, rng, name))
            .collect::<Result<_>>()?;
        Ok(Self { ops })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, alpha: Var) -> Result<Var> {
        mixed_edge_forward(ctx, x, &self.ops, alpha)
    }

    pub fn count_params(&self) -> usize {
        self.ops.iter().map(OpInstance::count_params).sum()
    }
}

/// `Σ_o softmax(alpha)_o · o(x)` over the candidate operations of one edge.
pub fn mixed_edge_forward(ctx: &mut Ctx, x: Var, ops: &[OpInstance], alpha: Var) -> Result<Var> {
    if ops.len() != ctx.value(alpha).numel() {
        return Err(Error::Shape(format!(
            "{} operations but alpha has {} entries",
            ops.len(),
            ctx.value(alpha).numel()
        )));
    }
    let outputs = ops.iter().map(|op| op.apply(ctx, x)).collect::<Result<Vec<_>>>()?;
    let shape = ctx.value(outputs[0]).shape().to_vec();
    for (op, &o) in ops.iter().zip(&outputs) {
        if ctx.value(o).shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "mixed edge: {} produced {:?}, {} produced {shape:?}",
                op.kind,
                ctx.value(o).shape(),
                ops[0].kind
            )));
        }
    }
    let weights = ctx.tape.softmax(alpha, 0)?;
    ctx.tape.weighted_sum(&outputs, weights)
}

/// Evaluates a continuous cell on already preprocessed inputs.
///
/// Each intermediate node is the sum of its incoming mixed edges; the result is the channel
/// concatenation of all intermediate nodes. `edges` and `alphas` follow
/// [`CellTopology::edges`] order.
pub fn cell_forward(
    ctx: &mut Ctx,
    prev_prev: Var,
    prev: Var,
    topology: &CellTopology,
    edges: &[MixedEdge],
    alphas: &[Var],
) -> Result<Var> {
    if edges.len() != topology.num_edges() || alphas.len() != topology.num_edges() {
        return Err(Error::Shape(format!(
            "cell with {} edges given {} mixed edges and {} alpha rows",
            topology.num_edges(),
            edges.len(),
            alphas.len()
        )));
    }
    if ctx.value(prev_prev).shape() != ctx.value(prev).shape() {
        return Err(Error::Shape(format!(
            "cell inputs differ: {:?} vs {:?}",
            ctx.value(prev_prev).shape(),
            ctx.value(prev).shape()
        )));
    }
    let mut states = vec![prev_prev, prev];
    for node in topology.intermediate_nodes() {
        let mut acc: Option<Var> = None;
        for (from, &state) in states.iter().enumerate().take(node) {
            let idx = topology.edge_index(from, node).expect("edge exists");
            let y = edges[idx].forward(ctx, state, alphas[idx])?;
            acc = Some(match acc {
                None => y,
                Some(a) => ctx.tape.add(a, y)?,
            });
        }
        states.push(acc.expect("intermediate nodes have at least two predecessors"));
    }
    ctx.tape.concat_channels(&states[CellTopology::N_INPUTS..])
}
