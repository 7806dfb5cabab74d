use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node layout of a cell: two input nodes, `n_nodes − 3` intermediate nodes and one output
/// node that concatenates the intermediates.
///
/// Node indices `0` and `1` are the inputs; intermediates are `2..2 + n_intermediate`. Every
/// intermediate node has an incoming edge from each earlier node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTopology {
    n_nodes: usize,
}

/// A directed edge `from → to` between two nodes of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl CellTopology {
    pub const N_INPUTS: usize = 2;

    pub fn new(n_nodes: usize) -> Result<Self> {
        if n_nodes < 4 {
            return Err(Error::Config(format!(
                "a cell needs 2 inputs, 1 output and at least 1 intermediate node; got n_nodes={n_nodes}"
            )));
        }
        Ok(Self { n_nodes })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_intermediate(&self) -> usize {
        self.n_nodes - 3
    }

    /// Node indices of the intermediate nodes, which are also the output's concat set.
    pub fn intermediate_nodes(&self) -> std::ops::Range<usize> {
        Self::N_INPUTS..Self::N_INPUTS + self.n_intermediate()
    }

    pub fn num_edges(&self) -> usize {
        self.intermediate_nodes().sum()
    }

    /// All edges, grouped by target node and ordered by source within each group.
    pub fn edges(&self) -> Vec<Edge> {
        self.intermediate_nodes()
            .flat_map(|to| (0..to).map(move |from| Edge { from, to }))
            .collect()
    }

    /// Position of edge `from → to` in [`CellTopology::edges`].
    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        if !self.intermediate_nodes().contains(&to) || from >= to {
            return None;
        }
        let before: usize = (Self::N_INPUTS..to).sum();
        Some(before + from)
    }
}
