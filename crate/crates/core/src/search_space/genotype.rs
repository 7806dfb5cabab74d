use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::topology::CellTopology;
use crate::error::{Error, Result};
use crate::nn::CandidateOpKind;

/// The two `(operation, predecessor)` inputs of one intermediate node.
pub type NodeInputs = [(CandidateOpKind, usize); 2];

/// Discrete architecture: for each intermediate node of the regular and reduction cell, the
/// two operations it applies and which earlier nodes they read.
///
/// Serializes as
/// `{"n_nodes":7,"normal":[[["sep3",0],["sep5",1]],...],"normal_concat":[2,3,4,5],"reduce":[...],"reduce_concat":[2,3,4,5]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub n_nodes: usize,
    pub normal: Vec<NodeInputs>,
    pub normal_concat: Vec<usize>,
    pub reduce: Vec<NodeInputs>,
    pub reduce_concat: Vec<usize>,
}

impl Genotype {
    pub fn topology(&self) -> Result<CellTopology> {
        CellTopology::new(self.n_nodes)
    }

    pub fn validate(&self) -> Result<()> {
        let topo = self.topology()?;
        let concat: Vec<usize> = topo.intermediate_nodes().collect();
        for (name, nodes, cat) in [
            ("normal", &self.normal, &self.normal_concat),
            ("reduce", &self.reduce, &self.reduce_concat),
        ] {
            if nodes.len() != topo.n_intermediate() {
                return Err(Error::Config(format!(
                    "genotype {name} cell lists {} nodes, n_nodes={} needs {}",
                    nodes.len(),
                    self.n_nodes,
                    topo.n_intermediate()
                )));
            }
            for (k, inputs) in nodes.iter().enumerate() {
                let node = CellTopology::N_INPUTS + k;
                let [(_, a), (_, b)] = *inputs;
                if a == b || a >= node || b >= node {
                    return Err(Error::Config(format!(
                        "genotype {name} node {node} has invalid predecessors ({a}, {b})"
                    )));
                }
            }
            if *cat != concat {
                return Err(Error::Config(format!("genotype {name}_concat {cat:?}, expected {concat:?}")));
            }
        }
        Ok(())
    }

    pub fn cell(&self, reduction: bool) -> &[NodeInputs] {
        if reduction {
            &self.reduce
        } else {
            &self.normal
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("genotype serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Architecture logits as plain values: one length-7 row per edge, per cell kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaParams {
    pub topology: CellTopology,
    pub normal: Vec<[f64; CandidateOpKind::COUNT]>,
    pub reduce: Vec<[f64; CandidateOpKind::COUNT]>,
}

impl AlphaParams {
    pub fn zeros(topology: CellTopology) -> Self {
        let rows = vec![[0.0; CandidateOpKind::COUNT]; topology.num_edges()];
        Self { topology, normal: rows.clone(), reduce: rows }
    }

    /// Uniform noise in `[-scale, scale]` on every entry.
    pub fn random(topology: CellTopology, rng: &mut impl Rng, scale: f64) -> Self {
        let mut a = Self::zeros(topology);
        for row in a.normal.iter_mut().chain(a.reduce.iter_mut()) {
            for v in row.iter_mut() {
                *v = rng.gen_range(-scale..=scale);
            }
        }
        a
    }

    pub fn all_finite(&self) -> bool {
        self.normal.iter().chain(&self.reduce).flatten().all(|v| v.is_finite())
    }
}

/// `(max softmax weight, argmax op)` of one α row. Ties go to the lower op ordinal.
///
/// The normalizer is summed in ascending order so that rows holding the same values in a
/// different order get bit-identical strengths.
pub fn edge_strength(row: &[f64; CandidateOpKind::COUNT]) -> (f64, CandidateOpKind) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut terms = row.map(|v| (v - max).exp());
    terms.sort_by(f64::total_cmp);
    let total: f64 = terms.iter().sum();
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    let kind = CandidateOpKind::from_ordinal(best).expect("row has COUNT entries");
    ((row[best] - max).exp() / total, kind)
}

fn derive_cell(topology: &CellTopology, rows: &[[f64; CandidateOpKind::COUNT]]) -> Vec<NodeInputs> {
    topology
        .intermediate_nodes()
        .map(|node| {
            let mut candidates: Vec<(f64, usize, CandidateOpKind)> = (0..node)
                .map(|from| {
                    let idx = topology.edge_index(from, node).expect("valid edge");
                    let (strength, kind) = edge_strength(&rows[idx]);
                    (strength, from, kind)
                })
                .collect();
            // strongest first; equal strength keeps the lower predecessor (stable sort)
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut kept = [(candidates[0].2, candidates[0].1), (candidates[1].2, candidates[1].1)];
            kept.sort_by_key(|&(_, from)| from);
            kept
        })
        .collect()
}

/// Keeps, for every intermediate node, its two strongest incoming edges with their most
/// likely operation. Edge strength is the largest softmax weight of the edge's α row.
pub fn derive_genotype(alphas: &AlphaParams) -> Genotype {
    let topo = &alphas.topology;
    let concat: Vec<usize> = topo.intermediate_nodes().collect();
    Genotype {
        n_nodes: topo.n_nodes(),
        normal: derive_cell(topo, &alphas.normal),
        normal_concat: concat.clone(),
        reduce: derive_cell(topo, &alphas.reduce),
        reduce_concat: concat,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use CandidateOpKind::*;

    fn sample() -> Genotype {
        Genotype {
            n_nodes: 6,
            normal: vec![[(SepConv3x3, 0), (SepConv5x5, 1)], [(Identity, 0), (DilConv3x3, 2)], [(MaxPool3x3, 1), (AvgPool3x3, 3)]],
            normal_concat: vec![2, 3, 4],
            reduce: vec![[(MaxPool3x3, 0), (MaxPool3x3, 1)], [(DilConv5x5, 1), (Identity, 2)], [(SepConv3x3, 0), (Identity, 2)]],
            reduce_concat: vec![2, 3, 4],
        }
    }

    #[test]
    fn json_schema_and_roundtrip() {
        let g = sample();
        let json = g.to_json();
        assert!(json.starts_with(r#"{"n_nodes":6,"normal":[[["sep3",0],["sep5",1]],[["id",0],["dil3",2]]"#), "{json}");
        assert!(json.contains(r#""normal_concat":[2,3,4]"#));
        assert_eq!(Genotype::from_json(&json).unwrap(), g);
    }

    #[test]
    fn invalid_genotypes_rejected() {
        let mut g = sample();
        g.normal[1] = [(Identity, 1), (SepConv3x3, 1)];
        assert!(g.validate().is_err());
        let mut g = sample();
        g.reduce[0] = [(Identity, 0), (SepConv3x3, 2)];
        assert!(g.validate().is_err());
        let mut g = sample();
        g.normal_concat = vec![2, 3];
        assert!(g.validate().is_err());
        assert!(Genotype::from_json(r#"{"n_nodes":4,"normal":[[["conv7",0],["id",1]]],"normal_concat":[2],"reduce":[[["id",0],["id",1]]],"reduce_concat":[2]}"#).is_err());
    }

    #[test]
    fn three_edge_node_keeps_two_strongest() {
        // node 4 of a 6-node cell has edges from 0..4; give them strengths 0.5/0.3/0.2/low.
        let topo = CellTopology::new(6).unwrap();
        let mut a = AlphaParams::zeros(topo);
        let peaked = |p: f64, op: usize| {
            // one logit so that its softmax weight equals p, the remaining six share 1 - p
            let mut row = [0.0; 7];
            row[op] = (p / (1.0 - p) * 6.0).ln();
            row
        };
        a.normal[topo.edge_index(0, 4).unwrap()] = peaked(0.5, 2);
        a.normal[topo.edge_index(1, 4).unwrap()] = peaked(0.3, 5);
        a.normal[topo.edge_index(2, 4).unwrap()] = peaked(0.2, 1);
        a.normal[topo.edge_index(3, 4).unwrap()] = [0.0; 7];
        let g = derive_genotype(&a);
        assert_eq!(g.normal[2], [(DilConv3x3, 0), (AvgPool3x3, 1)]);
    }

    #[test]
    fn uniform_rows_tie_break_to_lowest_indices() {
        let g = derive_genotype(&AlphaParams::zeros(CellTopology::new(7).unwrap()));
        for node in g.normal.iter().chain(&g.reduce) {
            assert_eq!(*node, [(SepConv3x3, 0), (SepConv3x3, 1)]);
        }
        g.validate().unwrap();
    }
}
