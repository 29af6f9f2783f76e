use super::layers::rbf_expand;
use super::{Hyperparams, ModelError, Result};
use crate::geometry::{build_neighbor_list, Structure};

/// Disjoint union of structure graphs with precomputed edge features.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub n_graphs: usize,
    pub num_rbf: usize,
    pub atomic_numbers: Vec<u32>,
    /// Graph index of every node.
    pub node_graph: Vec<usize>,
    /// Node ranges, `graph_offsets[g]..graph_offsets[g + 1]`.
    pub graph_offsets: Vec<usize>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// `[E, 3]` unit vectors `(r_i − r_j)/|r_i − r_j|`.
    pub edge_dir: Vec<f64>,
    /// `[E, K]`
    pub edge_basis: Vec<f64>,
}

impl GraphBatch {
    pub fn new(structures: &[&Structure], h: &Hyperparams) -> Result<Self> {
        let mut b = GraphBatch {
            n_graphs: structures.len(),
            num_rbf: h.num_rbf,
            atomic_numbers: Vec::new(),
            node_graph: Vec::new(),
            graph_offsets: vec![0],
            edge_src: Vec::new(),
            edge_dst: Vec::new(),
            edge_dir: Vec::new(),
            edge_basis: Vec::new(),
        };
        for (g, s) in structures.iter().enumerate() {
            if let Some(&z) = s.atomic_numbers.iter().find(|&&z| z > h.element_vocab) {
                return Err(ModelError::UnknownElement {
                    z,
                    vocab: h.element_vocab,
                });
            }
            let graph = build_neighbor_list(s, h.cutoff, h.max_neighbors)?;
            let offset = b.atomic_numbers.len();
            b.atomic_numbers.extend_from_slice(&s.atomic_numbers);
            b.node_graph.extend(std::iter::repeat_n(g, s.len()));
            b.graph_offsets.push(offset + s.len());
            b.edge_src.extend(graph.edge_src.iter().map(|&j| j + offset));
            b.edge_dst.extend(graph.edge_dst.iter().map(|&i| i + offset));
            for (v, &len) in graph.edge_vec.iter().zip(&graph.edge_len) {
                b.edge_dir.extend([v.x / len, v.y / len, v.z / len]);
            }
            b.edge_basis
                .extend(rbf_expand(&graph.edge_len, h.num_rbf, h.cutoff, h.envelope));
        }
        Ok(b)
    }

    /// Disjoint union of already-built batches, in order.
    pub fn concat(parts: &[&GraphBatch]) -> Self {
        let mut b = GraphBatch {
            n_graphs: 0,
            num_rbf: parts.first().map_or(0, |p| p.num_rbf),
            atomic_numbers: Vec::new(),
            node_graph: Vec::new(),
            graph_offsets: vec![0],
            edge_src: Vec::new(),
            edge_dst: Vec::new(),
            edge_dir: Vec::new(),
            edge_basis: Vec::new(),
        };
        for p in parts {
            assert_eq!(p.num_rbf, b.num_rbf, "batches with different basis sizes");
            let offset = b.atomic_numbers.len();
            let graphs = b.n_graphs;
            b.atomic_numbers.extend_from_slice(&p.atomic_numbers);
            b.node_graph.extend(p.node_graph.iter().map(|g| g + graphs));
            b.graph_offsets.extend(p.graph_offsets[1..].iter().map(|o| o + offset));
            b.edge_src.extend(p.edge_src.iter().map(|j| j + offset));
            b.edge_dst.extend(p.edge_dst.iter().map(|i| i + offset));
            b.edge_dir.extend_from_slice(&p.edge_dir);
            b.edge_basis.extend_from_slice(&p.edge_basis);
            b.n_graphs += p.n_graphs;
        }
        b
    }

    pub fn n_nodes(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }
}
