//! Semantic graph over regions and the graph-convolution feature pass.
//!
//! Edges either come from the dataset (detector-provided relations) or from
//! a nearest-neighbor fallback over box centers. One GCN layer then mixes
//! each vertex with its labeled in- and out-neighborhoods:
//!
//! ```text
//! ṽ_i = ReLU( W_self v_i + Σ_{j→i} W_in[label] v_j + Σ_{i→j} W_out[label] v_j + b )
//! ```

use rand::Rng;

use crate::error::{HipError, Result};
use crate::hierarchy::Region;
use crate::numerics::{Graph, NodeId, ParamStore};

/// Directed, labeled relation edges over `vertex_count` regions.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGraph {
    vertex_count: usize,
    edges: Vec<(usize, usize, usize)>,
}

impl SemanticGraph {
    /// Validates the edge list: no self-loops, indices in range, no
    /// duplicate triples.
    pub fn new(vertex_count: usize, edges: Vec<(usize, usize, usize)>) -> Result<SemanticGraph> {
        let mut seen = std::collections::BTreeSet::new();
        for &(src, dst, label) in &edges {
            if src == dst {
                return Err(HipError::Input(format!(
                    "edge ({src}, {dst}, {label}) is a self-loop"
                )));
            }
            if src >= vertex_count || dst >= vertex_count {
                return Err(HipError::Input(format!(
                    "edge ({src}, {dst}, {label}) references a vertex outside 0..{vertex_count}"
                )));
            }
            if !seen.insert((src, dst, label)) {
                return Err(HipError::Input(format!(
                    "duplicate edge ({src}, {dst}, {label})"
                )));
            }
        }
        Ok(SemanticGraph { vertex_count, edges })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edges(&self) -> &[(usize, usize, usize)] {
        &self.edges
    }

    /// Largest label used, if any edge exists.
    pub fn max_label(&self) -> Option<usize> {
        self.edges.iter().map(|&(_, _, l)| l).max()
    }
}

/// External edges pass through (validated); otherwise each region points at
/// its `k_fallback` nearest neighbors by box-center distance with label 0,
/// distance ties broken by ascending index.
pub fn build_graph(
    regions: &[Region],
    edges: Option<&[(usize, usize, usize)]>,
    k_fallback: usize,
) -> Result<SemanticGraph> {
    let k = regions.len();
    if let Some(edges) = edges {
        return SemanticGraph::new(k, edges.to_vec());
    }
    let centers: Vec<(f64, f64)> = regions.iter().map(|r| r.bbox.center()).collect();
    let mut out = Vec::new();
    for i in 0..k {
        let mut others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            let da = dist2(centers[i], centers[a]);
            let db = dist2(centers[i], centers[b]);
            da.total_cmp(&db).then(a.cmp(&b))
        });
        for &j in others.iter().take(k_fallback) {
            out.push((i, j, 0));
        }
    }
    SemanticGraph::new(k, out)
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// One GCN layer's parameter names: `{prefix}.w_self`, `{prefix}.w_in.{l}`
/// and `{prefix}.w_out.{l}` per relation label, and `{prefix}.b`.
#[derive(Clone, Debug)]
pub struct GcnParams {
    prefix: String,
    pub dim: usize,
    pub num_labels: usize,
}

impl GcnParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        num_labels: usize,
    ) -> Result<GcnParams> {
        if dim == 0 {
            return Err(HipError::Config("gcn feature dimension must be positive".into()));
        }
        store.insert_xavier(&format!("{prefix}.w_self"), dim, dim, rng)?;
        for l in 0..num_labels {
            store.insert_xavier(&format!("{prefix}.w_in.{l}"), dim, dim, rng)?;
            store.insert_xavier(&format!("{prefix}.w_out.{l}"), dim, dim, rng)?;
        }
        store.insert_zero_vector(&format!("{prefix}.b"), dim)?;
        Ok(GcnParams::attach(prefix, dim, num_labels))
    }

    pub fn attach(prefix: &str, dim: usize, num_labels: usize) -> GcnParams {
        GcnParams {
            prefix: prefix.to_string(),
            dim,
            num_labels,
        }
    }
}

/// Enriches one feature set over the graph. Features must be one vector per
/// vertex; every edge label must have registered weights.
pub fn gcn_enrich(
    g: &mut Graph,
    store: &ParamStore,
    params: &GcnParams,
    features: &[NodeId],
    graph: &SemanticGraph,
) -> Result<Vec<NodeId>> {
    if features.len() != graph.vertex_count() {
        return Err(HipError::Input(format!(
            "{} feature vectors supplied for a graph over {} vertices",
            features.len(),
            graph.vertex_count()
        )));
    }
    if let Some(max) = graph.max_label() {
        if max >= params.num_labels {
            return Err(HipError::Config(format!(
                "edge label {max} has no weights (only {} labels registered under `{}`)",
                params.num_labels, params.prefix
            )));
        }
    }

    let w_self = g.param(store, &format!("{}.w_self", params.prefix))?;
    let b = g.param(store, &format!("{}.b", params.prefix))?;
    let mut outputs = Vec::with_capacity(features.len());
    for (i, &v) in features.iter().enumerate() {
        let mut terms = vec![g.affine(w_self, v, None)?];
        for &(src, dst, label) in graph.edges() {
            if dst == i {
                let w_in = g.param(store, &format!("{}.w_in.{label}", params.prefix))?;
                terms.push(g.affine(w_in, features[src], None)?);
            }
            if src == i {
                let w_out = g.param(store, &format!("{}.w_out.{label}", params.prefix))?;
                terms.push(g.affine(w_out, features[dst], None)?);
            }
        }
        terms.push(b);
        let pre = g.add(&terms)?;
        outputs.push(g.relu(pre)?);
    }
    Ok(outputs)
}
