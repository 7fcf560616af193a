//! Child-sum Tree-LSTM over the region hierarchy.
//!
//! Every tree node runs the same LSTM unit. A node's candidate/input/output
//! gates see the *sum* of its children's hidden states, while each child's
//! memory cell passes through its own forget gate — so the update is
//! invariant to child order. Leaves consume instance features, region nodes
//! consume region features, and the root consumes a learned fusion of the
//! mean-pooled region and instance features. The root's hidden state is the
//! image-level feature; each region node's hidden state is that region's
//! refined feature.

use rand::Rng;

use crate::error::{HipError, Result};
use crate::hierarchy::{HierarchyTree, NodeKind, Region};
use crate::numerics::{Graph, NodeId, ParamStore};

/// Names and shapes of one shared Tree-LSTM unit inside a [`ParamStore`].
///
/// Gate weights: `{prefix}.w_g` (H×D), `{prefix}.u_g` (H×H), `{prefix}.b_g`
/// (H) for g ∈ {u, i, f, o}; root fusion `{prefix}.w_r`, `{prefix}.w_m`
/// (both D×D).
#[derive(Clone, Debug)]
pub struct TreeLstmParams {
    prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
}

const GATES: [&str; 4] = ["u", "i", "f", "o"];

impl TreeLstmParams {
    /// Registers freshly initialized parameters under `prefix`.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<TreeLstmParams> {
        if input_dim == 0 || hidden == 0 {
            return Err(HipError::Config("tree-lstm dimensions must be positive".into()));
        }
        for gate in GATES {
            store.insert_xavier(&format!("{prefix}.w_{gate}"), hidden, input_dim, rng)?;
            store.insert_xavier(&format!("{prefix}.u_{gate}"), hidden, hidden, rng)?;
            store.insert_zero_vector(&format!("{prefix}.b_{gate}"), hidden)?;
        }
        store.insert_xavier(&format!("{prefix}.w_r"), input_dim, input_dim, rng)?;
        store.insert_xavier(&format!("{prefix}.w_m"), input_dim, input_dim, rng)?;
        Ok(TreeLstmParams::attach(prefix, input_dim, hidden))
    }

    /// Describes parameters that already exist in a store (e.g. loaded from
    /// a checkpoint or hand-set in a test).
    pub fn attach(prefix: &str, input_dim: usize, hidden: usize) -> TreeLstmParams {
        TreeLstmParams {
            prefix: prefix.to_string(),
            input_dim,
            hidden,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn pull(&self, g: &mut Graph, store: &ParamStore, part: &str) -> Result<NodeId> {
        g.param(store, &self.name(part))
    }
}

/// One Tree-LSTM unit: `x` is the node input, `children` the (h, c) pairs
/// of already-evaluated children. Returns the node's (h, c).
pub fn tree_lstm_node(
    g: &mut Graph,
    store: &ParamStore,
    params: &TreeLstmParams,
    x: NodeId,
    children: &[(NodeId, NodeId)],
) -> Result<(NodeId, NodeId)> {
    let child_sum = if children.is_empty() {
        None
    } else {
        let hs: Vec<NodeId> = children.iter().map(|&(h, _)| h).collect();
        Some(g.add(&hs)?)
    };

    // gate preactivation: W x + b, plus U·(sum of child hiddens) when present
    let gate = |g: &mut Graph, name: &str, recurrent: Option<NodeId>| -> Result<NodeId> {
        let w = params.pull(g, store, &format!("w_{name}"))?;
        let b = params.pull(g, store, &format!("b_{name}"))?;
        let mut pre = g.affine(w, x, Some(b))?;
        if let Some(h) = recurrent {
            let u = params.pull(g, store, &format!("u_{name}"))?;
            let uh = g.affine(u, h, None)?;
            pre = g.add(&[pre, uh])?;
        }
        Ok(pre)
    };

    let u_pre = gate(g, "u", child_sum)?;
    let i_pre = gate(g, "i", child_sum)?;
    let o_pre = gate(g, "o", child_sum)?;
    let u = g.tanh(u_pre)?;
    let i = g.sigmoid(i_pre)?;
    let o = g.sigmoid(o_pre)?;

    let mut cell_terms = vec![g.hadamard(u, i)?];
    if !children.is_empty() {
        // each child's memory is gated by its own forget gate
        let fx = gate(g, "f", None)?;
        let u_f = params.pull(g, store, "u_f")?;
        for &(h_k, c_k) in children {
            let uh = g.affine(u_f, h_k, None)?;
            let f_pre = g.add(&[fx, uh])?;
            let f = g.sigmoid(f_pre)?;
            cell_terms.push(g.hadamard(c_k, f)?);
        }
    }
    let c = g.add(&cell_terms)?;
    let tc = g.tanh(c)?;
    let h = g.hadamard(tc, o)?;
    Ok((h, c))
}

/// Everything the decoder needs from one encoded scene. All fields are
/// nodes in the graph the scene was encoded into.
#[derive(Clone, Debug)]
pub struct EncodedScene {
    /// Refined region features r^h_i, in region-index order.
    pub refined_regions: Vec<NodeId>,
    /// Image-level feature I^h (root hidden state).
    pub image_feature: NodeId,
    /// Mean of the raw region features, r̄.
    pub mean_region: NodeId,
    /// Mean of the raw instance features, m̄.
    pub mean_instance: NodeId,
    /// Raw region features r_i as graph constants.
    pub raw_regions: Vec<NodeId>,
    /// Raw instance features m_i as graph constants.
    pub raw_instances: Vec<NodeId>,
}

/// Runs the Tree-LSTM bottom-up over `tree`, which must have been built
/// from exactly these regions (listed in index order).
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    params: &TreeLstmParams,
    regions: &[Region],
    tree: &HierarchyTree,
) -> Result<EncodedScene> {
    let k = regions.len();
    if k == 0 {
        return Err(HipError::Input(
            "cannot encode a scene with zero regions".into(),
        ));
    }
    if tree.region_count() != k {
        return Err(HipError::Input(format!(
            "tree was built over {} regions but {k} were supplied",
            tree.region_count()
        )));
    }
    for (i, r) in regions.iter().enumerate() {
        if r.index != i {
            return Err(HipError::Input(format!(
                "regions must be listed in index order (position {i} holds index {})",
                r.index
            )));
        }
        if r.region_feature.len() != params.input_dim || r.instance_feature.len() != params.input_dim {
            return Err(HipError::Dimension {
                op: "encode".into(),
                detail: format!(
                    "region {i} features have length {}/{} but the unit expects {}",
                    r.region_feature.len(),
                    r.instance_feature.len(),
                    params.input_dim
                ),
            });
        }
    }

    let d = params.input_dim;
    let raw_regions: Vec<NodeId> = regions.iter().map(|r| g.constant(&r.region_feature)).collect();
    let raw_instances: Vec<NodeId> = regions.iter().map(|r| g.constant(&r.instance_feature)).collect();

    let mut mean_r = vec![0.0; d];
    let mut mean_m = vec![0.0; d];
    for r in regions {
        for j in 0..d {
            mean_r[j] += r.region_feature[j] / k as f64;
            mean_m[j] += r.instance_feature[j] / k as f64;
        }
    }
    let mean_region = g.constant(&mean_r);
    let mean_instance = g.constant(&mean_m);

    // root input: learned fusion of the two pooled features
    let w_r = params.pull(g, store, "w_r")?;
    let w_m = params.pull(g, store, "w_m")?;
    let fused_r = g.affine(w_r, mean_region, None)?;
    let fused_m = g.affine(w_m, mean_instance, None)?;
    let root_input = g.add(&[fused_r, fused_m])?;

    let mut states: Vec<Option<(NodeId, NodeId)>> = vec![None; tree.node_count()];
    for node in tree.post_order() {
        let x = match tree.kind(node) {
            NodeKind::InstanceLeaf(i) => raw_instances[i],
            NodeKind::RegionNode(i) => raw_regions[i],
            NodeKind::Root => root_input,
        };
        let children: Vec<(NodeId, NodeId)> = tree
            .children(node)
            .iter()
            .map(|&c| states[c].expect("post-order evaluates children before parents"))
            .collect();
        states[node] = Some(tree_lstm_node(g, store, params, x, &children)?);
    }

    let refined_regions = (0..k)
        .map(|i| states[tree.region_node(i)].expect("all nodes evaluated").0)
        .collect();
    let image_feature = states[HierarchyTree::ROOT].expect("root evaluated").0;

    Ok(EncodedScene {
        refined_regions,
        image_feature,
        mean_region,
        mean_instance,
        raw_regions,
        raw_instances,
    })
}
