//! The three-level scene hierarchy: image root, region nodes, instance
//! leaves.
//!
//! Regions are ranked by descending box area and inserted one at a time.
//! Each incoming region is compared (by IoU) against every region already
//! in the tree: if the best overlap exceeds the threshold `epsilon` it nests
//! under that region, otherwise it hangs off the root. Once all regions are
//! placed, every region node receives one instance leaf. The result is a
//! tree with `2K + 1` nodes and `2K` edges for `K` regions.

use serde::{Deserialize, Serialize};

use crate::error::{HipError, Result};

/// Axis-aligned box with positive area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BBox> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(HipError::Input(format!(
                "box coordinates must be finite, got ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(HipError::Input(format!(
                "box must have positive area: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// A detected region: its box, detector confidence, and the two feature
/// vectors (whole region, masked foreground instance).
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub index: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub region_feature: Vec<f64>,
    pub instance_feature: Vec<f64>,
}

impl Region {
    pub fn feature_dim(&self) -> usize {
        self.region_feature.len()
    }
}

/// Intersection over union of two boxes. Symmetric, 0 for disjoint boxes,
/// 1 exactly when the boxes coincide.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// What a tree node stands for. Region/instance payloads carry the region's
/// input index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Root,
    RegionNode(usize),
    InstanceLeaf(usize),
}

/// The parsed hierarchy. Node ids are dense: 0 is the root, `1 + i` is the
/// region node for region index `i`, and `1 + K + i` is its instance leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyTree {
    region_count: usize,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    epsilon: f64,
}

impl HierarchyTree {
    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn node_count(&self) -> usize {
        2 * self.region_count + 1
    }

    pub fn edge_count(&self) -> usize {
        2 * self.region_count
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub const ROOT: usize = 0;

    pub fn region_node(&self, region_index: usize) -> usize {
        debug_assert!(region_index < self.region_count);
        1 + region_index
    }

    pub fn leaf_node(&self, region_index: usize) -> usize {
        debug_assert!(region_index < self.region_count);
        1 + self.region_count + region_index
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        if node == 0 {
            NodeKind::Root
        } else if node <= self.region_count {
            NodeKind::RegionNode(node - 1)
        } else {
            NodeKind::InstanceLeaf(node - 1 - self.region_count)
        }
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Node ids with every child preceding its parent; the root comes last.
    pub fn post_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.node_count());
        // explicit stack; trees can nest as deep as K
        let mut stack = vec![(Self::ROOT, false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
            } else {
                stack.push((node, true));
                for &c in self.children[node].iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        order
    }

    /// Number of edges from the root down to `node`.
    pub fn depth(&self, node: usize) -> usize {
        let mut d = 0;
        let mut cur = node;
        while let Some(p) = self.parent[cur] {
            d += 1;
            cur = p;
        }
        d
    }

    /// Longest root-to-node path, in edges. A star over K ≥ 1 regions has
    /// depth 2 (root → region → leaf).
    pub fn max_depth(&self) -> usize {
        (0..self.node_count()).map(|n| self.depth(n)).max().unwrap_or(0)
    }

    /// True when every region node hangs directly off the root.
    pub fn is_star(&self) -> bool {
        (0..self.region_count).all(|i| self.parent[self.region_node(i)] == Some(Self::ROOT))
    }

    /// Checks the structural invariants; used by tests and after
    /// deserialization.
    pub fn validate(&self, regions: &[Region]) -> Result<()> {
        let k = self.region_count;
        if regions.len() != k {
            return Err(HipError::Input(format!(
                "tree built for {k} regions, given {}",
                regions.len()
            )));
        }
        if self.parent.len() != self.node_count() || self.children.len() != self.node_count() {
            return Err(HipError::Input("tree arrays disagree with node count".into()));
        }
        if self.parent[Self::ROOT].is_some() {
            return Err(HipError::Input("root must not have a parent".into()));
        }
        for i in 0..k {
            let rn = self.region_node(i);
            let ln = self.leaf_node(i);
            if self.parent[ln] != Some(rn) {
                return Err(HipError::Input(format!(
                    "instance leaf of region {i} must attach to its region node"
                )));
            }
            match self.parent[rn] {
                Some(p) if p == Self::ROOT => {}
                Some(p) => match self.kind(p) {
                    NodeKind::RegionNode(j) => {
                        if regions[j].bbox.area() < regions[i].bbox.area() {
                            return Err(HipError::Input(format!(
                                "region {i} nests under smaller region {j}"
                            )));
                        }
                    }
                    _ => {
                        return Err(HipError::Input(format!(
                            "region {i} has a non-region, non-root parent"
                        )))
                    }
                },
                None => return Err(HipError::Input(format!("region {i} has no parent"))),
            }
        }
        // parent/children agreement + reachability
        let mut seen = vec![false; self.node_count()];
        for node in self.post_order() {
            if seen[node] {
                return Err(HipError::Input("node visited twice; tree has a cycle".into()));
            }
            seen[node] = true;
            for &c in &self.children[node] {
                if self.parent[c] != Some(node) {
                    return Err(HipError::Input("children list disagrees with parent array".into()));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(HipError::Input("unreachable node in tree".into()));
        }
        Ok(())
    }
}

/// Builds the hierarchy from detected regions.
///
/// Regions are processed in descending box-area order (ties broken toward
/// the lower input index). A region attaches to the already-inserted region
/// with maximal IoU when that IoU strictly exceeds `epsilon` (IoU ties break
/// toward the earliest-inserted candidate); otherwise it attaches to the
/// root. An empty region list yields the root-only tree.
pub fn build_tree(regions: &[Region], epsilon: f64) -> Result<HierarchyTree> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(HipError::Input(format!(
            "epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    let k = regions.len();
    let mut seen_index = vec![false; k];
    for r in regions {
        if r.index >= k {
            return Err(HipError::Input(format!(
                "region index {} out of range for {k} regions",
                r.index
            )));
        }
        if seen_index[r.index] {
            return Err(HipError::Input(format!("duplicate region index {}", r.index)));
        }
        seen_index[r.index] = true;
    }

    let node_count = 2 * k + 1;
    let mut tree = HierarchyTree {
        region_count: k,
        parent: vec![None; node_count],
        children: vec![Vec::new(); node_count],
        epsilon,
    };

    // rank by descending area, ties toward the lower region index
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by(|&a, &b| {
        regions[b]
            .bbox
            .area()
            .total_cmp(&regions[a].bbox.area())
            .then(regions[a].index.cmp(&regions[b].index))
    });

    let mut inserted: Vec<usize> = Vec::with_capacity(k); // positions into `regions`, in insertion order
    for &pos in &order {
        let candidate = &regions[pos];
        let mut best: Option<(f64, usize)> = None; // (iou, inserted position)
        for &prev in &inserted {
            let overlap = iou(&candidate.bbox, &regions[prev].bbox);
            let better = match best {
                None => true,
                Some((best_iou, _)) => overlap > best_iou, // ties keep the earlier insert
            };
            if better {
                best = Some((overlap, prev));
            }
        }
        let parent_node = match best {
            Some((best_iou, prev)) if best_iou > epsilon => tree.region_node(regions[prev].index),
            _ => HierarchyTree::ROOT,
        };
        let node = tree.region_node(candidate.index);
        tree.parent[node] = Some(parent_node);
        tree.children[parent_node].push(node);
        inserted.push(pos);
    }

    for r in regions {
        let rn = tree.region_node(r.index);
        let ln = tree.leaf_node(r.index);
        tree.parent[ln] = Some(rn);
        tree.children[rn].push(ln);
    }
    Ok(tree)
}

/// DOT rendering of a tree; node labels carry region indices and boxes.
pub fn tree_to_dot(tree: &HierarchyTree, regions: &[Region]) -> String {
    let mut out = String::from("digraph hierarchy {\n  rankdir=TB;\n");
    out.push_str("  n0 [label=\"image\", shape=doubleoctagon];\n");
    for i in 0..tree.region_count() {
        let r = regions.iter().find(|r| r.index == i).expect("region present");
        let b = r.bbox;
        out.push_str(&format!(
            "  n{} [label=\"region {} [{:.1},{:.1},{:.1},{:.1}]\", shape=box];\n",
            tree.region_node(i),
            i,
            b.x1,
            b.y1,
            b.x2,
            b.y2
        ));
        out.push_str(&format!(
            "  n{} [label=\"instance {}\", shape=ellipse];\n",
            tree.leaf_node(i),
            i
        ));
    }
    for node in 1..tree.node_count() {
        if let Some(p) = tree.parent(node) {
            out.push_str(&format!("  n{p} -> n{node};\n"));
        }
    }
    out.push_str("}\n");
    out
}

/// Serializable node layout for the JSON tree dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeDumpNode {
    pub id: usize,
    pub kind: NodeKind,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// JSON-friendly dump of the full node array.
pub fn tree_to_json(tree: &HierarchyTree) -> Vec<TreeDumpNode> {
    (0..tree.node_count())
        .map(|id| TreeDumpNode {
            id,
            kind: tree.kind(id),
            parent: tree.parent(id),
            children: tree.children(id).to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn bare_region(index: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
        Region {
            index,
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            confidence: 1.0,
            region_feature: vec![0.0],
            instance_feature: vec![0.0],
        }
    }

    #[test]
    fn iou_identity_disjoint_and_nested() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
        let inner = BBox::new(0.0, 0.0, 6.0, 6.0).unwrap();
        assert!((iou(&a, &inner) - 0.36).abs() < 1e-12);
        assert!((iou(&inner, &a) - 0.36).abs() < 1e-12); // symmetric
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(5.0, 5.0, 4.0, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn empty_input_gives_root_only() {
        let tree = build_tree(&[], 0.1).unwrap();
        assert_eq!(tree.node_count(), 1);
        assert_eq!(tree.edge_count(), 0);
        assert!(tree.is_star());
        tree.validate(&[]).unwrap();
    }

    #[test]
    fn three_region_example_nests_under_low_epsilon() {
        // A contains B with IoU 0.36; C is far away.
        let regions = vec![
            bare_region(0, 0.0, 0.0, 10.0, 10.0), // A
            bare_region(1, 0.0, 0.0, 6.0, 6.0),   // B
            bare_region(2, 20.0, 20.0, 26.0, 26.0), // C
        ];
        let tree = build_tree(&regions, 0.1).unwrap();
        assert_eq!(tree.parent(tree.region_node(0)), Some(HierarchyTree::ROOT));
        assert_eq!(tree.parent(tree.region_node(1)), Some(tree.region_node(0)));
        assert_eq!(tree.parent(tree.region_node(2)), Some(HierarchyTree::ROOT));
        for i in 0..3 {
            assert_eq!(tree.parent(tree.leaf_node(i)), Some(tree.region_node(i)));
        }
        assert_eq!(tree.node_count(), 7);
        assert_eq!(tree.edge_count(), 6);
        assert!(!tree.is_star());
        assert_eq!(tree.max_depth(), 3); // root -> A -> B -> leaf(B)
        tree.validate(&regions).unwrap();
    }

    #[test]
    fn three_region_example_flattens_under_high_epsilon() {
        let regions = vec![
            bare_region(0, 0.0, 0.0, 10.0, 10.0),
            bare_region(1, 0.0, 0.0, 6.0, 6.0),
            bare_region(2, 20.0, 20.0, 26.0, 26.0),
        ];
        let tree = build_tree(&regions, 0.5).unwrap();
        for i in 0..3 {
            assert_eq!(tree.parent(tree.region_node(i)), Some(HierarchyTree::ROOT));
        }
        assert!(tree.is_star());
        assert_eq!(tree.max_depth(), 2);
    }

    #[test]
    fn iou_exactly_epsilon_goes_to_root() {
        // strict "greater than": IoU == epsilon attaches to root
        let regions = vec![
            bare_region(0, 0.0, 0.0, 10.0, 10.0),
            bare_region(1, 0.0, 0.0, 6.0, 6.0), // IoU with 0 is exactly 0.36
        ];
        let tree = build_tree(&regions, 0.36).unwrap();
        assert!(tree.is_star());
    }

    #[test]
    fn equal_area_ties_break_by_input_index() {
        // two identical boxes: index 0 inserted first, index 1 nests under it
        let regions = vec![
            bare_region(0, 0.0, 0.0, 10.0, 10.0),
            bare_region(1, 0.0, 0.0, 10.0, 10.0),
        ];
        let tree = build_tree(&regions, 0.5).unwrap();
        assert_eq!(tree.parent(tree.region_node(0)), Some(HierarchyTree::ROOT));
        assert_eq!(tree.parent(tree.region_node(1)), Some(tree.region_node(0)));
        tree.validate(&regions).unwrap();
    }

    #[test]
    fn equal_iou_ties_break_toward_earliest_inserted() {
        // two disjoint big boxes, then a small box straddling both equally
        let regions = vec![
            bare_region(0, 0.0, 0.0, 10.0, 10.0),
            bare_region(1, 10.0, 0.0, 20.0, 10.0),
            bare_region(2, 8.0, 4.0, 12.0, 6.0), // symmetric overlap with both
        ];
        let tree = build_tree(&regions, 0.01).unwrap();
        assert_eq!(tree.parent(tree.region_node(2)), Some(tree.region_node(0)));
    }

    #[test]
    fn duplicate_indices_rejected() {
        let regions = vec![
            bare_region(0, 0.0, 0.0, 10.0, 10.0),
            bare_region(0, 1.0, 1.0, 5.0, 5.0),
        ];
        assert!(build_tree(&regions, 0.1).is_err());
    }

    #[test]
    fn epsilon_range_enforced() {
        let regions = vec![bare_region(0, 0.0, 0.0, 1.0, 1.0)];
        assert!(build_tree(&regions, 1.0).is_err());
        assert!(build_tree(&regions, -0.1).is_err());
        assert!(build_tree(&regions, 0.0).is_ok());
    }

    #[test]
    fn post_order_visits_children_first() {
        let regions = vec![
            bare_region(0, 0.0, 0.0, 10.0, 10.0),
            bare_region(1, 0.0, 0.0, 6.0, 6.0),
            bare_region(2, 1.0, 1.0, 4.0, 4.0),
        ];
        let tree = build_tree(&regions, 0.05).unwrap();
        let order = tree.post_order();
        assert_eq!(order.len(), tree.node_count());
        let position: Vec<usize> = {
            let mut pos = vec![0; tree.node_count()];
            for (i, &n) in order.iter().enumerate() {
                pos[n] = i;
            }
            pos
        };
        for node in 0..tree.node_count() {
            for &c in tree.children(node) {
                assert!(position[c] < position[node], "child {c} after parent {node}");
            }
        }
        assert_eq!(*order.last().unwrap(), HierarchyTree::ROOT);
    }

    #[test]
    fn dot_output_is_deterministic_and_counts_nodes() {
        let regions = vec![
            bare_region(0, 0.0, 0.0, 10.0, 10.0),
            bare_region(1, 0.0, 0.0, 6.0, 6.0),
            bare_region(2, 20.0, 20.0, 26.0, 26.0),
        ];
        let tree = build_tree(&regions, 0.1).unwrap();
        let dot1 = tree_to_dot(&tree, &regions);
        let dot2 = tree_to_dot(&tree, &regions);
        assert_eq!(dot1, dot2);
        assert_eq!(dot1.matches("label=").count(), 7);
        assert_eq!(dot1.matches(" -> ").count(), 6);

        let root_only = build_tree(&[], 0.1).unwrap();
        let dot = tree_to_dot(&root_only, &[]);
        assert_eq!(dot.matches("label=").count(), 1);
        assert_eq!(dot.matches(" -> ").count(), 0);
    }

    #[test]
    fn json_dump_round_trips() {
        let regions = vec![
            bare_region(0, 0.0, 0.0, 10.0, 10.0),
            bare_region(1, 0.0, 0.0, 6.0, 6.0),
        ];
        let tree = build_tree(&regions, 0.1).unwrap();
        let dump = tree_to_json(&tree);
        let text = serde_json::to_string(&dump).unwrap();
        let back: Vec<TreeDumpNode> = serde_json::from_str(&text).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[0].kind, NodeKind::Root);
        assert_eq!(back[2].parent, Some(1));
    }
}
