//! Comparison procedures: BH step-up on various per-node p-value
//! assignments, plus the top-down hierarchical scheme.

use crate::bottomup::driver_flags;
use crate::stats::{norm_cdf, norm_quantile, P_CLAMP};
use crate::tree::{LeafPValues, NodeId, TaxTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    /// Inner p-values aggregate all descendant leaves (no truncation),
    /// then BH runs over every node.
    Naive,
    /// Root-downward family testing: children of a node are tested only
    /// after the node itself is rejected.
    TopDown,
    /// Inner p-value = largest descendant leaf p-value, then BH over
    /// every node.
    Conjunction,
}

impl BaselineMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineMethod::Naive => "naive",
            BaselineMethod::TopDown => "topdown",
            BaselineMethod::Conjunction => "conjunction",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub method: BaselineMethod,
    /// The p-value the method assigned to each node.
    pub node_ps: Vec<f64>,
    pub detected: Vec<bool>,
    pub drivers: Vec<bool>,
}

/// Benjamini-Hochberg step-up: reject the ids whose rank is at most
/// max{k : p_(k) <= k q / m}.
pub fn bh_stepup<T: Clone>(items: &[(T, f64)], q: f64) -> Vec<T> {
    assert!(q > 0.0 && q < 1.0, "bh_stepup: q={q} outside (0,1)");
    let m = items.len();
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| items[a].1.partial_cmp(&items[b].1).unwrap());
    let mut k_max = 0;
    for (rank, &idx) in order.iter().enumerate() {
        if items[idx].1 <= (rank + 1) as f64 * q / m as f64 {
            k_max = rank + 1;
        }
    }
    order
        .iter()
        .take(k_max)
        .map(|&idx| items[idx].0.clone())
        .collect()
}

/// Stouffer aggregate over all descendant leaves for every inner node.
fn naive_node_ps(tree: &TaxTree, leaf_ps: &LeafPValues) -> Vec<f64> {
    // z-sums accumulate bottom-up; children always sit at lower levels
    let n = tree.num_nodes();
    let mut zsum = vec![0.0f64; n];
    let mut ps = vec![0.0f64; n];
    for level in 1..=tree.levels() {
        for &node in tree.level_members(level) {
            let rec = tree.node(node);
            if rec.is_leaf() {
                let p = leaf_ps.get(node);
                ps[node] = p;
                zsum[node] = -norm_quantile(p.clamp(P_CLAMP, 1.0 - P_CLAMP));
            } else {
                zsum[node] = rec.children.iter().map(|&c| zsum[c]).sum();
                let z = zsum[node] / (rec.leaf_count as f64).sqrt();
                ps[node] = norm_cdf(-z);
            }
        }
    }
    ps
}

/// BH over all nodes with naive Stouffer p-values for inner nodes.
pub fn naive_method(tree: &TaxTree, leaf_ps: &LeafPValues, q: f64) -> BaselineReport {
    let node_ps = naive_node_ps(tree, leaf_ps);
    let items: Vec<(NodeId, f64)> = node_ps.iter().copied().enumerate().collect();
    let mut detected = vec![false; tree.num_nodes()];
    for id in bh_stepup(&items, q) {
        detected[id] = true;
    }
    let drivers = driver_flags(tree, &detected);
    BaselineReport {
        method: BaselineMethod::Naive,
        node_ps,
        detected,
        drivers,
    }
}

/// Top-down hierarchical testing: the root's singleton family is tested at
/// `family_q`; each rejected node's children form the next family; children
/// of unrejected nodes are never tested.
pub fn top_down_method(tree: &TaxTree, leaf_ps: &LeafPValues, family_q: f64) -> BaselineReport {
    let node_ps = naive_node_ps(tree, leaf_ps);
    let mut detected = vec![false; tree.num_nodes()];
    let mut queue: Vec<Vec<NodeId>> = vec![vec![tree.root()]];
    while let Some(family) = queue.pop() {
        let items: Vec<(NodeId, f64)> = family.iter().map(|&n| (n, node_ps[n])).collect();
        for id in bh_stepup(&items, family_q) {
            detected[id] = true;
            let children = &tree.node(id).children;
            if !children.is_empty() {
                queue.push(children.clone());
            }
        }
    }
    let drivers = driver_flags(tree, &detected);
    BaselineReport {
        method: BaselineMethod::TopDown,
        node_ps,
        detected,
        drivers,
    }
}

/// Conjunction-null test: inner p-value is the largest descendant leaf
/// p-value; BH runs over every node.
pub fn conjunction_method(tree: &TaxTree, leaf_ps: &LeafPValues, q: f64) -> BaselineReport {
    let n = tree.num_nodes();
    let mut node_ps = vec![0.0f64; n];
    for level in 1..=tree.levels() {
        for &node in tree.level_members(level) {
            let rec = tree.node(node);
            node_ps[node] = if rec.is_leaf() {
                leaf_ps.get(node)
            } else {
                rec.children
                    .iter()
                    .map(|&c| node_ps[c])
                    .fold(f64::NEG_INFINITY, f64::max)
            };
        }
    }
    let items: Vec<(NodeId, f64)> = node_ps.iter().copied().enumerate().collect();
    let mut detected = vec![false; n];
    for id in bh_stepup(&items, q) {
        detected[id] = true;
    }
    let drivers = driver_flags(tree, &detected);
    BaselineReport {
        method: BaselineMethod::Conjunction,
        node_ps,
        detected,
        drivers,
    }
}
