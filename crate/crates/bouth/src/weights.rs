//! Detection-multiplicity weights.
//!
//! A tested node's weight counts the detections its rejection can entail:
//! itself plus every ancestor whose subtree it resolves. Runtime weights
//! depend on the realized p-value ordering; complete trees admit a unique
//! sorted weight vector, and incomplete trees use the least-favorable
//! weights, whose prefix sums are minimal over all orderings.

use std::collections::HashMap;

use crate::tree::{NodeId, TaxTree};

/// The tested nodes of one level pass: undetected nodes with at least one
/// undetected child (level 1: all leaves).
#[derive(Debug, Clone)]
pub struct ActiveLevel {
    pub level: u32,
    /// Tested node indices in ascending index order.
    pub tested: Vec<NodeId>,
}

impl ActiveLevel {
    pub fn new(tree: &TaxTree, detected: &[bool], level: u32) -> ActiveLevel {
        let tested = tree
            .level_members(level)
            .iter()
            .copied()
            .filter(|&n| {
                !detected[n]
                    && (tree.node(n).is_leaf()
                        || tree.node(n).children.iter().any(|&c| !detected[c]))
            })
            .collect();
        ActiveLevel { level, tested }
    }

    pub fn len(&self) -> usize {
        self.tested.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tested.is_empty()
    }
}

/// A level's weights with the cumulative sums the thresholds consume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightVector {
    by_node: Vec<(NodeId, u64)>,
    sorted: Vec<u64>,
    cumulative: Vec<u64>,
    reverse_cumulative: Vec<u64>,
}

impl WeightVector {
    pub fn from_aligned(nodes: &[NodeId], weights: Vec<u64>) -> WeightVector {
        assert_eq!(nodes.len(), weights.len());
        assert!(!weights.is_empty());
        let by_node: Vec<(NodeId, u64)> =
            nodes.iter().copied().zip(weights.iter().copied()).collect();
        let mut sorted = weights;
        sorted.sort_unstable();
        let mut cumulative = Vec::with_capacity(sorted.len());
        let mut acc = 0u64;
        for &w in &sorted {
            acc += w;
            cumulative.push(acc);
        }
        let mut reverse_cumulative = vec![0u64; sorted.len()];
        let mut acc = 0u64;
        for (i, &w) in sorted.iter().enumerate().rev() {
            acc += w;
            reverse_cumulative[i] = acc;
        }
        WeightVector {
            by_node,
            sorted,
            cumulative,
            reverse_cumulative,
        }
    }

    /// Per-node weights in the construction's node order.
    pub fn by_node(&self) -> &[(NodeId, u64)] {
        &self.by_node
    }

    /// Ascending weights.
    pub fn sorted(&self) -> &[u64] {
        &self.sorted
    }

    /// Prefix sums of the sorted weights.
    pub fn cumulative(&self) -> &[u64] {
        &self.cumulative
    }

    /// Suffix sums of the sorted weights.
    pub fn reverse_cumulative(&self) -> &[u64] {
        &self.reverse_cumulative
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

/// Runtime weights for the realized ordering: a node's weight is 1 plus the
/// number of its ancestors under which it holds the strictly largest tested
/// p-value. Ties break by ascending node index. Returned aligned with
/// `active.tested`.
pub fn runtime_weights(tree: &TaxTree, active: &ActiveLevel, ps: &[f64]) -> Vec<u64> {
    assert_eq!(
        ps.len(),
        active.tested.len(),
        "runtime_weights: every tested node needs a p-value"
    );
    assert!(!active.tested.is_empty());

    // total order (p, node index); max per ancestor subtree
    let mut max_at: HashMap<NodeId, (f64, NodeId)> = HashMap::new();
    for (&j, &p) in active.tested.iter().zip(ps) {
        assert!(!p.is_nan(), "runtime_weights: NaN p-value");
        for a in tree.ancestors(j) {
            match max_at.get_mut(&a) {
                Some(best) => {
                    if (p, j) > *best {
                        *best = (p, j);
                    }
                }
                None => {
                    max_at.insert(a, (p, j));
                }
            }
        }
    }
    active
        .tested
        .iter()
        .zip(ps)
        .map(|(&j, &p)| 1 + tree.ancestors(j).filter(|a| max_at[a] == (p, j)).count() as u64)
        .collect()
}

/// The unique sorted weights of a complete tree's level. Panics when the
/// tree is incomplete; incomplete trees use [`least_favorable_weights`].
pub fn sorted_weights_complete(tree: &TaxTree, active: &ActiveLevel) -> WeightVector {
    assert!(
        tree.is_complete(),
        "sorted weights are unique only on complete trees; use least_favorable_weights"
    );
    assert!(!active.is_empty());
    // any ordering yields the same sorted multiset; use index order
    let n = active.tested.len();
    let ps: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
    let w = runtime_weights(tree, active, &ps);
    WeightVector::from_aligned(&active.tested, w)
}

/// Least-favorable weights: start from all ones, then walk ancestor levels
/// upward; each node with tested descendants adds 1 to the largest current
/// weight among them (tie: lowest node index). The sorted result's prefix
/// sums are dominated by those of every ordering-induced weight vector.
pub fn least_favorable_weights(tree: &TaxTree, active: &ActiveLevel) -> WeightVector {
    assert!(!active.is_empty());
    let tested = &active.tested;
    let mut weights = vec![1u64; tested.len()];

    let mut groups: HashMap<NodeId, Vec<usize>> = HashMap::new();
    for (k, &j) in tested.iter().enumerate() {
        for a in tree.ancestors(j) {
            groups.entry(a).or_default().push(k);
        }
    }
    let mut ancestors: Vec<NodeId> = groups.keys().copied().collect();
    ancestors.sort_by_key(|&a| (tree.node(a).level, a));
    for a in ancestors {
        let members = &groups[&a];
        let &kmax = members
            .iter()
            .max_by_key(|&&k| (weights[k], std::cmp::Reverse(tested[k])))
            .unwrap();
        weights[kmax] += 1;
    }
    WeightVector::from_aligned(tested, weights)
}
