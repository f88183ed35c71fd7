//! Branching trees of hypotheses with investigator-assigned levels.
//!
//! Nodes live in a flat arena (`Vec<NodeRecord>`) and are referenced by
//! `NodeId` indices. Trees are immutable once built, so shared concurrent
//! reads are safe. Leaves sit at level 1 by convention; an inner node's
//! level is strictly greater than the level of every child, but need not
//! equal its depth (incomplete trees).

use crate::error::{Error, Result};

/// Index into the tree's node arena.
pub type NodeId = usize;

/// Hard cap on constructed tree sizes.
pub const MAX_NODES: usize = 1 << 24;

#[derive(Debug, Clone)]
pub struct NodeRecord {
    /// Label, unique within the tree.
    pub id: String,
    /// Parent index; `None` for the root.
    pub parent: Option<NodeId>,
    /// Child indices in deterministic order.
    pub children: Vec<NodeId>,
    /// Testing level; 1 for leaves.
    pub level: u32,
    /// Number of leaf descendants; a leaf counts itself.
    pub leaf_count: usize,
}

impl NodeRecord {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TaxTree {
    nodes: Vec<NodeRecord>,
    root: NodeId,
    levels: u32,
    /// `level_members[l-1]` holds the node indices at level `l`.
    level_members: Vec<Vec<NodeId>>,
    /// True when nodes on the same level all have the same depth (C1).
    complete: bool,
}

/// One row of a taxonomy table: leaf label, root-outward lineage tokens
/// (empty token = missing rank), and the leaf's p-value.
#[derive(Debug, Clone)]
pub struct LineageRow {
    pub leaf_id: String,
    pub lineage: Vec<String>,
    pub p_value: f64,
}

/// One row of an edge-list tree dump.
#[derive(Debug, Clone)]
pub struct EdgeRow {
    pub id: String,
    /// `None` for the root.
    pub parent_id: Option<String>,
    pub level: u32,
}

struct ProtoNode {
    id: String,
    parent: Option<NodeId>,
    level: u32,
}

impl TaxTree {
    /// Complete tree where every inner node has exactly `branching` children
    /// and a node's level is `levels - depth`.
    pub fn build_complete(branching: usize, levels: u32) -> Result<TaxTree> {
        if branching < 2 {
            return Err(Error::invalid(format!(
                "branching factor must be >= 2, got {branching}"
            )));
        }
        if levels < 2 {
            return Err(Error::invalid(format!("levels must be >= 2, got {levels}")));
        }
        // total = (b^L - 1) / (b - 1), checked against the node cap
        let mut total: usize = 0;
        let mut width: usize = 1;
        for _ in 0..levels {
            total = total
                .checked_add(width)
                .filter(|&t| t <= MAX_NODES)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "complete tree ({branching}, {levels}) exceeds {MAX_NODES} nodes"
                    ))
                })?;
            width = width.checked_mul(branching).ok_or_else(|| {
                Error::invalid(format!(
                    "complete tree ({branching}, {levels}) exceeds {MAX_NODES} nodes"
                ))
            })?;
        }

        let mut proto = Vec::with_capacity(total);
        proto.push(ProtoNode {
            id: format!("N{levels}_1"),
            parent: None,
            level: levels,
        });
        let mut row_start = 0usize;
        let mut row_len = 1usize;
        for level in (1..levels).rev() {
            let mut j = 1usize;
            for parent in row_start..row_start + row_len {
                for _ in 0..branching {
                    proto.push(ProtoNode {
                        id: format!("N{level}_{j}"),
                        parent: Some(parent),
                        level,
                    });
                    j += 1;
                }
            }
            row_start += row_len;
            row_len *= branching;
        }
        finalize(proto)
    }

    /// Build a tree from taxonomy-table rows. Each distinct nonempty prefix
    /// of lineage tokens becomes one inner node; a leaf with missing ranks
    /// attaches directly to its deepest assigned ancestor. A synthetic root
    /// is added only when the rank list does not supply a single top node.
    pub fn build_from_lineages(rows: &[LineageRow]) -> Result<(TaxTree, LeafPValues)> {
        if rows.is_empty() {
            return Err(Error::invalid("empty taxonomy table"));
        }

        let mut seen_ids = std::collections::HashSet::new();
        let mut prefixes: Vec<Vec<String>> = Vec::new();
        let mut rank_count = 0usize;
        // (prefix tokens, leaf_id, p, original row number)
        let mut leaves: Vec<(Vec<String>, String, f64, usize)> = Vec::with_capacity(rows.len());

        for (i, row) in rows.iter().enumerate() {
            let line = i + 1;
            if !seen_ids.insert(row.leaf_id.clone()) {
                return Err(Error::row(
                    line,
                    format!("duplicate leaf_id `{}`", row.leaf_id),
                ));
            }
            if !(0.0..=1.0).contains(&row.p_value) {
                return Err(Error::row(
                    line,
                    format!("p_value {} outside [0,1]", row.p_value),
                ));
            }
            let cut = row.lineage.iter().position(|t| t.is_empty());
            let assigned = cut.unwrap_or(row.lineage.len());
            if row.lineage[assigned..].iter().any(|t| !t.is_empty()) {
                return Err(Error::row(
                    line,
                    format!(
                        "non-contiguous lineage for `{}`: rank token after a missing rank",
                        row.leaf_id
                    ),
                ));
            }
            if assigned == 0 {
                return Err(Error::row(
                    line,
                    format!("leaf `{}` has no taxonomy assignment", row.leaf_id),
                ));
            }
            rank_count = rank_count.max(row.lineage.len());
            let prefix: Vec<String> = row.lineage[..assigned].to_vec();
            for k in 1..=assigned {
                prefixes.push(prefix[..k].to_vec());
            }
            leaves.push((prefix, row.leaf_id.clone(), row.p_value, line));
        }

        prefixes.sort();
        prefixes.dedup();
        if prefixes.len().saturating_add(leaves.len()) + 1 > MAX_NODES {
            return Err(Error::invalid("taxonomy table exceeds node cap"));
        }

        let top_count = prefixes.iter().filter(|p| p.len() == 1).count();
        let synthetic_root = top_count > 1;
        let rank_count = rank_count as u32;

        let mut proto: Vec<ProtoNode> = Vec::new();
        if synthetic_root {
            proto.push(ProtoNode {
                id: "(root)".to_string(),
                parent: None,
                level: rank_count + 2,
            });
        }
        let mut index_of: std::collections::HashMap<&[String], NodeId> =
            std::collections::HashMap::new();
        for prefix in &prefixes {
            let level = rank_count - prefix.len() as u32 + 2;
            let parent = if prefix.len() == 1 {
                if synthetic_root {
                    Some(0)
                } else {
                    None
                }
            } else {
                Some(index_of[&prefix[..prefix.len() - 1]])
            };
            index_of.insert(prefix.as_slice(), proto.len());
            proto.push(ProtoNode {
                id: prefix.join(";"),
                parent,
                level,
            });
        }

        // stable order: lineage string, then leaf id
        leaves.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        let mut pvals: Vec<(NodeId, f64)> = Vec::with_capacity(leaves.len());
        for (prefix, leaf_id, p, _line) in &leaves {
            let parent = index_of[prefix.as_slice()];
            pvals.push((proto.len(), *p));
            proto.push(ProtoNode {
                id: leaf_id.clone(),
                parent: Some(parent),
                level: 1,
            });
        }

        let tree = finalize(proto)?;
        let leaf_ps = LeafPValues::from_pairs(&tree, &pvals)?;
        Ok((tree, leaf_ps))
    }

    /// Build from edge-list rows (`id`, `parent_id`, `level`). Node indices
    /// follow row order.
    pub fn from_edges(rows: &[EdgeRow]) -> Result<TaxTree> {
        if rows.is_empty() {
            return Err(Error::invalid("empty edge list"));
        }
        if rows.len() > MAX_NODES {
            return Err(Error::invalid("edge list exceeds node cap"));
        }
        let mut index_of = std::collections::HashMap::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if index_of.insert(row.id.clone(), i).is_some() {
                return Err(Error::row(i + 1, format!("duplicate node id `{}`", row.id)));
            }
        }
        let mut proto = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let parent = match &row.parent_id {
                None => None,
                Some(pid) => Some(
                    *index_of
                        .get(pid)
                        .ok_or_else(|| Error::row(i + 1, format!("unknown parent id `{pid}`")))?,
                ),
            };
            proto.push(ProtoNode {
                id: row.id.clone(),
                parent,
                level: row.level,
            });
        }
        finalize(proto)
    }

    pub fn node(&self, id: NodeId) -> &NodeRecord {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.level_members[0].len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Number of levels L; levels run 1..=L.
    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Node indices at level `l` (1-based).
    pub fn level_members(&self, level: u32) -> &[NodeId] {
        &self.level_members[(level - 1) as usize]
    }

    /// True when nodes on the same level all share one depth (condition C1).
    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Walk from `node`'s parent up to the root.
    pub fn ancestors(&self, node: NodeId) -> Ancestors<'_> {
        Ancestors {
            tree: self,
            cur: self.nodes[node].parent,
        }
    }

    /// Leaf (level-1) descendants of `node`; a leaf yields itself.
    pub fn descendants_leaves(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if self.nodes[n].is_leaf() {
                out.push(n);
            } else {
                stack.extend(self.nodes[n].children.iter().rev());
            }
        }
        out
    }

    /// All descendants of `node`, excluding `node` itself.
    pub fn descendants(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.nodes[node].children.clone();
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(&self.nodes[n].children);
        }
        out
    }

    /// Look up a node index by its label.
    pub fn find(&self, id: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Rows for the edge-list dump, in index order.
    pub fn to_edges(&self) -> Vec<EdgeRow> {
        self.nodes
            .iter()
            .map(|n| EdgeRow {
                id: n.id.clone(),
                parent_id: n.parent.map(|p| self.nodes[p].id.clone()),
                level: n.level,
            })
            .collect()
    }
}

pub struct Ancestors<'a> {
    tree: &'a TaxTree,
    cur: Option<NodeId>,
}

impl Iterator for Ancestors<'_> {
    type Item = NodeId;

    fn next(&mut self) -> Option<NodeId> {
        let n = self.cur?;
        self.cur = self.tree.nodes[n].parent;
        Some(n)
    }
}

fn finalize(proto: Vec<ProtoNode>) -> Result<TaxTree> {
    let n = proto.len();
    let mut ids = std::collections::HashSet::with_capacity(n);
    let mut root = None;
    for (i, p) in proto.iter().enumerate() {
        if !ids.insert(p.id.as_str()) {
            return Err(Error::invalid(format!("duplicate node id `{}`", p.id)));
        }
        if p.level < 1 {
            return Err(Error::invalid(format!("node `{}` has level 0", p.id)));
        }
        match p.parent {
            None => {
                if root.replace(i).is_some() {
                    return Err(Error::invalid("multiple root nodes"));
                }
            }
            Some(par) => {
                if par >= n {
                    return Err(Error::invalid(format!(
                        "node `{}` has out-of-range parent",
                        p.id
                    )));
                }
                if proto[par].level <= p.level {
                    return Err(Error::invalid(format!(
                        "node `{}` (level {}) under parent `{}` (level {}): parent level must be strictly greater",
                        p.id, p.level, proto[par].id, proto[par].level
                    )));
                }
            }
        }
    }
    let root = root.ok_or_else(|| Error::invalid("no root node"))?;

    let mut nodes: Vec<NodeRecord> = proto
        .into_iter()
        .map(|p| NodeRecord {
            id: p.id,
            parent: p.parent,
            children: Vec::new(),
            level: p.level,
            leaf_count: 0,
        })
        .collect();
    for i in 0..n {
        if let Some(par) = nodes[i].parent {
            nodes[par].children.push(i);
        }
    }
    for node in &nodes {
        if node.children.is_empty() != (node.level == 1) {
            return Err(Error::invalid(format!(
                "node `{}`: leaves must sit at level 1 and inner nodes above it",
                node.id
            )));
        }
    }

    // leaf counts by decreasing level (children always have lower levels)
    let mut by_level_desc: Vec<NodeId> = (0..n).collect();
    by_level_desc.sort_by_key(|&i| std::cmp::Reverse(nodes[i].level));
    for &i in by_level_desc.iter().rev() {
        nodes[i].leaf_count = if nodes[i].children.is_empty() {
            1
        } else {
            nodes[i].children.iter().map(|&c| nodes[c].leaf_count).sum()
        };
    }

    let levels = nodes.iter().map(|x| x.level).max().unwrap();
    let mut level_members = vec![Vec::new(); levels as usize];
    for (i, node) in nodes.iter().enumerate() {
        level_members[(node.level - 1) as usize].push(i);
    }

    // depths, for the completeness flag
    let mut depth = vec![0u32; n];
    let mut order: Vec<NodeId> = (0..n).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(nodes[i].level));
    for &i in &order {
        if let Some(par) = nodes[i].parent {
            depth[i] = depth[par] + 1;
        }
    }
    let complete = level_members.iter().all(|members| {
        members
            .iter()
            .map(|&i| depth[i])
            .all(|d| d == depth[members[0]])
    });

    Ok(TaxTree {
        nodes,
        root,
        levels,
        level_members,
        complete,
    })
}

/// Leaf p-values aligned to a tree's node indices.
#[derive(Debug, Clone)]
pub struct LeafPValues {
    by_node: Vec<Option<f64>>,
}

impl LeafPValues {
    /// Validates that every leaf gets exactly one value in [0,1] and that no
    /// inner node carries one.
    pub fn from_pairs(tree: &TaxTree, pairs: &[(NodeId, f64)]) -> Result<LeafPValues> {
        let mut by_node = vec![None; tree.num_nodes()];
        for &(node, p) in pairs {
            if node >= tree.num_nodes() || !tree.node(node).is_leaf() {
                return Err(Error::invalid(format!(
                    "p-value assigned to non-leaf node index {node}"
                )));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!(
                    "p-value {p} for leaf `{}` outside [0,1]",
                    tree.node(node).id
                )));
            }
            if by_node[node].replace(p).is_some() {
                return Err(Error::invalid(format!(
                    "leaf `{}` assigned two p-values",
                    tree.node(node).id
                )));
            }
        }
        for &leaf in tree.level_members(1) {
            if by_node[leaf].is_none() {
                return Err(Error::invalid(format!(
                    "leaf `{}` missing a p-value",
                    tree.node(leaf).id
                )));
            }
        }
        Ok(LeafPValues { by_node })
    }

    /// Fill values from a function of the leaf index (simulation use).
    pub fn from_fn(tree: &TaxTree, mut f: impl FnMut(NodeId) -> f64) -> LeafPValues {
        let mut by_node = vec![None; tree.num_nodes()];
        for &leaf in tree.level_members(1) {
            let p = f(leaf);
            debug_assert!((0.0..=1.0).contains(&p));
            by_node[leaf] = Some(p);
        }
        LeafPValues { by_node }
    }

    pub fn get(&self, leaf: NodeId) -> f64 {
        self.by_node[leaf].expect("node has no leaf p-value")
    }
}
