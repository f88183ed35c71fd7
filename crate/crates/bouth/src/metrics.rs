//! Ground truth under the three nulls, realized error rates, weighted
//! Jaccard accuracy, and driver pinpointing.

use crate::bottomup::RunTrace;
use crate::error::{Error, Result};
use crate::tree::{NodeId, TaxTree};
use crate::weights::{runtime_weights, ActiveLevel};

/// Driver nodes plus the leaves they make associated.
#[derive(Debug, Clone)]
pub struct TruthModel {
    drivers: Vec<NodeId>,
    /// Per-node flag; true exactly for associated leaves.
    associated_leaf: Vec<bool>,
}

impl TruthModel {
    /// Drivers must not be nested (no driver is an ancestor of another).
    pub fn new(tree: &TaxTree, drivers: Vec<NodeId>) -> Result<TruthModel> {
        if drivers.is_empty() {
            return Err(Error::invalid("truth model needs at least one driver"));
        }
        let driver_set: std::collections::HashSet<NodeId> = drivers.iter().copied().collect();
        for &d in &drivers {
            if tree.ancestors(d).any(|a| driver_set.contains(&a)) {
                return Err(Error::invalid("drivers must not be nested"));
            }
        }
        let mut associated_leaf = vec![false; tree.num_nodes()];
        for &d in &drivers {
            for leaf in tree.descendants_leaves(d) {
                associated_leaf[leaf] = true;
            }
        }
        Ok(TruthModel {
            drivers,
            associated_leaf,
        })
    }

    pub fn drivers(&self) -> &[NodeId] {
        &self.drivers
    }

    pub fn is_associated_leaf(&self, node: NodeId) -> bool {
        self.associated_leaf[node]
    }

    /// The truly associated node set: drivers and all their descendants.
    pub fn associated_nodes(&self, tree: &TaxTree) -> Vec<bool> {
        let mut out = vec![false; tree.num_nodes()];
        for &d in &self.drivers {
            out[d] = true;
            for n in tree.descendants(d) {
                out[n] = true;
            }
        }
        out
    }
}

/// Global-null truth: a node is non-null iff it has at least one associated
/// leaf descendant.
pub fn truth_global(tree: &TaxTree, truth: &TruthModel) -> Vec<bool> {
    let mut non_null = vec![false; tree.num_nodes()];
    for level in 1..=tree.levels() {
        for &n in tree.level_members(level) {
            let rec = tree.node(n);
            non_null[n] = if rec.is_leaf() {
                truth.is_associated_leaf(n)
            } else {
                rec.children.iter().any(|&c| non_null[c])
            };
        }
    }
    non_null
}

/// Conjunction-null truth: a node is non-null iff all of its leaf
/// descendants are associated.
pub fn truth_conjunction(tree: &TaxTree, truth: &TruthModel) -> Vec<bool> {
    let mut non_null = vec![false; tree.num_nodes()];
    for level in 1..=tree.levels() {
        for &n in tree.level_members(level) {
            let rec = tree.node(n);
            non_null[n] = if rec.is_leaf() {
                truth.is_associated_leaf(n)
            } else {
                rec.children.iter().all(|&c| non_null[c])
            };
        }
    }
    non_null
}

/// Modified-null truth, resolved against a detection trace: a leaf is
/// non-null iff associated; a tested inner node is non-null iff one of the
/// offspring that were still undetected when it was tested is non-null under
/// this same assignment. Never-tested nodes count as non-null (an
/// auto-detection is never a false assignment of its own).
pub fn truth_modified(tree: &TaxTree, truth: &TruthModel, trace: &RunTrace) -> Vec<bool> {
    let mut non_null = vec![true; tree.num_nodes()];
    for &leaf in tree.level_members(1) {
        non_null[leaf] = truth.is_associated_leaf(leaf);
    }
    for lt in &trace.levels {
        if lt.level == 1 {
            continue;
        }
        for (pos, &node) in lt.tested.iter().enumerate() {
            debug_assert!(
                !lt.undetected_children[pos].is_empty(),
                "tested nodes keep at least one undetected child"
            );
            non_null[node] = lt.undetected_children[pos].iter().any(|&c| non_null[c]);
        }
    }
    non_null
}

/// How false assignments are counted in the FAR numerator/denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FarWeighting {
    /// One count per rejection (the unweighted procedure).
    Unit,
    /// Detection-multiplicity weights (weighted and least-favorable modes,
    /// and baseline replays).
    ByWeight,
}

#[derive(Debug, Clone, Copy)]
pub struct ErrorRates {
    pub far: f64,
    pub fdr: f64,
    pub fdrc: f64,
}

/// Realized error proportions for one replicate. FAR comes from the trace
/// (per-test accounting under the modified null); FDR and FDRc compare the
/// reported detection set against the global and conjunction truths.
pub fn error_rates(
    tree: &TaxTree,
    truth: &TruthModel,
    trace: &RunTrace,
    detected_report: &[bool],
    weighting: FarWeighting,
) -> ErrorRates {
    let modified = truth_modified(tree, truth, trace);
    let mut v_sum = 0.0f64;
    let mut r_sum = 0.0f64;
    for lt in &trace.levels {
        for (pos, &node) in lt.tested.iter().enumerate() {
            if !lt.rejected[pos] {
                continue;
            }
            let w = match weighting {
                FarWeighting::Unit => 1.0,
                FarWeighting::ByWeight => lt.weights[pos] as f64,
            };
            r_sum += w;
            if !modified[node] {
                v_sum += w;
            }
        }
    }
    let far = v_sum / r_sum.max(1.0);

    let global = truth_global(tree, truth);
    let conj = truth_conjunction(tree, truth);
    let detected_count = detected_report.iter().filter(|&&d| d).count() as f64;
    let fdr = detected_report
        .iter()
        .enumerate()
        .filter(|&(n, &d)| d && !global[n])
        .count() as f64
        / detected_count.max(1.0);
    let fdrc = detected_report
        .iter()
        .enumerate()
        .filter(|&(n, &d)| d && !conj[n])
        .count() as f64
        / detected_count.max(1.0);
    ErrorRates { far, fdr, fdrc }
}

/// Replay a baseline's detection set level by level as if each detection
/// were a modified-null rejection, recording tested sets, runtime weights,
/// and propagation, so the FAR machinery applies to it.
pub fn replay_trace(tree: &TaxTree, node_ps: &[f64], detected_set: &[bool]) -> RunTrace {
    assert_eq!(node_ps.len(), tree.num_nodes());
    assert_eq!(detected_set.len(), tree.num_nodes());
    let mut detected = vec![false; tree.num_nodes()];
    let mut trace = RunTrace::default();
    for level in 1..=tree.levels() {
        let active = ActiveLevel::new(tree, &detected, level);
        if active.is_empty() {
            trace.levels.push(crate::bottomup::LevelTrace {
                level,
                tested: Vec::new(),
                pvalues: Vec::new(),
                rejected: Vec::new(),
                weights: Vec::new(),
                undetected_children: Vec::new(),
                alpha_cut: None,
                d_star: 0,
            });
            continue;
        }
        let ps: Vec<f64> = active.tested.iter().map(|&n| node_ps[n]).collect();
        let undetected_children: Vec<Vec<NodeId>> = active
            .tested
            .iter()
            .map(|&n| {
                tree.node(n)
                    .children
                    .iter()
                    .copied()
                    .filter(|&c| !detected[c])
                    .collect()
            })
            .collect();
        let weights = runtime_weights(tree, &active, &ps);
        let rejected: Vec<bool> = active.tested.iter().map(|&n| detected_set[n]).collect();
        let d_star = rejected.iter().filter(|&&r| r).count();
        for (pos, &n) in active.tested.iter().enumerate() {
            if rejected[pos] {
                detected[n] = true;
            }
        }
        // replay propagation so later levels see auto-detections
        loop {
            let mut changed = false;
            for l in 2..=tree.levels() {
                for &n in tree.level_members(l) {
                    if !detected[n] && tree.node(n).children.iter().all(|&c| detected[c]) {
                        detected[n] = true;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        trace.levels.push(crate::bottomup::LevelTrace {
            level,
            tested: active.tested,
            pvalues: ps,
            rejected,
            weights,
            undetected_children,
            alpha_cut: None,
            d_star,
        });
    }
    trace
}

/// Weighted Jaccard similarity between two node sets, each node weighted by
/// its leaf count. Two empty sets count as perfect agreement.
pub fn weighted_jaccard(tree: &TaxTree, detected: &[bool], true_set: &[bool]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for n in 0..tree.num_nodes() {
        let w = tree.node(n).leaf_count as u64;
        match (detected[n], true_set[n]) {
            (true, true) => {
                inter += w;
                union += w;
            }
            (true, false) | (false, true) => union += w,
            (false, false) => {}
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of drivers that are detected while none of their ancestors are.
pub fn pinpoint_rate(tree: &TaxTree, detected: &[bool], truth: &TruthModel) -> f64 {
    let hits = truth
        .drivers()
        .iter()
        .filter(|&&d| detected[d] && tree.ancestors(d).all(|a| !detected[a]))
        .count();
    hits as f64 / truth.drivers().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bottomup::{run_one_stage, Mode, ProcedureConfig};
    use crate::tree::{EdgeRow, LeafPValues};

    fn edge(id: &str, parent: Option<&str>, level: u32) -> EdgeRow {
        EdgeRow {
            id: id.into(),
            parent_id: parent.map(String::from),
            level,
        }
    }

    fn figure_1a() -> TaxTree {
        let mut rows = vec![edge("N4_1", None, 4)];
        for j in 1..=3 {
            rows.push(edge(&format!("N3_{j}"), Some("N4_1"), 3));
        }
        for j in 1..=6 {
            let parent = format!("N3_{}", (j + 1) / 2);
            rows.push(edge(&format!("N2_{j}"), Some(&parent), 2));
        }
        for j in 1..=12 {
            let parent = format!("N2_{}", (j + 1) / 2);
            rows.push(edge(&format!("N1_{j}"), Some(&parent), 1));
        }
        TaxTree::from_edges(&rows).unwrap()
    }

    #[test]
    fn truth_global_and_conjunction_basics() {
        let tree = figure_1a();
        let driver = tree.find("N2_1").unwrap();
        let truth = TruthModel::new(&tree, vec![driver]).unwrap();
        let global = truth_global(&tree, &truth);
        let conj = truth_conjunction(&tree, &truth);

        assert!(global[tree.find("N1_1").unwrap()]);
        assert!(global[tree.find("N3_1").unwrap()]); // ancestor of a driver
        assert!(global[tree.root()]);
        assert!(!global[tree.find("N2_2").unwrap()]); // no associated leaves below

        assert!(conj[driver]);
        assert!(conj[tree.find("N1_2").unwrap()]); // descendant of the driver
        assert!(!conj[tree.find("N3_1").unwrap()]); // sibling subtree not associated
        assert!(!conj[tree.root()]);

        // with no sibling-covering drivers, the conjunction non-null set is
        // exactly drivers plus their descendants
        let assoc = truth.associated_nodes(&tree);
        assert_eq!(conj, assoc);
    }

    #[test]
    fn truth_modified_figure_1a_narrative() {
        // N2_1 is detected; N3_1's only undetected child is N2_2, which is
        // not associated, so N3_1 is modified-null
        let tree = figure_1a();
        let driver = tree.find("N2_1").unwrap();
        let truth = TruthModel::new(&tree, vec![driver]).unwrap();
        let mut node_ps = vec![0.5f64; tree.num_nodes()];
        node_ps[driver] = 1e-9;
        let mut detected_set = vec![false; tree.num_nodes()];
        detected_set[driver] = true;
        let trace = replay_trace(&tree, &node_ps, &detected_set);
        let modified = truth_modified(&tree, &truth, &trace);
        assert!(!modified[tree.find("N3_1").unwrap()]);
        assert!(modified[driver]);

        // a node whose children were all detected is never tested; its
        // auto-detection is not a false assignment, so it counts non-null
        let mut both = vec![false; tree.num_nodes()];
        both[tree.find("N1_11").unwrap()] = true;
        both[tree.find("N1_12").unwrap()] = true;
        let trace2 = replay_trace(&tree, &node_ps, &both);
        let modified2 = truth_modified(&tree, &truth, &trace2);
        let n26 = tree.find("N2_6").unwrap();
        assert!(trace2.levels[1].tested.iter().all(|&n| n != n26));
        assert!(modified2[n26]);

        // no detections anywhere: modified truth equals global truth for
        // every tested node
        let trace = replay_trace(&tree, &node_ps, &vec![false; tree.num_nodes()]);
        let modified = truth_modified(&tree, &truth, &trace);
        let global = truth_global(&tree, &truth);
        for lt in &trace.levels {
            for &n in &lt.tested {
                assert_eq!(modified[n], global[n], "node {n}");
            }
        }
    }

    #[test]
    fn v_ordering_global_modified_conjunction() {
        use rand::Rng;
        let tree = TaxTree::build_complete(2, 4).unwrap();
        let rng = crate::stats::StreamRng::new(2024, 0);
        for rep in 0..1000u64 {
            let mut r = rng.substream(rep);
            let level = 1 + (r.gen::<u64>() % 3) as u32;
            let members = tree.level_members(level);
            let driver = members[(r.gen::<u64>() as usize) % members.len()];
            let truth = TruthModel::new(&tree, vec![driver]).unwrap();
            let beta = 2.0 + 3.0 * r.gen::<f64>();
            let ps = LeafPValues::from_fn(&tree, |n| {
                let mut lr = rng.substream(rep * 100_000 + n as u64);
                if truth.is_associated_leaf(n) {
                    crate::stats::sample_beta_p(beta, &mut lr)
                } else {
                    lr.gen()
                }
            });
            let out = run_one_stage(&tree, &ps, &ProcedureConfig::default()).unwrap();
            let modified = truth_modified(&tree, &truth, &out.trace);
            let global = truth_global(&tree, &truth);
            let conj = truth_conjunction(&tree, &truth);
            for lt in &out.trace.levels {
                for &n in &lt.tested {
                    // null_g => null_m => null_c, i.e. non-null flags nest
                    // the other way
                    assert!(conj[n] <= modified[n] && modified[n] <= global[n]);
                }
            }
        }
    }

    #[test]
    fn error_rates_zero_detection_guard() {
        let tree = TaxTree::build_complete(2, 3).unwrap();
        let truth = TruthModel::new(&tree, vec![tree.level_members(1)[0]]).unwrap();
        let ps = LeafPValues::from_fn(&tree, |_| 0.9);
        let out = run_one_stage(&tree, &ps, &ProcedureConfig::default()).unwrap();
        let rates = error_rates(
            &tree,
            &truth,
            &out.trace,
            &out.detected_flags(),
            FarWeighting::ByWeight,
        );
        assert_eq!(rates.far, 0.0);
        assert_eq!(rates.fdr, 0.0);
        assert_eq!(rates.fdrc, 0.0);
    }

    #[test]
    fn error_rates_true_detection_is_clean() {
        // detect exactly the conjunction-non-null leaves; every rate is zero
        let tree = TaxTree::build_complete(2, 2).unwrap();
        let leaf = tree.level_members(1)[0];
        let truth = TruthModel::new(&tree, vec![leaf]).unwrap();
        let ps = LeafPValues::from_pairs(&tree, &[(leaf, 1e-9), (tree.level_members(1)[1], 0.9)])
            .unwrap();
        let out = run_one_stage(&tree, &ps, &ProcedureConfig::default()).unwrap();
        assert!(out.results[leaf].detected);
        let rates = error_rates(
            &tree,
            &truth,
            &out.trace,
            &out.detected_flags(),
            FarWeighting::ByWeight,
        );
        assert_eq!(rates.far, 0.0);
        assert_eq!(rates.fdrc, 0.0);
    }

    #[test]
    fn fdr_le_far_le_fdrc_with_unit_weights() {
        use rand::Rng;
        // realized rate ordering under unit accounting on the unweighted run
        let tree = TaxTree::build_complete(2, 4).unwrap();
        let rng = crate::stats::StreamRng::new(55, 0);
        let cfg = ProcedureConfig {
            mode: Mode::Unweighted,
            ..ProcedureConfig::default()
        };
        let mut checked = 0;
        for rep in 0..200u64 {
            let mut r = rng.substream(rep);
            let members = tree.level_members(2);
            let driver = members[(r.gen::<u64>() as usize) % members.len()];
            let truth = TruthModel::new(&tree, vec![driver]).unwrap();
            let ps = LeafPValues::from_fn(&tree, |n| {
                let mut lr = rng.substream(rep * 100_000 + n as u64);
                if truth.is_associated_leaf(n) {
                    crate::stats::sample_beta_p(4.0, &mut lr)
                } else {
                    lr.gen()
                }
            });
            let out = run_one_stage(&tree, &ps, &cfg).unwrap();
            let rates = error_rates(
                &tree,
                &truth,
                &out.trace,
                &out.detected_flags(),
                FarWeighting::Unit,
            );
            if out.detected_flags().iter().any(|&d| d) {
                checked += 1;
                assert!(rates.fdr <= rates.far + 1e-12);
                assert!(rates.far <= rates.fdrc + 1e-12);
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn jaccard_examples() {
        let tree = TaxTree::build_complete(2, 2).unwrap();
        let root = tree.root();
        let leaves = tree.level_members(1).to_vec();
        let mut truth = vec![false; 3];
        truth[root] = true;
        truth[leaves[0]] = true;
        truth[leaves[1]] = true;

        assert_eq!(weighted_jaccard(&tree, &truth.clone(), &truth), 1.0);

        let mut only_a = vec![false; 3];
        only_a[leaves[0]] = true;
        assert!((weighted_jaccard(&tree, &only_a, &truth) - 0.25).abs() <= 1e-15);
        // symmetry
        assert_eq!(
            weighted_jaccard(&tree, &only_a, &truth),
            weighted_jaccard(&tree, &truth, &only_a)
        );

        let mut only_b = vec![false; 3];
        only_b[leaves[1]] = true;
        assert_eq!(weighted_jaccard(&tree, &only_a, &only_b), 0.0);
        let none = vec![false; 3];
        assert_eq!(weighted_jaccard(&tree, &none, &none), 1.0);
    }

    #[test]
    fn pinpoint_examples() {
        let tree = TaxTree::build_complete(2, 3).unwrap();
        let mid = tree.level_members(2)[0];
        let truth = TruthModel::new(&tree, vec![mid]).unwrap();

        let mut detected = vec![false; tree.num_nodes()];
        detected[mid] = true;
        assert_eq!(pinpoint_rate(&tree, &detected, &truth), 1.0);

        detected[tree.root()] = true; // detected parent spoils the pinpoint
        assert_eq!(pinpoint_rate(&tree, &detected, &truth), 0.0);
    }

    #[test]
    fn truth_model_rejects_nested_drivers() {
        let tree = TaxTree::build_complete(2, 3).unwrap();
        let mid = tree.level_members(2)[0];
        let leaf_below = tree.node(mid).children[0];
        assert!(TruthModel::new(&tree, vec![mid, leaf_below]).is_err());
        assert!(TruthModel::new(&tree, vec![]).is_err());
    }
}
