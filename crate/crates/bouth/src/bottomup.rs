//! The bottom-up testing procedures: per-level step-down thresholds,
//! detection with upward propagation, aggregation of surviving p-values to
//! parents, and the one-stage and two-stage runs.

use crate::error::{Error, Result};
use crate::stats::{adjust_truncated, Combiner};
use crate::tree::{LeafPValues, NodeId, TaxTree};
use crate::weights::{least_favorable_weights, sorted_weights_complete, ActiveLevel, WeightVector};

/// Weighting scheme for the thresholds and the detection counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One detection per rejection; the report lists the highest node each
    /// test decided.
    Unweighted,
    /// Unique sorted weights (complete trees); incomplete trees fall back
    /// to the least-favorable weights.
    Weighted,
    /// Least-favorable weights on any tree.
    LeastFavorable,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Unweighted => "unweighted",
            Mode::Weighted => "weighted",
            Mode::LeastFavorable => "lf",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProcedureConfig {
    /// Overall FAR target.
    pub q: f64,
    /// Cap on any rejection threshold.
    pub tau0: f64,
    pub mode: Mode,
    /// Per-level targets q_l; `None` means q * n_l / n.
    pub level_split: Option<Vec<f64>>,
    /// (q1, q_rest) budgets for the two-stage procedure.
    pub two_stage: Option<(f64, f64)>,
    /// Parent-test combination rule.
    pub combiner: Combiner,
}

impl Default for ProcedureConfig {
    fn default() -> Self {
        ProcedureConfig {
            q: 0.10,
            tau0: 0.3,
            mode: Mode::Weighted,
            level_split: None,
            two_stage: None,
            combiner: Combiner::Stouffer,
        }
    }
}

impl ProcedureConfig {
    fn validate(&self, tree: &TaxTree) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::invalid(format!("q={} outside (0,1)", self.q)));
        }
        if !(self.tau0 > 0.0 && self.tau0 < 1.0) {
            return Err(Error::invalid(format!("tau0={} outside (0,1)", self.tau0)));
        }
        if let Some(split) = &self.level_split {
            if split.len() != tree.levels() as usize {
                return Err(Error::invalid(format!(
                    "level_split has {} entries for a tree with {} levels",
                    split.len(),
                    tree.levels()
                )));
            }
            if split.iter().any(|&x| x < 0.0) {
                return Err(Error::invalid("level_split entries must be nonnegative"));
            }
            let sum: f64 = split.iter().sum();
            if (sum - self.q).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "level_split sums to {sum}, expected q={}",
                    self.q
                )));
            }
        }
        if let Some((q1, q_rest)) = self.two_stage {
            if !(q1 > 0.0 && q1 < 1.0 && q_rest > 0.0 && q_rest < 1.0) {
                return Err(Error::invalid("two-stage budgets must lie in (0,1)"));
            }
        }
        Ok(())
    }

    /// q_l = q * n_l / n unless overridden.
    fn split(&self, tree: &TaxTree) -> Vec<f64> {
        if let Some(split) = &self.level_split {
            return split.clone();
        }
        let n = tree.num_nodes() as f64;
        (1..=tree.levels())
            .map(|l| self.q * tree.level_members(l).len() as f64 / n)
            .collect()
    }
}

/// Per-node detection flags plus the running counters.
#[derive(Debug, Clone)]
pub struct DetectionState {
    detected: Vec<bool>,
    auto_detected: Vec<bool>,
    /// Surviving (undetected) tested nodes carry their p-value and the
    /// truncation point they cleared; aggregation adjusts each child by its
    /// own cut.
    residual: Vec<Option<Residual>>,
    /// Step-down rejections per level (d*_l), indexed by level - 1.
    d_star: Vec<usize>,
    /// Running detection counter: rejections in unweighted mode, all
    /// detected nodes (including propagated) in weighted modes.
    d_cum: u64,
}

#[derive(Debug, Clone, Copy)]
struct Residual {
    p: f64,
    cut: f64,
}

impl DetectionState {
    pub fn new(tree: &TaxTree) -> DetectionState {
        DetectionState {
            detected: vec![false; tree.num_nodes()],
            auto_detected: vec![false; tree.num_nodes()],
            residual: vec![None; tree.num_nodes()],
            d_star: vec![0; tree.levels() as usize],
            d_cum: 0,
        }
    }

    pub fn detected(&self) -> &[bool] {
        &self.detected
    }

    pub fn auto_detected(&self) -> &[bool] {
        &self.auto_detected
    }

    pub fn d_cum(&self) -> u64 {
        self.d_cum
    }

    pub fn d_star(&self, level: u32) -> usize {
        self.d_star[(level - 1) as usize]
    }

    fn mark_rejected(&mut self, node: NodeId) {
        self.detected[node] = true;
        self.residual[node] = None;
    }

    fn mark_auto(&mut self, node: NodeId) {
        self.detected[node] = true;
        self.auto_detected[node] = true;
        self.residual[node] = None;
    }
}

/// Auto-detect every undetected inner node whose children are all detected,
/// repeating until nothing changes. Returns the newly detected nodes.
pub fn propagate_up(state: &mut DetectionState, tree: &TaxTree) -> Vec<NodeId> {
    let mut newly = Vec::new();
    loop {
        let mut changed = false;
        for level in 2..=tree.levels() {
            for &n in tree.level_members(level) {
                if !state.detected[n] && tree.node(n).children.iter().all(|&c| state.detected[c]) {
                    state.mark_auto(n);
                    newly.push(n);
                    changed = true;
                }
            }
        }
        if !changed {
            return newly;
        }
    }
}

/// Detect `node` by its own test, then walk its ancestor chain while
/// propagation completes. Returns the auto-detected ancestors, bottom-up.
fn detect_with_chain(state: &mut DetectionState, tree: &TaxTree, node: NodeId) -> Vec<NodeId> {
    state.mark_rejected(node);
    let mut newly = Vec::new();
    let mut cur = node;
    while let Some(parent) = tree.node(cur).parent {
        if state.detected[parent]
            || !tree
                .node(parent)
                .children
                .iter()
                .all(|&c| state.detected[c])
        {
            break;
        }
        state.mark_auto(parent);
        newly.push(parent);
        cur = parent;
    }
    newly
}

/// Inputs of the threshold computation for one level pass.
#[derive(Debug, Clone, Copy)]
pub struct LevelCtx {
    /// Number of tested nodes n*.
    pub n_star: usize,
    /// Detections carried in from below (D_{l-1}, or D-dagger in stage 2).
    pub d_prev: u64,
    /// This level's FAR budget q_l.
    pub q_level: f64,
    /// Threshold cap.
    pub tau0: f64,
}

/// Ascending step-down thresholds: alpha_j solves
/// alpha/(1-alpha) = min(numerator_j / denominator_j * q_l, tau0/(1-tau0)),
/// with unit counts when `weights` is absent and cumulative weight sums
/// otherwise.
pub fn thresholds(ctx: &LevelCtx, weights: Option<&WeightVector>) -> Vec<f64> {
    assert!(ctx.n_star >= 1);
    if let Some(w) = weights {
        assert_eq!(
            w.len(),
            ctx.n_star,
            "weight vector must cover the tested nodes"
        );
    }
    let cap = ctx.tau0 / (1.0 - ctx.tau0);
    (1..=ctx.n_star)
        .map(|j| {
            let (num, den) = match weights {
                None => (ctx.d_prev as f64 + j as f64, (ctx.n_star - j + 1) as f64),
                Some(w) => (
                    ctx.d_prev as f64 + w.cumulative()[j - 1] as f64,
                    w.reverse_cumulative()[j - 1] as f64,
                ),
            };
            let ratio = (num / den * ctx.q_level).min(cap);
            ratio / (1.0 + ratio)
        })
        .collect()
}

/// Step-down scan: the largest k such that every sorted p-value up to k
/// clears its threshold; stops at the first failure.
pub fn step_down(sorted_ps: &[f64], schedule: &[f64]) -> usize {
    assert_eq!(sorted_ps.len(), schedule.len());
    let mut d_star = 0;
    for (p, alpha) in sorted_ps.iter().zip(schedule) {
        if p <= alpha {
            d_star += 1;
        } else {
            break;
        }
    }
    d_star
}

/// Aggregate the surviving p-values at level `l` into p-values for the
/// tested nodes of level `l + 1`. `pvalues_l` holds (node, p) for the
/// level-`l` tested nodes and `alpha_cut` the truncation point their
/// survivors cleared; nodes with no undetected offspring are skipped
/// (they are auto-detected, not tested).
pub fn aggregate_level(
    tree: &TaxTree,
    state: &mut DetectionState,
    pvalues_l: &[(NodeId, f64)],
    alpha_cut: f64,
) -> Vec<(NodeId, f64)> {
    for &(node, p) in pvalues_l {
        if !state.detected[node] {
            state.residual[node] = Some(Residual { p, cut: alpha_cut });
        }
    }
    let level = pvalues_l
        .first()
        .map(|&(n, _)| tree.node(n).level)
        .unwrap_or(0);
    let active = ActiveLevel::new(tree, &state.detected, level + 1);
    active
        .tested
        .iter()
        .map(|&n| (n, aggregate_parent_p(tree, state, n, Combiner::default())))
        .collect()
}

fn aggregate_parent_p(
    tree: &TaxTree,
    state: &DetectionState,
    node: NodeId,
    combiner: Combiner,
) -> f64 {
    let adjusted: Vec<f64> = tree
        .node(node)
        .children
        .iter()
        .filter(|&&c| !state.detected[c])
        .map(|&c| {
            let r = state.residual[c].expect("undetected child must carry a residual p-value");
            adjust_truncated(r.p, r.cut)
        })
        .collect();
    combiner.combine(&adjusted)
}

/// One level pass as recorded for evaluation.
#[derive(Debug, Clone)]
pub struct LevelTrace {
    pub level: u32,
    /// Tested nodes, ascending index order.
    pub tested: Vec<NodeId>,
    /// Test p-values aligned with `tested`.
    pub pvalues: Vec<f64>,
    /// Step-down outcome aligned with `tested`.
    pub rejected: Vec<bool>,
    /// Runtime detection-multiplicity weights aligned with `tested`.
    pub weights: Vec<u64>,
    /// Undetected offspring at test time, aligned with `tested`.
    pub undetected_children: Vec<Vec<NodeId>>,
    /// Truncation point applied to survivors; `None` when all were rejected.
    pub alpha_cut: Option<f64>,
    pub d_star: usize,
}

/// The level-by-level record of one run.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub levels: Vec<LevelTrace>,
}

/// Per-node outcome of a run.
#[derive(Debug, Clone)]
pub struct NodeResult {
    pub node: NodeId,
    pub level: u32,
    /// The p-value used in the node's test; `None` when never tested.
    pub p_value: Option<f64>,
    pub detected: bool,
    pub auto_detected: bool,
    pub driver: bool,
}

/// Results plus the trace the error-rate evaluation consumes.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// One entry per node, in node-index order.
    pub results: Vec<NodeResult>,
    pub trace: RunTrace,
    pub state: DetectionState,
}

impl RunOutcome {
    pub fn detected_flags(&self) -> Vec<bool> {
        self.results.iter().map(|r| r.detected).collect()
    }
}

/// Detected nodes none of whose ancestors are detected.
pub fn driver_flags(tree: &TaxTree, detected: &[bool]) -> Vec<bool> {
    (0..tree.num_nodes())
        .map(|n| detected[n] && tree.ancestors(n).all(|a| !detected[a]))
        .collect()
}

struct Runner<'a> {
    tree: &'a TaxTree,
    cfg: &'a ProcedureConfig,
    state: DetectionState,
    trace: RunTrace,
    /// p-value of each tested node (report column).
    test_p: Vec<Option<f64>>,
    /// Unweighted mode: the highest node decided by each rejection.
    reported: Vec<bool>,
}

impl<'a> Runner<'a> {
    fn new(tree: &'a TaxTree, cfg: &'a ProcedureConfig) -> Runner<'a> {
        Runner {
            tree,
            cfg,
            state: DetectionState::new(tree),
            trace: RunTrace::default(),
            test_p: vec![None; tree.num_nodes()],
            reported: vec![false; tree.num_nodes()],
        }
    }

    /// Run the level passes `levels`, spending `q_split[l-1]` at level l.
    /// `d_prev` starts the detection counter (0, or reset for stage 2).
    fn run_levels(
        &mut self,
        leaf_ps: &LeafPValues,
        levels: std::ops::RangeInclusive<u32>,
        q_split: &[f64],
        mut d_prev: u64,
    ) {
        for level in levels {
            let active = ActiveLevel::new(self.tree, &self.state.detected, level);
            if active.is_empty() {
                // everything here is decided; the level's budget is not
                // redistributed
                self.trace.levels.push(LevelTrace {
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
            let n_star = active.len();
            let ps: Vec<f64> = active
                .tested
                .iter()
                .map(|&n| {
                    if level == 1 {
                        leaf_ps.get(n)
                    } else {
                        aggregate_parent_p(self.tree, &self.state, n, self.cfg.combiner)
                    }
                })
                .collect();
            let undetected_children: Vec<Vec<NodeId>> = active
                .tested
                .iter()
                .map(|&n| {
                    self.tree
                        .node(n)
                        .children
                        .iter()
                        .copied()
                        .filter(|&c| !self.state.detected[c])
                        .collect()
                })
                .collect();
            for (&n, &p) in active.tested.iter().zip(&ps) {
                self.test_p[n] = Some(p);
            }

            let weight_vec = match self.cfg.mode {
                Mode::Unweighted => None,
                Mode::Weighted => Some(if self.tree.is_complete() {
                    sorted_weights_complete(self.tree, &active)
                } else {
                    least_favorable_weights(self.tree, &active)
                }),
                Mode::LeastFavorable => Some(least_favorable_weights(self.tree, &active)),
            };
            let ctx = LevelCtx {
                n_star,
                d_prev,
                q_level: q_split[(level - 1) as usize],
                tau0: self.cfg.tau0,
            };
            let schedule = thresholds(&ctx, weight_vec.as_ref());

            // ascending (p, node index)
            let mut order: Vec<usize> = (0..n_star).collect();
            order.sort_by(|&a, &b| {
                (ps[a], active.tested[a])
                    .partial_cmp(&(ps[b], active.tested[b]))
                    .unwrap()
            });
            let sorted_ps: Vec<f64> = order.iter().map(|&k| ps[k]).collect();
            let d_star = step_down(&sorted_ps, &schedule);
            self.state.d_star[(level - 1) as usize] = d_star;

            let mut rejected = vec![false; n_star];
            for &k in order.iter().take(d_star) {
                rejected[k] = true;
            }

            // survivors keep their p together with the cut they cleared
            let alpha_cut = (d_star < n_star).then(|| schedule[d_star]);
            if let Some(cut) = alpha_cut {
                for (k, &n) in active.tested.iter().enumerate() {
                    if !rejected[k] {
                        self.state.residual[n] = Some(Residual { p: ps[k], cut });
                    }
                }
            }

            // resolve rejections in ascending order, propagating after each
            for &k in order.iter().take(d_star) {
                let node = active.tested[k];
                let chain = detect_with_chain(&mut self.state, self.tree, node);
                match self.cfg.mode {
                    Mode::Unweighted => {
                        self.state.d_cum += 1;
                        let highest = chain.last().copied().unwrap_or(node);
                        self.reported[highest] = true;
                    }
                    _ => {
                        self.state.d_cum += 1 + chain.len() as u64;
                    }
                }
            }
            d_prev = self.state.d_cum;

            debug_assert!(
                propagate_up(&mut self.state, self.tree).is_empty(),
                "per-rejection propagation must reach the fixpoint"
            );

            let runtime = crate::weights::runtime_weights(self.tree, &active, &ps);
            self.trace.levels.push(LevelTrace {
                level,
                tested: active.tested,
                pvalues: ps,
                rejected,
                weights: runtime,
                undetected_children,
                alpha_cut,
                d_star,
            });
        }
    }

    /// Report flags per mode: weighted modes list every detected node, the
    /// unweighted mode lists the highest node each rejection decided.
    fn report_flags(&self) -> Vec<bool> {
        match self.cfg.mode {
            Mode::Unweighted => self.reported.clone(),
            _ => self.state.detected.clone(),
        }
    }

    fn results(&self, report: &[bool], drivers: &[bool]) -> Vec<NodeResult> {
        (0..self.tree.num_nodes())
            .map(|n| NodeResult {
                node: n,
                level: self.tree.node(n).level,
                p_value: self.test_p[n],
                detected: report[n],
                auto_detected: report[n] && self.state.auto_detected[n],
                driver: drivers[n],
            })
            .collect()
    }
}

/// One-stage bottom-up run over all levels.
pub fn run_one_stage(
    tree: &TaxTree,
    leaf_ps: &LeafPValues,
    cfg: &ProcedureConfig,
) -> Result<RunOutcome> {
    cfg.validate(tree)?;
    let q_split = cfg.split(tree);
    let mut runner = Runner::new(tree, cfg);
    runner.run_levels(leaf_ps, 1..=tree.levels(), &q_split, 0);
    let report = runner.report_flags();
    let drivers = driver_flags(tree, &report);
    Ok(RunOutcome {
        results: runner.results(&report, &drivers),
        trace: runner.trace,
        state: runner.state,
    })
}

/// Two-stage run: stage 1 spends q1 on the leaf level (propagated
/// higher-level detections included in its report); stage 2 reruns the
/// remaining levels on the reduced tree with the counter restarted and
/// q_rest split as q_rest * n_l / sum of n_l over levels >= 2.
///
/// Stage driver flags are computed against the union of both stages'
/// detections.
pub fn run_two_stage(
    tree: &TaxTree,
    leaf_ps: &LeafPValues,
    cfg: &ProcedureConfig,
) -> Result<(RunOutcome, RunOutcome)> {
    cfg.validate(tree)?;
    let (q1, q_rest) = cfg
        .two_stage
        .ok_or_else(|| Error::invalid("two-stage run requires (q1, q_rest)"))?;
    if cfg.mode == Mode::Unweighted {
        return Err(Error::invalid(
            "the two-stage procedure uses weighted thresholds; pick a weighted mode",
        ));
    }
    if tree.levels() < 2 {
        return Err(Error::invalid("two-stage run needs at least two levels"));
    }

    // stage 1: leaf level only at q1
    let mut split1 = vec![0.0; tree.levels() as usize];
    split1[0] = q1;
    let stage1_cfg = ProcedureConfig {
        q: q1,
        level_split: None,
        two_stage: None,
        ..cfg.clone()
    };
    let mut runner = Runner::new(tree, &stage1_cfg);
    runner.run_levels(leaf_ps, 1..=1, &split1, 0);
    let stage1_detected = runner.state.detected().to_vec();
    let stage1_trace = std::mem::take(&mut runner.trace);

    // stage 2: levels 2..=L with the counter restarted
    let inner_total: f64 = (2..=tree.levels())
        .map(|l| tree.level_members(l).len() as f64)
        .sum();
    let mut split2 = vec![0.0; tree.levels() as usize];
    for l in 2..=tree.levels() {
        split2[(l - 1) as usize] = q_rest * tree.level_members(l).len() as f64 / inner_total;
    }
    let stage2_cfg = ProcedureConfig {
        q: q_rest,
        level_split: None,
        two_stage: None,
        ..cfg.clone()
    };
    let mut runner2 = Runner {
        tree,
        cfg: &stage2_cfg,
        state: runner.state.clone(),
        trace: RunTrace::default(),
        test_p: runner.test_p.clone(),
        reported: vec![false; tree.num_nodes()],
    };
    runner2.state.d_cum = 0;
    runner2.run_levels(leaf_ps, 2..=tree.levels(), &split2, 0);

    let union: Vec<bool> = runner2.state.detected().to_vec();
    let drivers_union = driver_flags(tree, &union);

    let stage2_new: Vec<bool> = (0..tree.num_nodes())
        .map(|n| union[n] && !stage1_detected[n])
        .collect();

    let stage1_drivers: Vec<bool> = (0..tree.num_nodes())
        .map(|n| stage1_detected[n] && drivers_union[n])
        .collect();
    let stage2_drivers: Vec<bool> = (0..tree.num_nodes())
        .map(|n| stage2_new[n] && drivers_union[n])
        .collect();

    let stage1_results = (0..tree.num_nodes())
        .map(|n| NodeResult {
            node: n,
            level: tree.node(n).level,
            p_value: runner.test_p[n],
            detected: stage1_detected[n],
            auto_detected: stage1_detected[n] && runner.state.auto_detected()[n],
            driver: stage1_drivers[n],
        })
        .collect();
    // stage 2 reports the reduced tree: inner nodes not decided at stage 1
    let stage2_results = (0..tree.num_nodes())
        .filter(|&n| tree.node(n).level >= 2 && !stage1_detected[n])
        .map(|n| NodeResult {
            node: n,
            level: tree.node(n).level,
            p_value: runner2.test_p[n],
            detected: stage2_new[n],
            auto_detected: stage2_new[n] && runner2.state.auto_detected()[n],
            driver: stage2_drivers[n],
        })
        .collect();

    Ok((
        RunOutcome {
            results: stage1_results,
            trace: stage1_trace,
            state: runner.state,
        },
        RunOutcome {
            results: stage2_results,
            trace: runner2.trace,
            state: runner2.state,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::EdgeRow;

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

    fn uniform_leaf_ps(tree: &TaxTree, p: f64) -> LeafPValues {
        LeafPValues::from_fn(tree, |_| p)
    }

    #[test]
    fn threshold_hand_values() {
        // unweighted: D=0, n*=4, q_l=0.05 -> alpha_1 = 0.0125/1.0125
        let ctx = LevelCtx {
            n_star: 4,
            d_prev: 0,
            q_level: 0.05,
            tau0: 0.3,
        };
        let alpha = thresholds(&ctx, None);
        assert!((alpha[0] - 0.012345679012345678).abs() <= 1e-12);

        // cap: D=100, n*=1 -> ratio 5.05 exceeds tau0/(1-tau0), alpha = 0.3
        let ctx = LevelCtx {
            n_star: 1,
            d_prev: 100,
            q_level: 0.05,
            tau0: 0.3,
        };
        assert!((thresholds(&ctx, None)[0] - 0.3).abs() <= 1e-12);

        // weighted with sorted weights (1,1,1,1,2,3), j=5:
        // (0+6)/5 * 0.06 = 0.072 -> 0.072/1.072
        let wv = WeightVector::from_aligned(&[0, 1, 2, 3, 4, 5], vec![1, 1, 1, 1, 2, 3]);
        let ctx = LevelCtx {
            n_star: 6,
            d_prev: 0,
            q_level: 0.06,
            tau0: 0.3,
        };
        let alpha = thresholds(&ctx, Some(&wv));
        assert!((alpha[4] - 0.072 / 1.072).abs() <= 1e-12);
    }

    #[test]
    fn thresholds_ascending_and_capped() {
        let mut rng = crate::stats::StreamRng::new(5, 0).substream(0);
        use rand::Rng;
        for _ in 0..200 {
            let n_star = 1 + (rng.gen::<u64>() % 12) as usize;
            let ctx = LevelCtx {
                n_star,
                d_prev: rng.gen::<u64>() % 50,
                q_level: 0.001 + rng.gen::<f64>() * 0.2,
                tau0: 0.3,
            };
            let weights: Vec<u64> = (0..n_star).map(|_| 1 + rng.gen::<u64>() % 4).collect();
            let ids: Vec<usize> = (0..n_star).collect();
            let wv = WeightVector::from_aligned(&ids, weights);
            for schedule in [thresholds(&ctx, None), thresholds(&ctx, Some(&wv))] {
                for pair in schedule.windows(2) {
                    assert!(pair[0] <= pair[1] + 1e-15);
                }
                assert!(schedule.iter().all(|&a| a <= 0.3 + 1e-15));
            }
        }
    }

    #[test]
    fn thresholds_with_unit_weights_match_unweighted() {
        for n_star in 1..=9usize {
            let ctx = LevelCtx {
                n_star,
                d_prev: 3,
                q_level: 0.07,
                tau0: 0.3,
            };
            let ids: Vec<usize> = (0..n_star).collect();
            let ones = WeightVector::from_aligned(&ids, vec![1; n_star]);
            let a = thresholds(&ctx, None);
            let b = thresholds(&ctx, Some(&ones));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn step_down_examples() {
        assert_eq!(step_down(&[0.001, 0.002, 0.9], &[0.01, 0.02, 0.03]), 2);
        assert_eq!(step_down(&[0.5, 0.6], &[0.01, 0.02]), 0);
        assert_eq!(step_down(&[0.001, 0.01, 0.02], &[0.01, 0.02, 0.03]), 3);
    }

    #[test]
    fn step_down_matches_definition_brute_force() {
        use rand::Rng;
        let mut rng = crate::stats::StreamRng::new(6, 0).substream(0);
        for _ in 0..500 {
            let n = 1 + (rng.gen::<u64>() % 8) as usize;
            let mut ps: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let schedule: Vec<f64> = {
                let mut s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 0.5).collect();
                s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                s
            };
            // largest k with p_(j) <= alpha_j for all j <= k and
            // (k = n or p_(k+1) > alpha_(k+1))
            let mut expect = 0;
            for k in (0..=n).rev() {
                let all_pass = (0..k).all(|j| ps[j] <= schedule[j]);
                let boundary = k == n || ps[k] > schedule[k];
                if all_pass && boundary {
                    expect = k;
                    break;
                }
            }
            assert_eq!(step_down(&ps, &schedule), expect);
        }
    }

    #[test]
    fn propagation_examples() {
        let tree = TaxTree::build_complete(2, 2).unwrap();
        let mut state = DetectionState::new(&tree);
        for &leaf in tree.level_members(1) {
            state.mark_rejected(leaf);
        }
        let newly = propagate_up(&mut state, &tree);
        assert_eq!(newly, vec![tree.root()]);
        assert!(state.auto_detected()[tree.root()]);

        // figure 1(a): detecting the two leaves under N2_6 auto-detects it;
        // N3_3 follows only after N2_5, and the root needs N3_1, N3_2 too
        let tree = figure_1a();
        let mut state = DetectionState::new(&tree);
        state.mark_rejected(tree.find("N1_11").unwrap());
        state.mark_rejected(tree.find("N1_12").unwrap());
        let newly = propagate_up(&mut state, &tree);
        assert_eq!(newly, vec![tree.find("N2_6").unwrap()]);

        state.mark_rejected(tree.find("N2_5").unwrap());
        let newly = propagate_up(&mut state, &tree);
        assert_eq!(newly, vec![tree.find("N3_3").unwrap()]);

        state.mark_rejected(tree.find("N3_1").unwrap());
        state.mark_rejected(tree.find("N3_2").unwrap());
        let newly = propagate_up(&mut state, &tree);
        assert_eq!(newly, vec![tree.find("N4_1").unwrap()]);
    }

    #[test]
    fn aggregate_level_examples() {
        // two undetected children p = 0.65, cut 0.3 -> adjusted 0.5 -> parent 0.5
        let tree = TaxTree::build_complete(2, 2).unwrap();
        let mut state = DetectionState::new(&tree);
        let leaves = tree.level_members(1).to_vec();
        let out = aggregate_level(
            &tree,
            &mut state,
            &[(leaves[0], 0.65), (leaves[1], 0.65)],
            0.3,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, tree.root());
        assert!((out[0].1 - 0.5).abs() <= 1e-12);

        // single undetected child, cut 0 -> parent p equals the child's
        let rows = vec![
            edge("r", None, 2),
            edge("a", Some("r"), 1),
            edge("b", Some("r"), 1),
        ];
        let tree = TaxTree::from_edges(&rows).unwrap();
        let mut state = DetectionState::new(&tree);
        let b = tree.find("b").unwrap();
        state.mark_rejected(b);
        let a = tree.find("a").unwrap();
        let out = aggregate_level(&tree, &mut state, &[(a, 0.8)], 0.0);
        assert_eq!(out.len(), 1);
        assert!((out[0].1 - 0.8).abs() <= 1e-12);

        // all children rejected -> nothing to aggregate, parent resolves by
        // propagation instead
        let tree = TaxTree::build_complete(2, 2).unwrap();
        let mut state = DetectionState::new(&tree);
        for &leaf in tree.level_members(1) {
            state.mark_rejected(leaf);
        }
        propagate_up(&mut state, &tree);
        let out = aggregate_level(&tree, &mut state, &[], 0.1);
        assert!(out.is_empty());
    }

    #[test]
    fn run_all_null_detects_nothing() {
        for mode in [Mode::Unweighted, Mode::Weighted, Mode::LeastFavorable] {
            let tree = TaxTree::build_complete(2, 4).unwrap();
            let cfg = ProcedureConfig {
                mode,
                ..ProcedureConfig::default()
            };
            let out = run_one_stage(&tree, &uniform_leaf_ps(&tree, 0.99), &cfg).unwrap();
            assert!(out.results.iter().all(|r| !r.detected));
            // the root was still tested: aggregation reached the top
            assert!(out.results[tree.root()].p_value.is_some());
        }
    }

    #[test]
    fn run_strong_signal_detects_and_flags_driver() {
        let tree = TaxTree::build_complete(2, 2).unwrap();
        let ps = uniform_leaf_ps(&tree, 1e-6);
        let out = run_one_stage(&tree, &ps, &ProcedureConfig::default()).unwrap();
        let root = tree.root();
        for &leaf in tree.level_members(1) {
            assert!(out.results[leaf].detected);
            assert!(!out.results[leaf].driver);
        }
        assert!(out.results[root].detected);
        assert!(out.results[root].auto_detected);
        assert!(out.results[root].driver);
        assert_eq!(out.results[root].p_value, None);
    }

    #[test]
    fn unweighted_reports_highest_decided_node() {
        // strong leaves under one parent: rejecting the second leaf decides
        // the parent, so the report carries leaf1 and the parent, not leaf2
        let rows = vec![
            edge("root", None, 3),
            edge("a", Some("root"), 2),
            edge("b", Some("root"), 2),
            edge("a1", Some("a"), 1),
            edge("a2", Some("a"), 1),
            edge("b1", Some("b"), 1),
            edge("b2", Some("b"), 1),
        ];
        let tree = TaxTree::from_edges(&rows).unwrap();
        let ps = LeafPValues::from_pairs(
            &tree,
            &[
                (tree.find("a1").unwrap(), 1e-9),
                (tree.find("a2").unwrap(), 1e-8),
                (tree.find("b1").unwrap(), 0.9),
                (tree.find("b2").unwrap(), 0.95),
            ],
        )
        .unwrap();
        let cfg = ProcedureConfig {
            mode: Mode::Unweighted,
            ..ProcedureConfig::default()
        };
        let out = run_one_stage(&tree, &ps, &cfg).unwrap();
        let a = tree.find("a").unwrap();
        let a1 = tree.find("a1").unwrap();
        let a2 = tree.find("a2").unwrap();
        assert!(out.results[a1].detected, "first rejection reports itself");
        assert!(
            out.results[a].detected,
            "second rejection reports the parent"
        );
        assert!(
            !out.results[a2].detected,
            "the rejection that decided the parent adds a single entry"
        );
        assert_eq!(out.state.d_cum(), 2);

        // weighted mode reports all three
        let out_w = run_one_stage(&tree, &ps, &ProcedureConfig::default()).unwrap();
        assert!(out_w.results[a1].detected && out_w.results[a2].detected);
        assert!(out_w.results[a].detected);
        assert_eq!(out_w.state.d_cum(), 3);
    }

    #[test]
    fn report_consistency_invariants() {
        use rand::Rng;
        let tree = TaxTree::build_complete(2, 5).unwrap();
        for (seed, mode) in [(1u64, Mode::Weighted), (2, Mode::LeastFavorable)] {
            let rng = crate::stats::StreamRng::new(seed, 0);
            for rep in 0..20u64 {
                let ps = LeafPValues::from_fn(&tree, |n| {
                    let mut r = rng.substream(rep * 10_000 + n as u64);
                    if r.gen::<f64>() < 0.4 {
                        r.gen::<f64>() * 1e-5
                    } else {
                        r.gen()
                    }
                });
                let cfg = ProcedureConfig {
                    mode,
                    ..ProcedureConfig::default()
                };
                let out = run_one_stage(&tree, &ps, &cfg).unwrap();
                for r in &out.results {
                    if r.auto_detected {
                        assert!(tree
                            .node(r.node)
                            .children
                            .iter()
                            .all(|&c| out.results[c].detected));
                    }
                    if r.driver {
                        assert!(r.detected);
                        assert!(tree.ancestors(r.node).all(|a| !out.results[a].detected));
                    }
                }
                // threshold monotonicity holds on every recorded level
                for lt in &out.trace.levels {
                    if lt.tested.is_empty() {
                        continue;
                    }
                    assert!(lt.d_star <= lt.tested.len());
                }
            }
        }
    }

    #[test]
    fn level1_detection_monotone_in_single_p() {
        use rand::Rng;
        let tree = TaxTree::build_complete(2, 5).unwrap();
        let rng = crate::stats::StreamRng::new(77, 0);
        let cfg = ProcedureConfig {
            mode: Mode::Unweighted,
            ..ProcedureConfig::default()
        };
        for rep in 0..30u64 {
            let base: Vec<f64> = tree
                .level_members(1)
                .iter()
                .map(|&n| {
                    let mut r = rng.substream(rep * 10_000 + n as u64);
                    if r.gen::<f64>() < 0.3 {
                        r.gen::<f64>() * 0.01
                    } else {
                        r.gen()
                    }
                })
                .collect();
            let leaves = tree.level_members(1).to_vec();
            let mk = |ps: &[f64]| {
                LeafPValues::from_pairs(
                    &tree,
                    &leaves
                        .iter()
                        .copied()
                        .zip(ps.iter().copied())
                        .collect::<Vec<_>>(),
                )
                .unwrap()
            };
            let out = run_one_stage(&tree, &mk(&base), &cfg).unwrap();
            let detected_leaves: Vec<bool> =
                leaves.iter().map(|&n| out.state.detected()[n]).collect();
            let pick = (rng.substream(rep).gen::<u64>() as usize) % leaves.len();
            let mut lowered = base.clone();
            lowered[pick] *= 0.1;
            let out2 = run_one_stage(&tree, &mk(&lowered), &cfg).unwrap();
            for (i, &was) in detected_leaves.iter().enumerate() {
                if was {
                    assert!(
                        out2.state.detected()[leaves[i]],
                        "lowering one p-value lost a level-1 detection"
                    );
                }
            }
        }
    }

    #[test]
    fn two_stage_runs_and_reports_disjoint_sets() {
        let tree = TaxTree::build_complete(2, 4).unwrap();
        use rand::Rng;
        let rng = crate::stats::StreamRng::new(123, 0);
        let ps = LeafPValues::from_fn(&tree, |n| {
            let mut r = rng.substream(n as u64);
            if n % 3 == 0 {
                r.gen::<f64>() * 1e-6
            } else {
                r.gen()
            }
        });
        let cfg = ProcedureConfig {
            two_stage: Some((0.05, 0.05)),
            ..ProcedureConfig::default()
        };
        let (s1, s2) = run_two_stage(&tree, &ps, &cfg).unwrap();
        let d1: Vec<NodeId> = s1
            .results
            .iter()
            .filter(|r| r.detected)
            .map(|r| r.node)
            .collect();
        let d2: Vec<NodeId> = s2
            .results
            .iter()
            .filter(|r| r.detected)
            .map(|r| r.node)
            .collect();
        assert!(!d1.is_empty());
        for n in &d2 {
            assert!(!d1.contains(n), "stage reports must be disjoint");
        }
        // stage 2 rows only cover the reduced tree
        assert!(s2.results.iter().all(|r| r.level >= 2));
    }

    #[test]
    fn two_stage_null_stage2_inputs_use_level1_cut() {
        // with all leaf p = 0.99 nothing is detected at stage 1; the stage-2
        // leaf-level p-values are the Stouffer aggregates of the survivors
        // adjusted at alpha_{1,1}
        let tree = TaxTree::build_complete(2, 3).unwrap();
        let ps = uniform_leaf_ps(&tree, 0.99);
        let cfg = ProcedureConfig {
            two_stage: Some((0.05, 0.05)),
            ..ProcedureConfig::default()
        };
        let (s1, s2) = run_two_stage(&tree, &ps, &cfg).unwrap();
        assert_eq!(s1.trace.levels[0].d_star, 0);
        let cut = s1.trace.levels[0].alpha_cut.unwrap();

        let adj = adjust_truncated(0.99, cut);
        let expect = crate::stats::stouffer_parent_p(&[adj, adj]);
        let lvl2 = &s2.trace.levels[0];
        assert_eq!(lvl2.level, 2);
        for &p in &lvl2.pvalues {
            assert!((p - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_stage_singleton_chain_joins_stage1_report() {
        // one class holds a single strong OTU: detecting the OTU at stage 1
        // pulls the whole singleton chain into the stage-1 report
        let rows = vec![
            edge("root", None, 4),
            edge("classA", Some("root"), 3),
            edge("classB", Some("root"), 3),
            edge("famA", Some("classA"), 2),
            edge("famB1", Some("classB"), 2),
            edge("famB2", Some("classB"), 2),
            edge("otu1", Some("famA"), 1),
            edge("b1", Some("famB1"), 1),
            edge("b2", Some("famB1"), 1),
            edge("b3", Some("famB2"), 1),
            edge("b4", Some("famB2"), 1),
        ];
        let tree = TaxTree::from_edges(&rows).unwrap();
        let ps = LeafPValues::from_pairs(
            &tree,
            &[
                (tree.find("otu1").unwrap(), 1e-12),
                (tree.find("b1").unwrap(), 0.6),
                (tree.find("b2").unwrap(), 0.7),
                (tree.find("b3").unwrap(), 0.8),
                (tree.find("b4").unwrap(), 0.9),
            ],
        )
        .unwrap();
        let cfg = ProcedureConfig {
            two_stage: Some((0.05, 0.05)),
            ..ProcedureConfig::default()
        };
        let (s1, _s2) = run_two_stage(&tree, &ps, &cfg).unwrap();
        assert!(s1.results[tree.find("otu1").unwrap()].detected);
        assert!(s1.results[tree.find("famA").unwrap()].detected);
        assert!(s1.results[tree.find("classA").unwrap()].detected);
        assert!(!s1.results[tree.find("root").unwrap()].detected);
    }

    #[test]
    fn config_validation() {
        let tree = TaxTree::build_complete(2, 3).unwrap();
        let ps = uniform_leaf_ps(&tree, 0.5);
        let bad_q = ProcedureConfig {
            q: 1.2,
            ..ProcedureConfig::default()
        };
        assert!(run_one_stage(&tree, &ps, &bad_q).is_err());
        let bad_split = ProcedureConfig {
            level_split: Some(vec![0.05, 0.05]),
            ..ProcedureConfig::default()
        };
        assert!(run_one_stage(&tree, &ps, &bad_split).is_err());
        let bad_sum = ProcedureConfig {
            level_split: Some(vec![0.05, 0.05, 0.05]),
            ..ProcedureConfig::default()
        };
        assert!(run_one_stage(&tree, &ps, &bad_sum).is_err());
        let ok_split = ProcedureConfig {
            level_split: Some(vec![0.05, 0.03, 0.02]),
            ..ProcedureConfig::default()
        };
        assert!(run_one_stage(&tree, &ps, &ok_split).is_ok());
        let unweighted_two_stage = ProcedureConfig {
            mode: Mode::Unweighted,
            two_stage: Some((0.05, 0.05)),
            ..ProcedureConfig::default()
        };
        assert!(run_two_stage(&tree, &ps, &unweighted_two_stage).is_err());
    }
}
