//! Monte-Carlo harness: scenario construction (tree shape x causal
//! pattern x effect model), driver selection, leaf p-value sampling, and
//! replicated evaluation of every method.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::baselines::{conjunction_method, naive_method, top_down_method};
use crate::bottomup::{run_one_stage, run_two_stage, Mode, ProcedureConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    error_rates, pinpoint_rate, replay_trace, weighted_jaccard, FarWeighting, TruthModel,
};
use crate::stats::{sample_beta_p, sample_gaussian_p, StreamRng};
use crate::tree::{LeafPValues, TaxTree};

/// Substream key reserved for driver selection; leaf draws use the node
/// index, which stays far below this.
const DRIVER_KEY: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub enum TreeKind {
    /// Complete binary tree, 10 levels (1023 nodes, 512 leaves).
    Binary,
    /// Complete 10-ary tree, 4 levels (1111 nodes, 1000 leaves).
    Bushy,
    /// A user-supplied tree.
    Custom { label: String, tree: Arc<TaxTree> },
}

impl TreeKind {
    pub fn label(&self) -> &str {
        match self {
            TreeKind::Binary => "binary",
            TreeKind::Bushy => "bushy",
            TreeKind::Custom { label, .. } => label,
        }
    }

    pub fn build(&self) -> Result<Arc<TaxTree>> {
        Ok(match self {
            TreeKind::Binary => Arc::new(TaxTree::build_complete(2, 10)?),
            TreeKind::Bushy => Arc::new(TaxTree::build_complete(10, 4)?),
            TreeKind::Custom { tree, .. } => tree.clone(),
        })
    }
}

/// Causal pattern: where the drivers sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Sparse drivers at the leaves.
    C1,
    /// Several drivers at an intermediate level (~10% of leaves associated).
    C2,
    /// One driver high in the tree.
    C3,
}

impl Pattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pattern::C1 => "C1",
            Pattern::C2 => "C2",
            Pattern::C3 => "C3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectModel {
    /// Beta(1/beta, 1) draws, heavy right tail.
    Beta,
    /// p = 1 - Phi(X), X ~ N(beta, 1).
    Gaussian,
}

impl EffectModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            EffectModel::Beta => "beta",
            EffectModel::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Unweighted,
    Weighted,
    LeastFavorable,
    TwoStage,
    Naive,
    TopDown,
    Conjunction,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Unweighted => "unweighted",
            Method::Weighted => "weighted",
            Method::LeastFavorable => "lf",
            Method::TwoStage => "two-stage",
            Method::Naive => "naive",
            Method::TopDown => "topdown",
            Method::Conjunction => "conjunction",
        }
    }

    pub const ALL: [Method; 7] = [
        Method::Unweighted,
        Method::Weighted,
        Method::LeastFavorable,
        Method::TwoStage,
        Method::Naive,
        Method::TopDown,
        Method::Conjunction,
    ];
}

#[derive(Debug, Clone)]
pub struct SimScenario {
    pub tree: TreeKind,
    pub pattern: Pattern,
    pub effect_model: EffectModel,
    pub effect_grid: Vec<f64>,
    pub q: f64,
    pub tau0: f64,
    pub reps: u32,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Hold one driver draw fixed across replicates instead of resampling.
    pub fix_drivers: bool,
    /// Override the pattern's default driver level.
    pub driver_level: Option<u32>,
    /// Override the pattern's default driver count.
    pub driver_count: Option<usize>,
    /// Name a specific driver node (custom trees).
    pub driver_node: Option<String>,
    /// (q1, q_rest) for the two-stage method; defaults to (q/2, q/2).
    pub two_stage: Option<(f64, f64)>,
    /// Per-family level for the top-down baseline; defaults to q.
    pub topdown_family_q: Option<f64>,
}

impl SimScenario {
    pub fn new(tree: TreeKind, pattern: Pattern, effect_model: EffectModel) -> SimScenario {
        SimScenario {
            tree,
            pattern,
            effect_model,
            effect_grid: match effect_model {
                EffectModel::Beta => vec![1.5, 2.0, 3.0, 4.0, 6.0],
                EffectModel::Gaussian => vec![1.0, 2.0, 3.0, 4.0],
            },
            q: 0.10,
            tau0: 0.3,
            reps: 1000,
            seed: 0,
            methods: Method::ALL.to_vec(),
            fix_drivers: false,
            driver_level: None,
            driver_count: None,
            driver_node: None,
            two_stage: None,
            topdown_family_q: None,
        }
    }

    fn label(&self, beta: f64) -> String {
        format!(
            "{}-{}-{}{}",
            self.tree.label(),
            self.pattern.as_str(),
            self.effect_model.as_str(),
            beta
        )
    }

    /// Default (level, count) of the driver draw for this tree and pattern.
    fn driver_spec(&self) -> (u32, usize) {
        let defaults = match (&self.tree, self.pattern) {
            (TreeKind::Binary, Pattern::C1) => (1, 10),
            (TreeKind::Binary, Pattern::C2) => (4, 10),
            (TreeKind::Binary, Pattern::C3) => (7, 1),
            (TreeKind::Bushy, Pattern::C1) => (1, 20),
            (TreeKind::Bushy, Pattern::C2) => (2, 10),
            (TreeKind::Bushy, Pattern::C3) => (3, 1),
            (TreeKind::Custom { .. }, Pattern::C1) => (1, 36),
            (TreeKind::Custom { .. }, Pattern::C2) => (4, 5),
            (TreeKind::Custom { .. }, Pattern::C3) => (6, 1),
        };
        (
            self.driver_level.unwrap_or(defaults.0),
            self.driver_count.unwrap_or(defaults.1),
        )
    }
}

/// Draw `count` distinct drivers uniformly from the nodes at `level`.
pub fn select_drivers(
    tree: &TaxTree,
    level: u32,
    count: usize,
    rng: &mut impl Rng,
) -> Result<TruthModel> {
    if level < 1 || level > tree.levels() {
        return Err(Error::invalid(format!(
            "driver level {level} outside 1..={}",
            tree.levels()
        )));
    }
    let members = tree.level_members(level);
    if count == 0 || count > members.len() {
        return Err(Error::invalid(format!(
            "requested {count} drivers from {} nodes at level {level}",
            members.len()
        )));
    }
    let picked = rand::seq::index::sample(rng, members.len(), count);
    let drivers = picked.iter().map(|i| members[i]).collect();
    TruthModel::new(tree, drivers)
}

/// Associated leaves draw from the effect model, every other leaf is
/// Uniform(0,1); each leaf uses its own keyed substream.
pub fn sample_leaf_ps(
    tree: &TaxTree,
    truth: &TruthModel,
    model: EffectModel,
    beta: f64,
    rng: &StreamRng,
) -> LeafPValues {
    LeafPValues::from_fn(tree, |leaf| {
        let mut r = rng.substream(leaf as u64);
        if truth.is_associated_leaf(leaf) {
            match model {
                EffectModel::Beta => sample_beta_p(beta, &mut r),
                EffectModel::Gaussian => sample_gaussian_p(beta, &mut r),
            }
        } else {
            r.gen()
        }
    })
}

/// One aggregated metric: mean and Monte-Carlo standard error over the
/// replicates.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub scenario: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub mc_se: f64,
    pub reps: u32,
}

fn truth_for_rep(tree: &TaxTree, scenario: &SimScenario, rep: u64) -> Result<TruthModel> {
    if let Some(name) = &scenario.driver_node {
        let node = tree
            .find(name)
            .ok_or_else(|| Error::invalid(format!("driver node `{name}` not in tree")))?;
        return TruthModel::new(tree, vec![node]);
    }
    let (level, count) = scenario.driver_spec();
    let stream = if scenario.fix_drivers { 0 } else { rep };
    let mut rng = StreamRng::new(scenario.seed, stream).substream(DRIVER_KEY);
    select_drivers(tree, level, count, &mut rng)
}

fn eval_rep(
    tree: &TaxTree,
    scenario: &SimScenario,
    beta: f64,
    rep: u64,
) -> Result<Vec<(Method, &'static str, f64)>> {
    let truth = truth_for_rep(tree, scenario, rep)?;
    let rng = StreamRng::new(scenario.seed, rep);
    let leaf_ps = sample_leaf_ps(tree, &truth, scenario.effect_model, beta, &rng);
    let true_set = truth.associated_nodes(tree);

    let mut out = Vec::new();
    for &method in &scenario.methods {
        match method {
            Method::Unweighted | Method::Weighted | Method::LeastFavorable => {
                let mode = match method {
                    Method::Unweighted => Mode::Unweighted,
                    Method::Weighted => Mode::Weighted,
                    _ => Mode::LeastFavorable,
                };
                let cfg = ProcedureConfig {
                    q: scenario.q,
                    tau0: scenario.tau0,
                    mode,
                    level_split: None,
                    two_stage: None,
                    combiner: Default::default(),
                };
                let run = run_one_stage(tree, &leaf_ps, &cfg)?;
                let report = run.detected_flags();
                let weighting = if mode == Mode::Unweighted {
                    FarWeighting::Unit
                } else {
                    FarWeighting::ByWeight
                };
                let rates = error_rates(tree, &truth, &run.trace, &report, weighting);
                out.push((method, "far", rates.far));
                out.push((method, "fdr", rates.fdr));
                out.push((method, "fdrc", rates.fdrc));
                out.push((
                    method,
                    "jaccard",
                    weighted_jaccard(tree, &report, &true_set),
                ));
                out.push((method, "pinpoint", pinpoint_rate(tree, &report, &truth)));
            }
            Method::TwoStage => {
                let (q1, q_rest) = scenario
                    .two_stage
                    .unwrap_or((scenario.q / 2.0, scenario.q / 2.0));
                let cfg = ProcedureConfig {
                    q: scenario.q,
                    tau0: scenario.tau0,
                    mode: Mode::Weighted,
                    level_split: None,
                    two_stage: Some((q1, q_rest)),
                    combiner: Default::default(),
                };
                let (s1, s2) = run_two_stage(tree, &leaf_ps, &cfg)?;
                let d1: Vec<bool> = s1.results.iter().map(|r| r.detected).collect();
                let far_otu = error_rates(tree, &truth, &s1.trace, &d1, FarWeighting::ByWeight).far;
                let mut d2 = vec![false; tree.num_nodes()];
                for r in &s2.results {
                    d2[r.node] = r.detected;
                }
                let far_taxa =
                    error_rates(tree, &truth, &s2.trace, &d2, FarWeighting::ByWeight).far;
                out.push((method, "far_otu", far_otu));
                out.push((method, "far_taxa", far_taxa));
            }
            Method::Naive | Method::TopDown | Method::Conjunction => {
                let rep = match method {
                    Method::Naive => naive_method(tree, &leaf_ps, scenario.q),
                    Method::TopDown => top_down_method(
                        tree,
                        &leaf_ps,
                        scenario.topdown_family_q.unwrap_or(scenario.q),
                    ),
                    _ => conjunction_method(tree, &leaf_ps, scenario.q),
                };
                let trace = replay_trace(tree, &rep.node_ps, &rep.detected);
                let rates =
                    error_rates(tree, &truth, &trace, &rep.detected, FarWeighting::ByWeight);
                out.push((method, "far", rates.far));
                out.push((method, "fdr", rates.fdr));
                out.push((method, "fdrc", rates.fdrc));
                out.push((
                    method,
                    "jaccard",
                    weighted_jaccard(tree, &rep.detected, &true_set),
                ));
                out.push((
                    method,
                    "pinpoint",
                    pinpoint_rate(tree, &rep.detected, &truth),
                ));
            }
        }
    }
    Ok(out)
}

/// Run every replicate of every grid point and aggregate the metrics.
/// Replicates evaluate in parallel; aggregation is ordered by replicate
/// index, so identical scenarios give identical tables.
pub fn run_scenario(scenario: &SimScenario) -> Result<Vec<MetricRow>> {
    if scenario.reps < 1 {
        return Err(Error::invalid("reps must be >= 1"));
    }
    if scenario.methods.is_empty() {
        return Err(Error::invalid("no methods selected"));
    }
    if scenario.effect_grid.is_empty() {
        return Err(Error::invalid("empty effect grid"));
    }
    if scenario.effect_model == EffectModel::Beta && scenario.effect_grid.iter().any(|&b| b < 1.0) {
        return Err(Error::invalid("beta model needs effect sizes >= 1"));
    }
    let tree = scenario.tree.build()?;

    let mut rows = Vec::new();
    for &beta in &scenario.effect_grid {
        let per_rep: Vec<Vec<(Method, &'static str, f64)>> = (0..scenario.reps as u64)
            .into_par_iter()
            .map(|rep| {
                eval_rep(&tree, scenario, beta, rep).map_err(|e| {
                    Error::invalid(format!("replicate {rep} (seed {}): {e}", scenario.seed))
                })
            })
            .collect::<Result<Vec<_>>>()?;

        // aggregate in (method, metric) order of first appearance
        let mut keys: Vec<(Method, &'static str)> = Vec::new();
        for row in &per_rep[0] {
            keys.push((row.0, row.1));
        }
        for (method, metric) in keys {
            let values: Vec<f64> = per_rep
                .iter()
                .map(|rep_rows| {
                    rep_rows
                        .iter()
                        .find(|r| r.0 == method && r.1 == metric)
                        .expect("every replicate records every metric")
                        .2
                })
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let mc_se = if values.len() > 1 {
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            rows.push(MetricRow {
                scenario: scenario.label(beta),
                method: method.as_str().to_string(),
                metric: metric.to_string(),
                value: mean,
                mc_se,
                reps: scenario.reps,
            });
        }
    }
    Ok(rows)
}
