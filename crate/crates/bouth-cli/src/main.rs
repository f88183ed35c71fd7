//! `bouth`: bottom-up tree hypothesis testing on the command line.
//!
//! `bouth test` runs one procedure over a taxonomy table of leaf p-values;
//! `bouth simulate` runs the Monte-Carlo benchmark scenarios. Every run
//! writes a JSON manifest (command line, config, input digests, timestamps)
//! next to its output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use bouth::bottomup::{run_one_stage, run_two_stage, Mode, ProcedureConfig};
use bouth::io as bio;
use bouth::sim::{EffectModel, Method, Pattern, SimScenario, TreeKind};

const EXIT_VALIDATION: i32 = 2;
const EXIT_INTERNAL: i32 = 1;

#[derive(Parser)]
#[command(name = "bouth", version, about = "Bottom-up tree hypothesis testing")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TestMethod {
    Weighted,
    Unweighted,
    Lf,
    TwoStage,
    Naive,
    Topdown,
    Conjunction,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "UPPER")]
enum PatternArg {
    C1,
    C2,
    C3,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Beta,
    Gaussian,
}

#[derive(Subcommand)]
enum Commands {
    /// Test one tree of leaf p-values and write the per-node results.
    Test {
        /// Taxonomy table: leaf_id <TAB> lineage <TAB> p_value.
        #[arg(long)]
        input: PathBuf,
        /// Overall FAR target (FDR target for the baseline methods).
        #[arg(long, default_value_t = 0.10)]
        q: f64,
        /// Threshold cap.
        #[arg(long, default_value_t = 0.3)]
        tau0: f64,
        #[arg(long, value_enum, default_value = "weighted")]
        method: TestMethod,
        /// Stage-1 (leaf level) FAR budget for --method two-stage.
        #[arg(long)]
        q1: Option<f64>,
        /// Combined budget of the remaining levels for --method two-stage.
        #[arg(long)]
        q_rest: Option<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run simulation scenarios and write the aggregated metrics table.
    Simulate {
        /// `binary`, `bushy`, or a path to an edge-list tree file.
        #[arg(long)]
        tree: String,
        #[arg(long, value_enum)]
        pattern: PatternArg,
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Comma-separated effect sizes.
        #[arg(long)]
        beta: String,
        #[arg(long, default_value_t = 0.10)]
        q: f64,
        #[arg(long, default_value_t = 0.3)]
        tau0: f64,
        #[arg(long, default_value_t = 1000)]
        reps: u32,
        /// Base seed; the BOUTH_SEED environment variable overrides it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `all` or a comma-separated subset of
        /// unweighted,weighted,lf,two-stage,naive,topdown,conjunction.
        #[arg(long, default_value = "all")]
        methods: String,
        #[arg(long)]
        output: PathBuf,
        /// Bound worker parallelism.
        #[arg(long)]
        threads: Option<usize>,
        /// Keep one driver draw fixed across replicates.
        #[arg(long, default_value_t = false)]
        fix_drivers: bool,
        /// Override the pattern's driver level.
        #[arg(long)]
        driver_level: Option<u32>,
        /// Override the pattern's driver count.
        #[arg(long)]
        driver_count: Option<usize>,
        /// Name one driver node (custom trees).
        #[arg(long)]
        driver_node: Option<String>,
        #[arg(long)]
        q1: Option<f64>,
        #[arg(long)]
        q_rest: Option<f64>,
        /// Per-family level of the top-down baseline (defaults to --q).
        #[arg(long)]
        topdown_family_q: Option<f64>,
    },
}

enum CliError {
    Validation(String),
    Internal(String),
}

impl From<bouth::Error> for CliError {
    fn from(e: bouth::Error) -> CliError {
        match e {
            bouth::Error::Io(e) => CliError::Internal(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            EXIT_VALIDATION
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            EXIT_INTERNAL
        }
    };
    std::process::exit(code);
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f =
        File::open(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let hash = Sha256::digest(&bytes);
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest(
    output: &Path,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: &[&Path],
    started: u128,
) -> Result<(), CliError> {
    let mut digests = serde_json::Map::new();
    for path in inputs {
        digests.insert(
            path.display().to_string(),
            serde_json::Value::String(format!("sha256:{}", sha256_file(path)?)),
        );
    }
    let manifest = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command_line": std::env::args().collect::<Vec<_>>().join(" "),
        "seed": seed,
        "config": config,
        "input_digests": digests,
        "started_unix_ms": started,
        "finished_unix_ms": now_ms(),
    });
    let path = manifest_path(output);
    let f = File::create(&path).map_err(|e| CliError::Internal(e.to_string()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(())
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Commands::Test {
            input,
            q,
            tau0,
            method,
            q1,
            q_rest,
            output,
        } => cmd_test(input, q, tau0, method, q1, q_rest, output),
        Commands::Simulate {
            tree,
            pattern,
            model,
            beta,
            q,
            tau0,
            reps,
            seed,
            methods,
            output,
            threads,
            fix_drivers,
            driver_level,
            driver_count,
            driver_node,
            q1,
            q_rest,
            topdown_family_q,
        } => cmd_simulate(SimulateArgs {
            tree,
            pattern,
            model,
            beta,
            q,
            tau0,
            reps,
            seed,
            methods,
            output,
            threads,
            fix_drivers,
            driver_level,
            driver_count,
            driver_node,
            q1,
            q_rest,
            topdown_family_q,
        }),
    }
}

fn check_unit_interval(name: &str, value: f64) -> Result<(), CliError> {
    if !(value > 0.0 && value < 1.0) {
        return Err(CliError::Validation(format!(
            "{name}={value} must lie in (0,1)"
        )));
    }
    Ok(())
}

fn cmd_test(
    input: PathBuf,
    q: f64,
    tau0: f64,
    method: TestMethod,
    q1: Option<f64>,
    q_rest: Option<f64>,
    output: PathBuf,
) -> Result<(), CliError> {
    let started = now_ms();
    check_unit_interval("q", q)?;
    check_unit_interval("tau0", tau0)?;

    let file = File::open(&input)
        .map_err(|e| CliError::Validation(format!("{}: {e}", input.display())))?;
    let (tree, leaf_ps) = bio::load_taxonomy(BufReader::new(file))?;

    let method_name = match method {
        TestMethod::Weighted => "weighted",
        TestMethod::Unweighted => "unweighted",
        TestMethod::Lf => "lf",
        TestMethod::TwoStage => "two-stage",
        TestMethod::Naive => "naive",
        TestMethod::Topdown => "topdown",
        TestMethod::Conjunction => "conjunction",
    };
    let out_file = File::create(&output).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut w = BufWriter::new(out_file);

    match method {
        TestMethod::Weighted | TestMethod::Unweighted | TestMethod::Lf => {
            let mode = match method {
                TestMethod::Weighted => Mode::Weighted,
                TestMethod::Unweighted => Mode::Unweighted,
                _ => Mode::LeastFavorable,
            };
            let cfg = ProcedureConfig {
                q,
                tau0,
                mode,
                level_split: None,
                two_stage: None,
                combiner: Default::default(),
            };
            let out = run_one_stage(&tree, &leaf_ps, &cfg)?;
            bio::write_results(&mut w, &tree, &out.results)?;
        }
        TestMethod::TwoStage => {
            let q1 = q1.ok_or_else(|| {
                CliError::Validation("--method two-stage requires --q1".to_string())
            })?;
            let q_rest = q_rest.ok_or_else(|| {
                CliError::Validation("--method two-stage requires --q-rest".to_string())
            })?;
            let cfg = ProcedureConfig {
                q,
                tau0,
                mode: Mode::Weighted,
                level_split: None,
                two_stage: Some((q1, q_rest)),
                combiner: Default::default(),
            };
            let (s1, s2) = run_two_stage(&tree, &leaf_ps, &cfg)?;
            bio::write_results_staged(&mut w, &tree, &s1.results, &s2.results)?;
        }
        TestMethod::Naive | TestMethod::Topdown | TestMethod::Conjunction => {
            let report = match method {
                TestMethod::Naive => bouth::naive_method(&tree, &leaf_ps, q),
                TestMethod::Topdown => bouth::top_down_method(&tree, &leaf_ps, q),
                _ => bouth::conjunction_method(&tree, &leaf_ps, q),
            };
            bio::write_baseline_report(&mut w, &tree, &report)?;
        }
    }

    let config = serde_json::json!({
        "command": "test",
        "q": q,
        "tau0": tau0,
        "method": method_name,
        "q1": q1,
        "q_rest": q_rest,
        "nodes": tree.num_nodes(),
        "leaves": tree.num_leaves(),
        "levels": tree.levels(),
    });
    write_manifest(&output, None, config, &[&input], started)
}

struct SimulateArgs {
    tree: String,
    pattern: PatternArg,
    model: ModelArg,
    beta: String,
    q: f64,
    tau0: f64,
    reps: u32,
    seed: u64,
    methods: String,
    output: PathBuf,
    threads: Option<usize>,
    fix_drivers: bool,
    driver_level: Option<u32>,
    driver_count: Option<usize>,
    driver_node: Option<String>,
    q1: Option<f64>,
    q_rest: Option<f64>,
    topdown_family_q: Option<f64>,
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, CliError> {
    if spec == "all" {
        return Ok(Method::ALL.to_vec());
    }
    spec.split(',')
        .map(|name| match name.trim() {
            "unweighted" => Ok(Method::Unweighted),
            "weighted" => Ok(Method::Weighted),
            "lf" => Ok(Method::LeastFavorable),
            "two-stage" => Ok(Method::TwoStage),
            "naive" => Ok(Method::Naive),
            "topdown" => Ok(Method::TopDown),
            "conjunction" => Ok(Method::Conjunction),
            other => Err(CliError::Validation(format!("unknown method `{other}`"))),
        })
        .collect()
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let started = now_ms();
    check_unit_interval("q", args.q)?;
    check_unit_interval("tau0", args.tau0)?;
    if args.reps < 1 {
        return Err(CliError::Validation("--reps must be >= 1".to_string()));
    }

    if let Some(n) = args.threads {
        // ignore the error when a global pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }

    let mut input_paths: Vec<PathBuf> = Vec::new();
    let tree_kind = match args.tree.as_str() {
        "binary" => TreeKind::Binary,
        "bushy" => TreeKind::Bushy,
        path => {
            let path = PathBuf::from(path);
            let file = File::open(&path)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            let tree = bio::read_edge_list(BufReader::new(file))?;
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "custom".to_string());
            input_paths.push(path);
            TreeKind::Custom {
                label,
                tree: Arc::new(tree),
            }
        }
    };

    let pattern = match args.pattern {
        PatternArg::C1 => Pattern::C1,
        PatternArg::C2 => Pattern::C2,
        PatternArg::C3 => Pattern::C3,
    };
    let model = match args.model {
        ModelArg::Beta => EffectModel::Beta,
        ModelArg::Gaussian => EffectModel::Gaussian,
    };
    let effect_grid: Vec<f64> = args
        .beta
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Validation(format!("bad effect size `{tok}`")))
        })
        .collect::<Result<_, _>>()?;

    let seed = match std::env::var("BOUTH_SEED") {
        Ok(v) => v.parse::<u64>().map_err(|_| {
            CliError::Validation(format!("BOUTH_SEED=`{v}` is not a 64-bit integer"))
        })?,
        Err(_) => args.seed,
    };

    let methods = parse_methods(&args.methods)?;
    let two_stage = match (args.q1, args.q_rest) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => {
            return Err(CliError::Validation(
                "--q1 and --q-rest must be given together".to_string(),
            ))
        }
    };

    let mut scenario = SimScenario::new(tree_kind, pattern, model);
    scenario.effect_grid = effect_grid;
    scenario.q = args.q;
    scenario.tau0 = args.tau0;
    scenario.reps = args.reps;
    scenario.seed = seed;
    scenario.methods = methods;
    scenario.fix_drivers = args.fix_drivers;
    scenario.driver_level = args.driver_level;
    scenario.driver_count = args.driver_count;
    scenario.driver_node = args.driver_node.clone();
    scenario.two_stage = two_stage;
    scenario.topdown_family_q = args.topdown_family_q;

    let rows = bouth::run_scenario(&scenario)?;
    let out_file = File::create(&args.output).map_err(|e| CliError::Internal(e.to_string()))?;
    bio::write_metrics(BufWriter::new(out_file), &rows)?;

    let config = serde_json::json!({
        "command": "simulate",
        "tree": args.tree,
        "pattern": pattern.as_str(),
        "model": model.as_str(),
        "beta": scenario.effect_grid,
        "q": args.q,
        "tau0": args.tau0,
        "reps": args.reps,
        "methods": scenario.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "fix_drivers": args.fix_drivers,
        "driver_level": args.driver_level,
        "driver_count": args.driver_count,
        "driver_node": args.driver_node,
        "q1": args.q1,
        "q_rest": args.q_rest,
        "topdown_family_q": args.topdown_family_q,
        "threads": args.threads,
    });
    let inputs: Vec<&Path> = input_paths.iter().map(|p| p.as_path()).collect();
    write_manifest(&args.output, Some(seed), config, &inputs, started)
}
