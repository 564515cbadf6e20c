//! Command-line driver: reproducible simulation, analysis, Monte Carlo
//! batches, and the trace-vs-matrix oracle.
//!
//! Every subcommand is a pure function of its flags and input files; output
//! files carry a header block with the full configuration (including a hash
//! of the graph) and repeated invocations produce byte-identical bytes.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 oracle
//! failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ratiocast::ergodicity::{self, WdConfig};
use ratiocast::graph::GraphSpec;
use ratiocast::markov;
use ratiocast::mc;
use ratiocast::numfmt;
use ratiocast::protocol::{mu_for_node, GatingPolicy, InitialConditions};
use ratiocast::sim::{self, Mode, RunConfig};

#[derive(Parser)]
#[command(
    name = "ratiocast",
    version,
    about = "Robust ratio consensus over lossy broadcast networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded simulation and write trace, mask, and summary files.
    Simulate(SimulateArgs),
    /// Derive ergodicity constants and contraction traces for a realization.
    Analyze(AnalyzeArgs),
    /// Aggregate many seeded runs and tally the geometric-bound exceedances.
    Montecarlo(MontecarloArgs),
    /// Replay a run through the matrix iteration and report the deviation.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Graph document: JSON {"m": .., "edges": [{"from": .., "to": .., "q": ..}]}
    #[arg(long)]
    graph: PathBuf,
    /// Override the reliability of every non-self-loop edge.
    #[arg(long)]
    q: Option<f64>,
    /// Rounds to execute.
    #[arg(long)]
    steps: usize,
    /// Base seed for the run's random stream.
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct InitArgs {
    /// Initial y values, comma-separated (e.g. 5,0,0,0,0).
    #[arg(long)]
    y0: Option<String>,
    /// Initial y values, one per line.
    #[arg(long)]
    y0_file: Option<PathBuf>,
    /// Initial z values, comma-separated; defaults to all ones.
    #[arg(long)]
    z0: Option<String>,
    /// Initial z values, one per line.
    #[arg(long)]
    z0_file: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum GatingArg {
    /// Update the estimate whenever z is positive.
    Positive,
    /// Update the estimate when z clears the derived threshold.
    Threshold,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Robust,
    Ideal,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    init: InitArgs,
    #[arg(long, value_enum, default_value_t = GatingArg::Positive)]
    gating: GatingArg,
    /// Explicit lower bound on sum(z0) for threshold gating, for nodes that
    /// cannot self-derive one (z0 = 0).
    #[arg(long)]
    mu_z: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Robust)]
    mode: ModeArg,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Blocks sampled for the scrambling statistics.
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    /// Initial z values used for the per-node thresholds; defaults to ones.
    #[arg(long)]
    z0: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MontecarloArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    init: InitArgs,
    /// Number of runs; run r consumes stream r of the base seed.
    #[arg(long)]
    runs: usize,
    #[arg(long, value_enum, default_value_t = GatingArg::Positive)]
    gating: GatingArg,
    #[arg(long)]
    mu_z: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Robust)]
    mode: ModeArg,
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    init: InitArgs,
    /// Largest tolerated deviation between trace and matrix iteration.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

enum CliError {
    Validation(String),
    Io(String),
    Oracle(String),
}

impl CliError {
    fn report(self) -> ExitCode {
        let (code, label, msg) = match self {
            CliError::Validation(m) => (1, "validation", m),
            CliError::Io(m) => (2, "i/o", m),
            CliError::Oracle(m) => (3, "oracle", m),
        };
        eprintln!("error ({label}): {msg}");
        ExitCode::from(code)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Analyze(args) => analyze(args),
        Command::Montecarlo(args) => montecarlo(args),
        Command::Oracle(args) => oracle(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn load_graph(common: &CommonArgs) -> Result<GraphSpec, CliError> {
    let text = fs::read_to_string(&common.graph)
        .map_err(|e| CliError::Io(format!("--graph {}: {e}", common.graph.display())))?;
    let g = GraphSpec::from_json(&text)
        .map_err(|e| CliError::Validation(format!("--graph {}: {e}", common.graph.display())))?;
    match common.q {
        Some(q) => g
            .with_uniform_q(q)
            .map_err(|e| CliError::Validation(format!("--q {q}: {e}"))),
        None => Ok(g),
    }
}

fn parse_inline(flag: &str, text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Validation(format!("{flag} entry {v:?}: {e}")))
        })
        .collect()
}

fn parse_file(flag: &str, path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{flag} {}: {e}", path.display())))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| CliError::Validation(format!("{flag} entry {v:?}: {e}")))
        })
        .collect()
}

/// Resolves an inline/file vector flag pair; checks the length against `m`.
fn resolve_vector(
    flag: &str,
    inline: &Option<String>,
    file: &Option<PathBuf>,
    m: usize,
    default: Option<f64>,
) -> Result<Vec<f64>, CliError> {
    let values = match (inline, file) {
        (Some(_), Some(_)) => {
            return Err(CliError::Validation(format!(
                "{flag} and {flag}-file are mutually exclusive"
            )))
        }
        (Some(text), None) => parse_inline(flag, text)?,
        (None, Some(path)) => parse_file(&format!("{flag}-file"), path)?,
        (None, None) => match default {
            Some(v) => vec![v; m],
            None => {
                return Err(CliError::Validation(format!(
                    "{flag} (or {flag}-file) is required"
                )))
            }
        },
    };
    if values.len() != m {
        return Err(CliError::Validation(format!(
            "{flag} has {} entries for {} nodes",
            values.len(),
            m
        )));
    }
    Ok(values)
}

fn resolve_init(init: &InitArgs, m: usize) -> Result<InitialConditions, CliError> {
    let y0 = resolve_vector("--y0", &init.y0, &init.y0_file, m, None)?;
    let z0 = resolve_vector("--z0", &init.z0, &init.z0_file, m, Some(1.0))?;
    InitialConditions::new(y0, z0).map_err(|e| CliError::Validation(e.to_string()))
}

/// Per-node thresholds `z0[i] c^block_len / n`, or the uniform `mu_z`-based
/// value when supplied.
fn threshold_vector(g: &GraphSpec, z0: &[f64], mu_z: Option<f64>) -> Result<Vec<f64>, CliError> {
    let c = ergodicity::derive_c(g);
    let block_len = ergodicity::scrambling_block_len(g);
    let n = (g.node_count() + g.non_self_edges().len()) as f64;
    match mu_z {
        Some(mu_z) => {
            if !(mu_z > 0.0) {
                return Err(CliError::Validation(format!(
                    "--mu-z {mu_z}: must be positive"
                )));
            }
            Ok(vec![mu_z * c.powi(block_len as i32) / n; g.node_count()])
        }
        None => (0..g.node_count())
            .map(|i| {
                mu_for_node(g, z0, i, c, block_len)
                    .map_err(|e| CliError::Validation(format!("{e} (pass --mu-z to override)")))
            })
            .collect(),
    }
}

fn gating_policy(
    gating: GatingArg,
    g: &GraphSpec,
    z0: &[f64],
    mu_z: Option<f64>,
) -> Result<GatingPolicy, CliError> {
    match gating {
        GatingArg::Positive => Ok(GatingPolicy::Positive),
        GatingArg::Threshold => Ok(GatingPolicy::Threshold {
            mu: threshold_vector(g, z0, mu_z)?,
        }),
    }
}

fn mode_of(mode: ModeArg) -> Mode {
    match mode {
        ModeArg::Robust => Mode::Robust,
        ModeArg::Ideal => Mode::Ideal,
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("--out {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn header(subcommand: &str, common: &CommonArgs, g: &GraphSpec, extra: &[String]) -> Vec<String> {
    let mut lines = vec![
        format!("ratiocast {} {subcommand}", env!("CARGO_PKG_VERSION")),
        format!("graph = {}", common.graph.display()),
        format!("graph_sha256 = {}", g.sha256_hex()),
        format!(
            "q_override = {}",
            common.q.map(numfmt::full).unwrap_or_else(|| "none".into())
        ),
        format!("steps = {}", common.steps),
        format!("seed = {}", common.seed),
    ];
    lines.extend_from_slice(extra);
    lines
}

fn gating_label(gating: GatingArg) -> &'static str {
    match gating {
        GatingArg::Positive => "positive",
        GatingArg::Threshold => "threshold",
    }
}

fn mode_label(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::Robust => "robust",
        ModeArg::Ideal => "ideal",
    }
}

fn vector_line(name: &str, values: &[f64]) -> String {
    let joined: Vec<String> = values.iter().map(|&v| numfmt::full(v)).collect();
    format!("{name} = {}", joined.join(","))
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let g = load_graph(&args.common)?;
    let init = resolve_init(&args.init, g.node_count())?;
    let gating = gating_policy(args.gating, &g, &init.z0, args.mu_z)?;
    let cfg = RunConfig {
        graph: g.clone(),
        init: init.clone(),
        steps: args.common.steps,
        seed: args.common.seed,
        gating,
        mode: mode_of(args.mode),
    };
    let trace = sim::run(&cfg).map_err(|e| CliError::Validation(e.to_string()))?;

    let extra = vec![
        vector_line("y0", &init.y0),
        vector_line("z0", &init.z0),
        format!("gating = {}", gating_label(args.gating)),
        format!("mode = {}", mode_label(args.mode)),
    ];
    let head = header("simulate", &args.common, &g, &extra);
    write_file(&args.out, "trace.csv", &sim::trace_csv(&trace, &g, &head))?;
    write_file(&args.out, "masks.csv", &sim::masks_csv(&trace, &g, &head))?;

    let target = init.target();
    let mut summary = String::new();
    for line in &head {
        let _ = writeln!(summary, "# {line}");
    }
    let _ = writeln!(summary, "target = {}", numfmt::full(target));
    let _ = writeln!(summary, "final_round = {}", trace.steps());
    let mut worst: Option<f64> = Some(0.0);
    for (i, est) in trace.final_estimates().iter().enumerate() {
        match est {
            Some(v) => {
                let err = (v - target).abs();
                worst = worst.map(|w| w.max(err));
                let _ = writeln!(
                    summary,
                    "node {}: estimate = {} error = {} updates = {}",
                    i + 1,
                    numfmt::full(*v),
                    numfmt::full(err),
                    trace.update_times[i].len()
                );
            }
            None => {
                worst = None;
                let _ = writeln!(summary, "node {}: estimate = undefined updates = 0", i + 1);
            }
        }
    }
    match worst {
        Some(w) => {
            let _ = writeln!(summary, "max_final_error = {}", numfmt::full(w));
        }
        None => {
            let _ = writeln!(summary, "max_final_error = undefined (a node never gated)");
        }
    }
    let (ey, ez) = sim::max_conservation_error(&trace);
    let _ = writeln!(summary, "conservation_error_y = {}", numfmt::full(ey));
    let _ = writeln!(summary, "conservation_error_z = {}", numfmt::full(ez));
    write_file(&args.out, "summary.txt", &summary)
}

fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let g = load_graph(&args.common)?;
    if args.samples == 0 {
        return Err(CliError::Validation("--samples must be at least 1".into()));
    }
    if args.common.steps == 0 {
        return Err(CliError::Validation("--steps must be at least 1".into()));
    }
    let z0 = resolve_vector("--z0", &args.z0, &None, g.node_count(), Some(1.0))?;
    let report = ergodicity::analyze(
        &g,
        args.common.seed,
        args.common.steps,
        WdConfig::Sample {
            samples: args.samples,
        },
    )
    .map_err(|e| CliError::Validation(e.to_string()))?;
    if report.insufficient {
        eprintln!(
            "warning: no scrambling block observed in {} samples; bounds left undefined",
            args.samples
        );
    }

    let mu: Vec<Option<f64>> = (0..g.node_count())
        .map(|i| mu_for_node(&g, &z0, i, report.c, report.block_len).ok())
        .collect();
    let extra = vec![
        format!("samples = {}", args.samples),
        vector_line("z0", &z0),
    ];
    let head = header("analyze", &args.common, &g, &extra);
    write_file(
        &args.out,
        "report.txt",
        &ergodicity::report_document(&report, &g, &mu, &head),
    )?;
    write_file(
        &args.out,
        "delta_trace.csv",
        &ergodicity::delta_trace_csv(&report, &head),
    )?;
    write_file(
        &args.out,
        "lambda_trace.csv",
        &ergodicity::lambda_trace_csv(&report, &head),
    )
}

fn montecarlo(args: MontecarloArgs) -> Result<(), CliError> {
    let g = load_graph(&args.common)?;
    if args.samples == 0 {
        return Err(CliError::Validation("--samples must be at least 1".into()));
    }
    let init = resolve_init(&args.init, g.node_count())?;
    let gating = gating_policy(args.gating, &g, &init.z0, args.mu_z)?;
    let cfg = mc::McConfig {
        graph: g.clone(),
        init,
        steps: args.common.steps,
        seed: args.common.seed,
        runs: args.runs,
        gating,
        mode: mode_of(args.mode),
        wd: WdConfig::Sample {
            samples: args.samples,
        },
    };
    let summary = mc::monte_carlo(&cfg).map_err(|e| CliError::Validation(e.to_string()))?;

    let extra = vec![
        format!("runs = {}", args.runs),
        format!("samples = {}", args.samples),
        vector_line("y0", &cfg.init.y0),
        vector_line("z0", &cfg.init.z0),
        format!("gating = {}", gating_label(args.gating)),
        format!("mode = {}", mode_label(args.mode)),
    ];
    let head = header("montecarlo", &args.common, &g, &extra);
    write_file(
        &args.out,
        "summary.txt",
        &mc::summary_document(&summary, &head),
    )?;
    write_file(
        &args.out,
        "certification.csv",
        &mc::certification_csv(&summary, &head),
    )
}

fn oracle(args: OracleArgs) -> Result<(), CliError> {
    let g = load_graph(&args.common)?;
    if !(args.tol >= 0.0) {
        return Err(CliError::Validation(format!(
            "--tol {}: must be non-negative",
            args.tol
        )));
    }
    let init = resolve_init(&args.init, g.node_count())?;
    let cfg = RunConfig {
        graph: g.clone(),
        init,
        steps: args.common.steps,
        seed: args.common.seed,
        gating: GatingPolicy::Positive,
        mode: Mode::Robust,
    };
    let trace = sim::run(&cfg).map_err(|e| CliError::Validation(e.to_string()))?;
    let report = markov::oracle_check(&trace, &g, args.tol)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    println!("max_deviation = {}", numfmt::full(report.max_deviation));
    match report.first_violation {
        None => Ok(()),
        Some(v) => Err(CliError::Oracle(format!(
            "deviation {} at round {} index {} exceeds tolerance {}",
            numfmt::full(v.deviation),
            v.round,
            v.index,
            numfmt::full(args.tol)
        ))),
    }
}
