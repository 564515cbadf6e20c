//! Monte Carlo aggregation across independently seeded runs.
//!
//! Run `r` of a batch consumes ChaCha8 stream `r` of the base seed, so the
//! batch is reproducible and run 0 coincides with a plain simulation under
//! the same seed. Runs are processed in run-index order and the summary is a
//! pure function of `(config, runs)`.
//!
//! Besides final estimation errors, the driver tallies how often the
//! per-round spread `delta(T_k)` exceeds its geometric bound `beta^k` at or
//! past the threshold round, which is the quantity the probabilistic
//! convergence guarantee caps at `alpha^k` per round.

use thiserror::Error;

use crate::ergodicity::{self, ErgodicityError, ErgodicityReport, WdConfig};
use crate::graph::GraphSpec;
use crate::numfmt;
use crate::protocol::{GatingPolicy, InitialConditions};
use crate::sim::{self, DropMask, Mode, RunConfig, SimError};

#[derive(Debug, Error)]
pub enum McError {
    #[error("runs must be at least 1")]
    ZeroRuns,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ergodicity(#[from] ErgodicityError),
}

#[derive(Debug, Clone)]
pub struct McConfig {
    pub graph: GraphSpec,
    pub init: InitialConditions,
    pub steps: usize,
    pub seed: u64,
    pub runs: usize,
    pub gating: GatingPolicy,
    pub mode: Mode,
    /// How to obtain the scrambling statistics shared by all runs.
    pub wd: WdConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    pub run: usize,
    /// Largest `|estimate - target|` over nodes at the final round; `None`
    /// when some node never opened its gate.
    pub final_error: Option<f64>,
}

/// Bound-exceedance tally for one round index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExceedanceRow {
    pub k: usize,
    /// Fraction of runs with `delta(T_k) > beta^k`.
    pub fraction: f64,
    pub alpha_pow_k: f64,
}

#[derive(Debug, Clone)]
pub struct McSummary {
    pub target: f64,
    pub runs: Vec<RunOutcome>,
    /// Constants and bounds shared by the batch (traces left empty).
    pub report: ErgodicityReport,
    /// One row per round at or past the threshold; empty when the bounds
    /// are undefined or the threshold lies past the horizon.
    pub exceedance: Vec<ExceedanceRow>,
}

impl McSummary {
    pub fn max_final_error(&self) -> Option<f64> {
        self.runs
            .iter()
            .map(|r| r.final_error)
            .collect::<Option<Vec<_>>>()
            .map(|errs| errs.into_iter().fold(0.0, f64::max))
    }
}

pub fn monte_carlo(cfg: &McConfig) -> Result<McSummary, McError> {
    if cfg.runs == 0 {
        return Err(McError::ZeroRuns);
    }
    let block_len = ergodicity::scrambling_block_len(&cfg.graph);
    let estimate = match cfg.wd {
        WdConfig::Sample { samples } => {
            ergodicity::estimate_w_d(&cfg.graph, block_len, samples, cfg.seed)
        }
        WdConfig::Exact => ergodicity::enumerate_w_d(&cfg.graph, block_len)?,
    };
    let report =
        ergodicity::report_from_parts(&cfg.graph, block_len, estimate, Vec::new(), Vec::new());
    let target = cfg.init.target();

    let certify = match (report.beta, report.k_threshold) {
        (Some(beta), Some(threshold)) if threshold <= cfg.steps => Some((beta, threshold)),
        _ => None,
    };
    let mut exceed_counts = vec![0usize; certify.map_or(0, |(_, t)| cfg.steps - t + 1)];

    let mut runs = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let masks: Vec<DropMask> = match cfg.mode {
            Mode::Ideal => (1..=cfg.steps)
                .map(|k| DropMask::all_reliable(&cfg.graph, k))
                .collect(),
            Mode::Robust => sim::draw_masks(&cfg.graph, cfg.seed, r as u64, cfg.steps),
        };
        let run_cfg = RunConfig {
            graph: cfg.graph.clone(),
            init: cfg.init.clone(),
            steps: cfg.steps,
            seed: cfg.seed,
            gating: cfg.gating.clone(),
            mode: cfg.mode,
        };
        let trace = sim::replay(&run_cfg, &masks)?;
        let final_error = trace
            .final_estimates()
            .iter()
            .map(|e| e.map(|v| (v - target).abs()))
            .collect::<Option<Vec<_>>>()
            .map(|errs| errs.into_iter().fold(0.0, f64::max));
        runs.push(RunOutcome {
            run: r,
            final_error,
        });

        if let Some((beta, threshold)) = certify {
            let (deltas, _) = ergodicity::delta_trace(&cfg.graph, &masks, block_len)?;
            for p in &deltas {
                if p.k >= threshold && p.delta > beta.powi(p.k as i32) {
                    exceed_counts[p.k - threshold] += 1;
                }
            }
        }
    }

    let exceedance = certify.map_or_else(Vec::new, |(_, threshold)| {
        let alpha = report.alpha.expect("bounds defined");
        exceed_counts
            .iter()
            .enumerate()
            .map(|(off, &count)| ExceedanceRow {
                k: threshold + off,
                fraction: count as f64 / cfg.runs as f64,
                alpha_pow_k: alpha.powi((threshold + off) as i32),
            })
            .collect()
    });

    Ok(McSummary {
        target,
        runs,
        report,
        exceedance,
    })
}

/// Aggregate summary document: batch-wide statistics followed by one line
/// per run, in run-index order.
pub fn summary_document(summary: &McSummary, header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&format!("runs = {}\n", summary.runs.len()));
    out.push_str(&format!("target = {}\n", numfmt::full(summary.target)));
    match summary.max_final_error() {
        Some(err) => out.push_str(&format!("max_final_error = {}\n", numfmt::full(err))),
        None => out.push_str("max_final_error = undefined (a node never gated)\n"),
    }
    let opt = |v: Option<f64>| v.map(numfmt::full).unwrap_or_else(|| "undefined".into());
    out.push_str(&format!("w = {}\n", numfmt::full(summary.report.w)));
    out.push_str(&format!("d = {}\n", opt(summary.report.d)));
    out.push_str(&format!("alpha = {}\n", opt(summary.report.alpha)));
    out.push_str(&format!("beta = {}\n", opt(summary.report.beta)));
    out.push_str(&format!(
        "k_threshold = {}\n",
        summary
            .report
            .k_threshold
            .map(|k| k.to_string())
            .unwrap_or_else(|| "undefined".into())
    ));
    for r in &summary.runs {
        match r.final_error {
            Some(e) => out.push_str(&format!("run {}: final_error = {}\n", r.run, numfmt::full(e))),
            None => out.push_str(&format!("run {}: final_error = undefined\n", r.run)),
        }
    }
    out
}

/// Per-round exceedance CSV: `k, fraction_exceeding, alpha_pow_k`.
pub fn certification_csv(summary: &McSummary, header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("k,fraction_exceeding,alpha_pow_k\n");
    for row in &summary.exceedance {
        out.push_str(&format!(
            "{},{},{}\n",
            row.k,
            numfmt::full(row.fraction),
            numfmt::full(row.alpha_pow_k)
        ));
    }
    out
}
