//! Coefficients of ergodicity, scrambling detection, and derived constants.
//!
//! For a row-stochastic matrix `A`, `delta(A)` is the largest column spread
//! (max over columns of max-minus-min) and `lambda(A)` is one minus the
//! smallest pairwise row overlap `sum_j min(A[i1,j], A[i2,j])`. Rows are
//! identical iff `delta = 0` iff `lambda = 0`, and `delta` of a product is
//! bounded by the product of the factors' `lambda` values, so products
//! contract whenever enough factors are *scrambling* (`lambda < 1`, i.e.
//! every pair of rows shares a positively weighted column).
//!
//! For a lossy-broadcast chain the per-graph constants are:
//!
//! * `c` - the smallest positive transition entry, `min_i 1/D_i`;
//! * `l` - the primitivity index of the ideal node-block matrix (smallest
//!   power that is entrywise positive);
//! * `block_len` - the smallest power of the all-reliable *augmented* matrix
//!   whose node columns are strictly positive in every row. Products over
//!   blocks of this length are scrambling with positive probability `w`
//!   (single-round matrices never are: two buffers feeding different nodes
//!   have disjoint rows), so `block_len`, not `l`, is the block size used
//!   for the probabilistic machinery;
//! * `w`, `d` - the probability that a block is scrambling and the worst
//!   (largest) `lambda` among scrambling blocks, estimated by sampling or
//!   computed exactly by enumerating all mask sequences of a block;
//! * `alpha = exp(-w/(16 block_len))`, `beta = d^(w/(8 block_len))` - for
//!   `k >= 8 block_len / w`, `delta(T_k) <= beta^k` except with probability
//!   at most `alpha^k`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::GraphSpec;
use crate::markov::{AugmentedChain, ideal_matrix, ProductState};
use crate::numfmt;
use crate::sim::{self, DropMask};

/// Reserved ChaCha8 stream for scrambling-probability sampling, distinct
/// from the per-run mask streams (which are small run indices).
const WD_SAMPLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum ErgodicityError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("matrix is not row-stochastic: row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },
    #[error("empty factor list")]
    EmptyProduct,
    #[error("factor dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("exact enumeration infeasible: {edges} links x block {block_len} exceeds {limit} indicator bits")]
    EnumerationTooLarge {
        edges: usize,
        block_len: usize,
        limit: usize,
    },
}

const ROW_SUM_TOL: f64 = 1e-8;

fn validate_stochastic(a: &Array2<f64>) -> Result<(), ErgodicityError> {
    if a.nrows() != a.ncols() {
        return Err(ErgodicityError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    for (r, row) in a.rows().into_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v < 0.0 {
                return Err(ErgodicityError::NegativeEntry {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
        let sum: f64 = row.sum();
        if !((sum - 1.0).abs() <= ROW_SUM_TOL) {
            return Err(ErgodicityError::NotStochastic { row: r, sum });
        }
    }
    Ok(())
}

/// Largest column spread: `max_j (max_i A[i,j] - min_i A[i,j])`.
pub fn delta(a: &Array2<f64>) -> Result<f64, ErgodicityError> {
    validate_stochastic(a)?;
    let mut worst = 0.0f64;
    for j in 0..a.ncols() {
        let col = a.column(j);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        worst = worst.max(hi - lo);
    }
    Ok(worst.clamp(0.0, 1.0))
}

/// One minus the smallest pairwise row overlap.
pub fn lambda(a: &Array2<f64>) -> Result<f64, ErgodicityError> {
    validate_stochastic(a)?;
    Ok(1.0 - min_row_overlap(a))
}

fn min_row_overlap(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    if n == 1 {
        // A row paired with itself overlaps fully.
        return 1.0;
    }
    let mut least = f64::INFINITY;
    for i1 in 0..n {
        for i2 in i1 + 1..n {
            let overlap: f64 = (0..a.ncols())
                .map(|j| a[[i1, j]].min(a[[i2, j]]))
                .sum();
            least = least.min(overlap);
        }
    }
    least.clamp(0.0, 1.0)
}

/// True iff every pair of rows shares a column where both are positive,
/// equivalently `lambda(A) < 1`. Both tests are evaluated and must agree.
pub fn is_scrambling(a: &Array2<f64>) -> Result<bool, ErgodicityError> {
    validate_stochastic(a)?;
    let n = a.nrows();
    let mut combinatorial = true;
    'pairs: for i1 in 0..n {
        for i2 in i1 + 1..n {
            let shares = (0..a.ncols()).any(|j| a[[i1, j]] > 0.0 && a[[i2, j]] > 0.0);
            if !shares {
                combinatorial = false;
                break 'pairs;
            }
        }
    }
    let numeric = min_row_overlap(a) > 0.0;
    assert_eq!(
        combinatorial, numeric,
        "support test and lambda test disagree on scrambling"
    );
    Ok(combinatorial)
}

/// Both sides of the product contraction inequality:
/// `delta(A_1 ... A_p) <= (prod_{i<p} lambda(A_i)) delta(A_p) <= prod lambda(A_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HajnalCheck {
    pub delta_of_product: f64,
    /// `prod_{i<p} lambda(A_i) * delta(A_p)`.
    pub scaled_bound: f64,
    pub lambda_product: f64,
}

impl HajnalCheck {
    pub fn holds(&self, slack: f64) -> bool {
        self.delta_of_product <= self.scaled_bound + slack
            && self.scaled_bound <= self.lambda_product + slack
    }
}

pub fn hajnal_bound_check(factors: &[Array2<f64>]) -> Result<HajnalCheck, ErgodicityError> {
    let first = factors.first().ok_or(ErgodicityError::EmptyProduct)?;
    let mut product = first.clone();
    validate_stochastic(first)?;
    for f in &factors[1..] {
        validate_stochastic(f)?;
        if f.nrows() != product.ncols() {
            return Err(ErgodicityError::DimensionMismatch(product.ncols(), f.nrows()));
        }
        product = product.dot(f);
    }
    let lambdas: Vec<f64> = factors
        .iter()
        .map(lambda)
        .collect::<Result<_, _>>()?;
    let head: f64 = lambdas[..lambdas.len() - 1].iter().product();
    Ok(HajnalCheck {
        delta_of_product: delta(&product)?,
        scaled_bound: head * delta(factors.last().unwrap())?,
        lambda_product: head * lambdas[lambdas.len() - 1],
    })
}

/// Smallest positive entry over every realizable transition matrix. Node
/// rows contribute `1/D_i` and buffer rows contribute `1`, so this is
/// `min_i 1/D_i` without enumerating realizations.
pub fn derive_c(g: &GraphSpec) -> f64 {
    (0..g.node_count())
        .map(|i| 1.0 / g.out_degree(i).expect("valid node") as f64)
        .fold(f64::INFINITY, f64::min)
}

fn bool_mul(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = a.len();
    let mut out = vec![vec![false; n]; n];
    for i in 0..n {
        for k in 0..n {
            if a[i][k] {
                for j in 0..n {
                    if b[k][j] {
                        out[i][j] = true;
                    }
                }
            }
        }
    }
    out
}

/// Index of primitivity of the ideal node-block matrix: the smallest power
/// with all entries positive. With self-loops on a strongly connected graph
/// this is the graph diameter, hence at most `m`.
pub fn derive_l(g: &GraphSpec) -> usize {
    let m = g.node_count();
    let support: Vec<Vec<bool>> = {
        let ideal = ideal_matrix(g);
        (0..m)
            .map(|i| (0..m).map(|j| ideal[[i, j]] > 0.0).collect())
            .collect()
    };
    let mut power = support.clone();
    for p in 1..=m {
        if power.iter().all(|row| row.iter().all(|&v| v)) {
            return p;
        }
        power = bool_mul(&power, &support);
    }
    unreachable!("self-looped strongly connected support saturates within m powers");
}

/// Smallest power of the all-reliable augmented matrix whose node columns
/// are strictly positive in every row (buffers included). Blocks of this
/// length are scrambling whenever every link in the block delivers, so the
/// scrambling probability over such blocks is positive.
pub fn scrambling_block_len(g: &GraphSpec) -> usize {
    let m = g.node_count();
    let chain = AugmentedChain::new(g);
    let n = chain.n();
    let all = chain.matrix(&DropMask::all_reliable(g, 1));
    let support: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| all[[i, j]] > 0.0).collect())
        .collect();
    let mut power = support.clone();
    for p in 1..=m + 1 {
        if power
            .iter()
            .all(|row| row.iter().take(m).all(|&v| v))
        {
            return p;
        }
        power = bool_mul(&power, &support);
    }
    unreachable!("augmented node columns saturate within m + 1 powers");
}

/// How the scrambling statistics were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WdMethod {
    Estimated { samples: usize },
    Exact,
}

/// Scrambling statistics over length-`block_len` mask blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct WdEstimate {
    /// Probability (or sampled fraction) of a scrambling block.
    pub w: f64,
    /// Largest `lambda` among scrambling blocks; `None` when none was seen.
    pub d: Option<f64>,
    /// Per-node probability that the node's column is strictly positive.
    pub gamma: Vec<f64>,
    pub method: WdMethod,
    /// No scrambling block observed: `w`, and the bounds built from it,
    /// are unusable.
    pub insufficient: bool,
}

/// Monte Carlo estimate of `(w, d)` from independent blocks of `block_len`
/// masks drawn per the graph's link reliabilities.
pub fn estimate_w_d(g: &GraphSpec, block_len: usize, samples: usize, seed: u64) -> WdEstimate {
    assert!(samples >= 1, "need at least one sample");
    let chain = AugmentedChain::new(g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(WD_SAMPLE_STREAM);
    let m = g.node_count();
    let mut scrambling_count = 0usize;
    let mut d: Option<f64> = None;
    let mut gamma_counts = vec![0usize; m];
    for _ in 0..samples {
        let w = block_product(&chain, g, block_len, &mut rng);
        if is_scrambling(&w).expect("block products are stochastic") {
            scrambling_count += 1;
            let lam = lambda(&w).expect("validated above");
            d = Some(d.map_or(lam, |cur| cur.max(lam)));
        }
        for (i, count) in gamma_counts.iter_mut().enumerate() {
            if w.column(i).iter().all(|&v| v > 0.0) {
                *count += 1;
            }
        }
    }
    WdEstimate {
        w: scrambling_count as f64 / samples as f64,
        d,
        gamma: gamma_counts
            .iter()
            .map(|&c| c as f64 / samples as f64)
            .collect(),
        method: WdMethod::Estimated { samples },
        insufficient: scrambling_count == 0,
    }
}

fn block_product(
    chain: &AugmentedChain,
    g: &GraphSpec,
    block_len: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let mut w = chain.matrix(&sim::draw_mask(g, rng, 1));
    for k in 2..=block_len {
        w = w.dot(&chain.matrix(&sim::draw_mask(g, rng, k)));
    }
    w
}

/// Maximum number of indicator bits the exact enumeration will iterate.
pub const ENUMERATION_BIT_LIMIT: usize = 16;

/// Exact `(w, d)` by enumerating all `2^(edges * block_len)` mask sequences
/// of one block, weighted by their probabilities. Serves as the oracle for
/// [`estimate_w_d`] on small graphs.
pub fn enumerate_w_d(g: &GraphSpec, block_len: usize) -> Result<WdEstimate, ErgodicityError> {
    let edges = g.non_self_edges().len();
    let bits = edges * block_len;
    if bits > ENUMERATION_BIT_LIMIT {
        return Err(ErgodicityError::EnumerationTooLarge {
            edges,
            block_len,
            limit: ENUMERATION_BIT_LIMIT,
        });
    }
    let chain = AugmentedChain::new(g);
    let m = g.node_count();
    let qs: Vec<f64> = g.non_self_edges().iter().map(|e| e.q).collect();
    let mut w_total = 0.0f64;
    let mut d: Option<f64> = None;
    let mut gamma = vec![0.0f64; m];
    for code in 0u64..(1u64 << bits) {
        let mut weight = 1.0f64;
        let mut product: Option<Array2<f64>> = None;
        for step in 0..block_len {
            let flags: Vec<bool> = (0..edges)
                .map(|e| code >> (step * edges + e) & 1 == 1)
                .collect();
            for (e, &f) in flags.iter().enumerate() {
                weight *= if f { qs[e] } else { 1.0 - qs[e] };
            }
            let mk = chain.matrix(&DropMask::from_flags(g, step + 1, flags).expect("valid flags"));
            product = Some(match product {
                None => mk,
                Some(p) => p.dot(&mk),
            });
        }
        if weight == 0.0 {
            // Unrealizable under this graph's reliabilities (some q is 1).
            continue;
        }
        let block = product.expect("block_len >= 1");
        if is_scrambling(&block)? {
            w_total += weight;
            let lam = lambda(&block)?;
            d = Some(d.map_or(lam, |cur| cur.max(lam)));
        }
        for (i, gi) in gamma.iter_mut().enumerate() {
            if block.column(i).iter().all(|&v| v > 0.0) {
                *gi += weight;
            }
        }
    }
    Ok(WdEstimate {
        w: w_total,
        d,
        gamma,
        method: WdMethod::Exact,
        insufficient: d.is_none(),
    })
}

/// `delta(T_k)` per round of a mask realization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaPoint {
    pub k: usize,
    pub delta: f64,
}

/// `lambda` of one completed block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockPoint {
    pub block: usize,
    /// Last round covered by the block.
    pub k_end: usize,
    pub lambda: f64,
    pub scrambling: bool,
}

/// Accumulates the forward product of the masks and returns the per-round
/// `delta(T_k)` trace plus per-block `lambda` values.
pub fn delta_trace(
    g: &GraphSpec,
    masks: &[DropMask],
    block_len: usize,
) -> Result<(Vec<DeltaPoint>, Vec<BlockPoint>), ErgodicityError> {
    let chain = AugmentedChain::new(g);
    let mut product = ProductState::new(chain.n(), block_len);
    let mut deltas = Vec::with_capacity(masks.len());
    let mut blocks = Vec::new();
    for (t, mask) in masks.iter().enumerate() {
        let k = t + 1;
        let done = product
            .accumulate(&chain.matrix(mask))
            .expect("chain matrices share the augmented dimension");
        deltas.push(DeltaPoint {
            k,
            delta: delta(product.product())?,
        });
        if let Some(w) = done {
            blocks.push(BlockPoint {
                block: blocks.len() + 1,
                k_end: k,
                lambda: lambda(&w)?,
                scrambling: is_scrambling(&w)?,
            });
        }
    }
    Ok((deltas, blocks))
}

/// Constants, bounds, and traces for one seeded realization of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicityReport {
    pub c: f64,
    /// Primitivity index of the ideal node block.
    pub l: usize,
    /// Block length used for scrambling analysis and the threshold formula.
    pub block_len: usize,
    pub w: f64,
    pub d: Option<f64>,
    pub gamma: Vec<f64>,
    pub method: WdMethod,
    pub insufficient: bool,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub k_threshold: Option<usize>,
    pub delta_trace: Vec<DeltaPoint>,
    pub lambda_trace: Vec<BlockPoint>,
}

/// How to obtain `(w, d)` when assembling a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WdConfig {
    Sample { samples: usize },
    Exact,
}

/// Runs the full analysis for the realization keyed by `seed` (stream 0, the
/// same masks a simulation run with that seed consumes).
pub fn analyze(
    g: &GraphSpec,
    seed: u64,
    steps: usize,
    wd: WdConfig,
) -> Result<ErgodicityReport, ErgodicityError> {
    let block_len = scrambling_block_len(g);
    let estimate = match wd {
        WdConfig::Sample { samples } => estimate_w_d(g, block_len, samples, seed),
        WdConfig::Exact => enumerate_w_d(g, block_len)?,
    };
    let masks = sim::draw_masks(g, seed, 0, steps);
    let (deltas, blocks) = delta_trace(g, &masks, block_len)?;
    Ok(report_from_parts(g, block_len, estimate, deltas, blocks))
}

/// Assembles a report from precomputed pieces (used by the Monte Carlo
/// driver, which reuses one `(w, d)` estimate across runs).
pub fn report_from_parts(
    g: &GraphSpec,
    block_len: usize,
    estimate: WdEstimate,
    delta_trace: Vec<DeltaPoint>,
    lambda_trace: Vec<BlockPoint>,
) -> ErgodicityReport {
    let (alpha, beta, k_threshold) = bounds_from(&estimate, block_len);
    ErgodicityReport {
        c: derive_c(g),
        l: derive_l(g),
        block_len,
        w: estimate.w,
        d: estimate.d,
        gamma: estimate.gamma,
        method: estimate.method,
        insufficient: estimate.insufficient,
        alpha,
        beta,
        k_threshold,
        delta_trace,
        lambda_trace,
    }
}

fn bounds_from(estimate: &WdEstimate, block_len: usize) -> (Option<f64>, Option<f64>, Option<usize>) {
    if estimate.insufficient {
        return (None, None, None);
    }
    let w = estimate.w;
    let d = estimate.d.expect("scrambling observed");
    let bl = block_len as f64;
    let alpha = (-w / (16.0 * bl)).exp();
    let beta = d.powf(w / (8.0 * bl));
    let k_threshold = (8.0 * bl / w).ceil() as usize;
    (Some(alpha), Some(beta), Some(k_threshold))
}

/// One certified round: did `delta(T_k)` stay within `beta^k`?
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certification {
    pub k: usize,
    pub delta: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Evaluates the geometric bound at every round at or past the threshold.
/// Rounds below the threshold are outside the bound's domain and skipped;
/// the result is empty when the report carries no usable bounds.
pub fn certify_convergence(
    delta_trace: &[DeltaPoint],
    report: &ErgodicityReport,
) -> Vec<Certification> {
    let (Some(beta), Some(threshold)) = (report.beta, report.k_threshold) else {
        return Vec::new();
    };
    delta_trace
        .iter()
        .filter(|p| p.k >= threshold)
        .map(|p| {
            let bound = beta.powi(p.k as i32);
            Certification {
                k: p.k,
                delta: p.delta,
                bound,
                pass: p.delta <= bound,
            }
        })
        .collect()
}

/// Structured text document with all constants. `mu` carries the per-node
/// thresholds when the caller derived them (entries may be unavailable for
/// nodes with zero initial `z`).
pub fn report_document(
    report: &ErgodicityReport,
    g: &GraphSpec,
    mu: &[Option<f64>],
    header: &[String],
) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    let n = g.node_count() + g.non_self_edges().len();
    out.push_str(&format!("m = {}\n", g.node_count()));
    out.push_str(&format!("n = {n}\n"));
    out.push_str(&format!("c = {}\n", numfmt::full(report.c)));
    out.push_str(&format!("l = {}\n", report.l));
    out.push_str(&format!("block_len = {}\n", report.block_len));
    match report.method {
        WdMethod::Estimated { samples } => {
            out.push_str(&format!("w_method = sampled ({samples} samples)\n"))
        }
        WdMethod::Exact => out.push_str("w_method = exact enumeration\n"),
    }
    out.push_str(&format!("w = {}\n", numfmt::full(report.w)));
    if report.insufficient {
        out.push_str("w_warning = no scrambling block observed; bounds undefined\n");
    }
    let opt = |v: Option<f64>| v.map(numfmt::full).unwrap_or_else(|| "undefined".into());
    out.push_str(&format!("d = {}\n", opt(report.d)));
    out.push_str(&format!("alpha = {}\n", opt(report.alpha)));
    out.push_str(&format!("beta = {}\n", opt(report.beta)));
    out.push_str(&format!(
        "k_threshold = {}\n",
        report
            .k_threshold
            .map(|k| k.to_string())
            .unwrap_or_else(|| "undefined".into())
    ));
    for (i, gi) in report.gamma.iter().enumerate() {
        out.push_str(&format!("gamma[{}] = {}\n", i + 1, numfmt::full(*gi)));
    }
    for (i, m) in mu.iter().enumerate() {
        match m {
            Some(v) => out.push_str(&format!("mu[{}] = {}\n", i + 1, numfmt::full(*v))),
            None => out.push_str(&format!("mu[{}] = undefined (z0 = 0)\n", i + 1)),
        }
    }
    out
}

/// Per-round trace CSV: `k, delta, beta^k, certified`. The bound columns are
/// empty below the threshold or when the bounds are undefined.
pub fn delta_trace_csv(report: &ErgodicityReport, header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("k,delta,beta_pow_k,certified\n");
    for p in &report.delta_trace {
        let (bound, certified) = match (report.beta, report.k_threshold) {
            (Some(beta), Some(threshold)) if p.k >= threshold => {
                let b = beta.powi(p.k as i32);
                (numfmt::full(b), (p.delta <= b).to_string())
            }
            (Some(beta), _) => (numfmt::full(beta.powi(p.k as i32)), String::new()),
            _ => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.k,
            numfmt::full(p.delta),
            bound,
            certified
        ));
    }
    out
}

/// Per-block trace CSV: `block, k_end, lambda, scrambling`.
pub fn lambda_trace_csv(report: &ErgodicityReport, header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("block,k_end,lambda,scrambling\n");
    for b in &report.lambda_trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            b.block,
            b.k_end,
            numfmt::full(b.lambda),
            b.scrambling
        ));
    }
    out
}
