//! Augmented transition matrices and forward products.
//!
//! One round of the robust iteration is a linear map on the augmented state
//! (node masses followed by buffer masses): `y_k = y_{k-1} M_k`, with row
//! vectors multiplied on the right throughout. `M_k` is determined entirely
//! by the round's drop mask:
//!
//! * node row `i`: `1/D_i` on the self-loop column, and for each out-link
//!   `(i,j)` either `1/D_i` on column `j` (delivered) or `1/D_i` on the
//!   buffer column `(i,j)` (dropped) - exactly one of the two;
//! * buffer row `(i,j)`: `1` on column `j` when the link delivers, else `1`
//!   on itself.
//!
//! Every row sums to one, so each `M_k` is row stochastic, and each positive
//! entry is at least `min_i 1/D_i`. The matrices are built on demand from
//! masks; the finite set of all realizations is never materialized. Dense
//! storage is used throughout: augmented sizes stay small at the scales this
//! crate targets.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::graph::{AugmentedSpace, GraphSpec};
use crate::numfmt;
use crate::sim::{DropMask, Trace};

#[derive(Debug, Error, PartialEq)]
pub enum MarkovError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("trace round {got} does not match the graph's node and edge counts")]
    MalformedTrace { got: usize },
}

/// One realized transition matrix together with the mask that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub matrix: Array2<f64>,
    pub mask: DropMask,
}

/// Precomputed layout for building transition matrices from masks.
pub struct AugmentedChain<'g> {
    g: &'g GraphSpec,
    aug: AugmentedSpace,
    inv_degree: Vec<f64>,
}

impl<'g> AugmentedChain<'g> {
    pub fn new(g: &'g GraphSpec) -> Self {
        let inv_degree = (0..g.node_count())
            .map(|i| 1.0 / g.out_degree(i).expect("valid node") as f64)
            .collect();
        AugmentedChain {
            g,
            aug: AugmentedSpace::new(g),
            inv_degree,
        }
    }

    pub fn space(&self) -> &AugmentedSpace {
        &self.aug
    }

    pub fn n(&self) -> usize {
        self.aug.n()
    }

    /// Builds `M_k` for the given mask.
    pub fn matrix(&self, mask: &DropMask) -> Array2<f64> {
        let m = self.g.node_count();
        let n = self.aug.n();
        let mut out = Array2::zeros((n, n));
        for i in 0..m {
            out[[i, i]] = self.inv_degree[i];
        }
        for (b, e) in self.g.non_self_edges().iter().enumerate() {
            let buf = m + b;
            if mask.is_reliable(b) {
                out[[e.from, e.to]] = self.inv_degree[e.from];
                out[[buf, e.to]] = 1.0;
            } else {
                out[[e.from, buf]] = self.inv_degree[e.from];
                out[[buf, buf]] = 1.0;
            }
        }
        out
    }

    /// Augmented row vector: node values followed by zeroed buffers.
    pub fn augmented_vector(&self, nodes: &[f64]) -> Array1<f64> {
        let mut v = Array1::zeros(self.aug.n());
        for (i, &x) in nodes.iter().enumerate() {
            v[i] = x;
        }
        v
    }
}

/// Builds the transition matrix for one mask.
pub fn build_matrix(g: &GraphSpec, mask: &DropMask) -> TransitionMatrix {
    TransitionMatrix {
        matrix: AugmentedChain::new(g).matrix(mask),
        mask: mask.clone(),
    }
}

/// Node-block transition matrix of the always-reliable network:
/// `M[i, j] = 1/D_i` for each out-neighbor `j` of `i`.
pub fn ideal_matrix(g: &GraphSpec) -> Array2<f64> {
    let m = g.node_count();
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        let share = 1.0 / g.out_degree(i).expect("valid node") as f64;
        for &j in g.out_neighbors(i) {
            out[[i, j]] = share;
        }
    }
    out
}

/// Forward product accumulator: `T_k = M_1 M_2 ... M_k`, plus the product of
/// the current length-`l` block. Completed blocks are handed back for
/// scrambling analysis.
#[derive(Debug, Clone)]
pub struct ProductState {
    t: Array2<f64>,
    block: Array2<f64>,
    block_len: usize,
    k: usize,
}

impl ProductState {
    pub fn new(n: usize, block_len: usize) -> Self {
        assert!(block_len >= 1, "block length must be positive");
        ProductState {
            t: Array2::eye(n),
            block: Array2::eye(n),
            block_len,
            k: 0,
        }
    }

    /// Absorbs one transition matrix on the right. Returns the completed
    /// block product when this step closes a block.
    pub fn accumulate(&mut self, m: &Array2<f64>) -> Result<Option<Array2<f64>>, MarkovError> {
        if m.nrows() != self.t.ncols() || m.nrows() != m.ncols() {
            return Err(MarkovError::DimensionMismatch(self.t.ncols(), m.nrows()));
        }
        self.t = self.t.dot(m);
        self.block = self.block.dot(m);
        self.k += 1;
        if self.k.is_multiple_of(self.block_len) {
            let done = std::mem::replace(&mut self.block, Array2::eye(m.nrows()));
            Ok(Some(done))
        } else {
            Ok(None)
        }
    }

    /// The forward product over all absorbed rounds.
    pub fn product(&self) -> &Array2<f64> {
        &self.t
    }

    pub fn rounds(&self) -> usize {
        self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleViolation {
    pub round: usize,
    /// Augmented position of the worst entry.
    pub index: usize,
    pub deviation: f64,
}

/// Result of replaying a trace through the matrix iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub tol: f64,
    pub max_deviation: f64,
    /// Max absolute deviation per round, over both iterations.
    pub per_round: Vec<f64>,
    pub first_violation: Option<OracleViolation>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.first_violation.is_none()
    }
}

/// Rebuilds each round's transition matrix from the recorded masks, forms
/// `y_0 T_k` on the augmented space, and compares entrywise against the
/// recorded node and buffer masses, for both iterations.
pub fn oracle_check(trace: &Trace, g: &GraphSpec, tol: f64) -> Result<OracleReport, MarkovError> {
    let chain = AugmentedChain::new(g);
    let n = chain.n();
    let m = g.node_count();
    let edge_count = g.non_self_edges().len();
    if let Some(r) = trace
        .rounds
        .iter()
        .find(|r| r.mask.flags().len() != edge_count || r.y.len() != m)
    {
        return Err(MarkovError::MalformedTrace { got: r.k });
    }
    let y0 = chain.augmented_vector(&trace.initial.y);
    let z0 = chain.augmented_vector(&trace.initial.z);
    let mut product = ProductState::new(n, 1);

    let mut per_round = Vec::with_capacity(trace.rounds.len());
    let mut max_deviation = 0.0f64;
    let mut first_violation = None;
    for r in &trace.rounds {
        let mk = chain.matrix(&r.mask);
        product.accumulate(&mk)?;
        let want_y = y0.dot(product.product());
        let want_z = z0.dot(product.product());

        let mut round_max = 0.0f64;
        let mut round_arg = 0usize;
        let mut observe = |idx: usize, got: f64, want: f64| {
            let dev = (got - want).abs();
            if dev > round_max {
                round_max = dev;
                round_arg = idx;
            }
        };
        for i in 0..m {
            observe(i, r.y[i], want_y[i]);
            observe(i, r.z[i], want_z[i]);
        }
        for b in 0..n - m {
            observe(m + b, r.nu_y[b], want_y[m + b]);
            observe(m + b, r.nu_z[b], want_z[m + b]);
        }

        per_round.push(round_max);
        max_deviation = max_deviation.max(round_max);
        if round_max > tol && first_violation.is_none() {
            first_violation = Some(OracleViolation {
                round: r.k,
                index: round_arg,
                deviation: round_max,
            });
        }
    }
    Ok(OracleReport {
        tol,
        max_deviation,
        per_round,
        first_violation,
    })
}

/// Matrix dump with a header row of canonical index labels.
pub fn matrix_csv(t: &TransitionMatrix, g: &GraphSpec, header: &[String]) -> String {
    let labels = AugmentedSpace::new(g).labels();
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("row");
    for l in &labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (r, label) in labels.iter().enumerate() {
        out.push_str(label);
        for c in 0..labels.len() {
            out.push(',');
            out.push_str(&numfmt::full(t.matrix[[r, c]]));
        }
        out.push('\n');
    }
    out
}
