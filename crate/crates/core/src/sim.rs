//! Deterministic synchronous-round simulation engine.
//!
//! A run is a pure function of `(graph, init, steps, seed, gating, mode)`:
//! masks are drawn from a ChaCha8 stream seeded with the run seed, one
//! Bernoulli draw per non-self-loop edge per round, consumed in canonical
//! edge order so adding analysis code never perturbs a realization. Monte
//! Carlo runs use the same seed with distinct ChaCha8 stream numbers, keyed
//! by run index.
//!
//! Rounds are two-phase: every broadcast is computed from round `k-1` state,
//! then all deliveries are applied. The engine settles each round's mass
//! transfers in buffered form - a delivered link hands over the sender's
//! fresh share plus the backlog held by the link's virtual buffer - which is
//! the same update the cumulative-total differences produce, but keeps
//! floating-point rounding proportional to the mass moved rather than to the
//! ever-growing totals. The `sigma`/`rho` accumulators are maintained
//! alongside exactly as the protocol defines them, and the trace records the
//! buffer masses explicitly so conservation and the matrix oracle can check
//! every round.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::GraphSpec;
use crate::numfmt;
use crate::protocol::{
    compute_estimate, initial_states, robust_broadcast_phase, GatingPolicy, InitialConditions,
    NodeState, ProtocolError,
};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("steps must be at least 1")]
    ZeroSteps,
    #[error("initial conditions have {got} entries for {expected} nodes")]
    InitSizeMismatch { got: usize, expected: usize },
    #[error("mask sequence has {got} masks, expected {expected}")]
    MaskCountMismatch { got: usize, expected: usize },
    #[error("mask at round {round} has {got} links, expected {expected}")]
    MaskShapeMismatch {
        round: usize,
        got: usize,
        expected: usize,
    },
    #[error("mask does not cover edge ({from}, {to})")]
    MaskEdgeMismatch { from: usize, to: usize },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Realization of the link indicator variables for one round. `flags[b]`
/// holds the indicator for the b-th non-self-loop edge in canonical order;
/// self-loops are always reliable and never appear.
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    pub round: usize,
    flags: Vec<bool>,
}

impl DropMask {
    pub fn all_reliable(g: &GraphSpec, round: usize) -> Self {
        DropMask {
            round,
            flags: vec![true; g.non_self_edges().len()],
        }
    }

    pub fn all_unreliable(g: &GraphSpec, round: usize) -> Self {
        DropMask {
            round,
            flags: vec![false; g.non_self_edges().len()],
        }
    }

    /// Builds a mask from an explicit `(from, to) -> reliable` map, which must
    /// cover exactly the non-self-loop edges of the graph.
    pub fn from_map(
        g: &GraphSpec,
        round: usize,
        reliable: &std::collections::BTreeMap<(usize, usize), bool>,
    ) -> Result<Self, SimError> {
        let edges = g.non_self_edges();
        if reliable.len() != edges.len() {
            return Err(SimError::MaskShapeMismatch {
                round,
                got: reliable.len(),
                expected: edges.len(),
            });
        }
        let mut flags = Vec::with_capacity(edges.len());
        for e in edges {
            match reliable.get(&(e.from, e.to)) {
                Some(&r) => flags.push(r),
                None => {
                    return Err(SimError::MaskEdgeMismatch {
                        from: e.from + 1,
                        to: e.to + 1,
                    })
                }
            }
        }
        Ok(DropMask { round, flags })
    }

    /// Builds a mask from indicators in canonical edge order.
    pub fn from_flags(g: &GraphSpec, round: usize, flags: Vec<bool>) -> Result<Self, SimError> {
        let expected = g.non_self_edges().len();
        if flags.len() != expected {
            return Err(SimError::MaskShapeMismatch {
                round,
                got: flags.len(),
                expected,
            });
        }
        Ok(DropMask { round, flags })
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Indicator for the b-th canonical non-self-loop edge.
    pub fn is_reliable(&self, b: usize) -> bool {
        self.flags[b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// All links reliable every round, regardless of edge reliabilities.
    Ideal,
    /// Links drop per their Bernoulli reliabilities.
    Robust,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub graph: GraphSpec,
    pub init: InitialConditions,
    pub steps: usize,
    pub seed: u64,
    pub gating: GatingPolicy,
    pub mode: Mode,
}

impl RunConfig {
    fn validate(&self) -> Result<(), SimError> {
        if self.steps == 0 {
            return Err(SimError::ZeroSteps);
        }
        if self.init.node_count() != self.graph.node_count() {
            return Err(SimError::InitSizeMismatch {
                got: self.init.node_count(),
                expected: self.graph.node_count(),
            });
        }
        self.gating.validate(self.graph.node_count())?;
        Ok(())
    }
}

/// State recorded after one round: node masses, buffer masses for both
/// iterations, and the (held) gated estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub k: usize,
    pub mask: DropMask,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub nu_y: Vec<f64>,
    pub nu_z: Vec<f64>,
    pub estimates: Vec<Option<f64>>,
    /// Whether each node refreshed its estimate this round.
    pub gated: Vec<bool>,
}

/// Round-0 snapshot: initial conditions with every buffer empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub nu_y: Vec<f64>,
    pub nu_z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub initial: Snapshot,
    pub rounds: Vec<RoundRecord>,
    /// Per-node rounds at which the estimate was refreshed.
    pub update_times: Vec<Vec<usize>>,
}

impl Trace {
    pub fn steps(&self) -> usize {
        self.rounds.len()
    }

    /// Final held estimate per node.
    pub fn final_estimates(&self) -> &[Option<f64>] {
        &self.rounds.last().expect("at least one round").estimates
    }

    pub fn masks(&self) -> Vec<DropMask> {
        self.rounds.iter().map(|r| r.mask.clone()).collect()
    }
}

/// ChaCha8 stream for `(seed, stream)`. Stream 0 drives single runs; Monte
/// Carlo run `r` uses stream `r`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws one round's mask: each non-self-loop edge is reliable with its
/// probability `q`, independently. Draws are consumed in canonical edge order.
pub fn draw_mask(g: &GraphSpec, rng: &mut ChaCha8Rng, round: usize) -> DropMask {
    let flags = g
        .non_self_edges()
        .iter()
        .map(|e| rng.random::<f64>() < e.q)
        .collect();
    DropMask { round, flags }
}

/// The full mask sequence for a run keyed by `(seed, stream)`.
pub fn draw_masks(g: &GraphSpec, seed: u64, stream: u64, steps: usize) -> Vec<DropMask> {
    let mut rng = rng_for(seed, stream);
    (1..=steps).map(|k| draw_mask(g, &mut rng, k)).collect()
}

/// Executes a seeded run and records the full trace. In `Ideal` mode every
/// round uses the all-reliable mask and the seed's stream is left untouched.
pub fn run(cfg: &RunConfig) -> Result<Trace, SimError> {
    cfg.validate()?;
    let masks = match cfg.mode {
        Mode::Ideal => (1..=cfg.steps)
            .map(|k| DropMask::all_reliable(&cfg.graph, k))
            .collect(),
        Mode::Robust => draw_masks(&cfg.graph, cfg.seed, 0, cfg.steps),
    };
    replay(cfg, &masks)
}

/// Executes a run with an externally supplied mask sequence. `run(cfg)` is
/// `replay(cfg, masks drawn from cfg.seed)`; masks are applied verbatim.
pub fn replay(cfg: &RunConfig, masks: &[DropMask]) -> Result<Trace, SimError> {
    cfg.validate()?;
    if masks.len() != cfg.steps {
        return Err(SimError::MaskCountMismatch {
            got: masks.len(),
            expected: cfg.steps,
        });
    }
    let g = &cfg.graph;
    let edge_count = g.non_self_edges().len();
    for (t, mask) in masks.iter().enumerate() {
        if mask.flags.len() != edge_count {
            return Err(SimError::MaskShapeMismatch {
                round: t + 1,
                got: mask.flags.len(),
                expected: edge_count,
            });
        }
    }

    let mut engine = Engine::new(g, &cfg.init);
    let mut rounds = Vec::with_capacity(cfg.steps);
    let initial = engine.snapshot();
    for (t, mask) in masks.iter().enumerate() {
        let k = t + 1;
        rounds.push(engine.step(k, mask, &cfg.gating));
    }
    Ok(Trace {
        initial,
        rounds,
        update_times: engine
            .states
            .iter()
            .map(|s| s.update_times.clone())
            .collect(),
    })
}

/// In-edge source feeding a node, in ascending in-neighbor order.
struct Fanin {
    from: usize,
    /// Canonical buffer index, `None` for the self-loop.
    buffer: Option<usize>,
    /// Position in the node's rho vectors.
    slot: usize,
}

struct Engine<'g> {
    g: &'g GraphSpec,
    states: Vec<NodeState>,
    nu_y: Vec<f64>,
    nu_z: Vec<f64>,
    fanin: Vec<Vec<Fanin>>,
}

impl<'g> Engine<'g> {
    fn new(g: &'g GraphSpec, init: &InitialConditions) -> Self {
        let m = g.node_count();
        let edges = g.non_self_edges();
        let buffer_of: std::collections::BTreeMap<(usize, usize), usize> = edges
            .iter()
            .enumerate()
            .map(|(b, e)| ((e.from, e.to), b))
            .collect();
        let fanin = (0..m)
            .map(|i| {
                g.in_neighbors(i)
                    .iter()
                    .enumerate()
                    .map(|(slot, &j)| Fanin {
                        from: j,
                        buffer: (j != i).then(|| buffer_of[&(j, i)]),
                        slot,
                    })
                    .collect()
            })
            .collect();
        Engine {
            g,
            states: initial_states(g, init),
            nu_y: vec![0.0; edges.len()],
            nu_z: vec![0.0; edges.len()],
            fanin,
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            y: self.states.iter().map(|s| s.y).collect(),
            z: self.states.iter().map(|s| s.z).collect(),
            nu_y: self.nu_y.clone(),
            nu_z: self.nu_z.clone(),
        }
    }

    fn step(&mut self, k: usize, mask: &DropMask, gating: &GatingPolicy) -> RoundRecord {
        let m = self.g.node_count();

        // Broadcast phase: shares and cumulative totals from round k-1 state.
        let shares: Vec<(f64, f64)> = (0..m)
            .map(|i| {
                let d = self.g.out_degree(i).expect("valid node") as f64;
                (self.states[i].y / d, self.states[i].z / d)
            })
            .collect();
        let sigmas: Vec<(f64, f64)> = (0..m)
            .map(|i| robust_broadcast_phase(&mut self.states[i], self.g, i))
            .collect();

        // Receive phase: a delivered link hands over the fresh share plus the
        // buffer backlog; rho snapshots the sender's cumulative total.
        let mut new_y = vec![0.0; m];
        let mut new_z = vec![0.0; m];
        for i in 0..m {
            let mut acc_y = 0.0;
            let mut acc_z = 0.0;
            for fan in &self.fanin[i] {
                match fan.buffer {
                    None => {
                        acc_y += shares[i].0;
                        acc_z += shares[i].1;
                        self.states[i].rho_y[fan.slot] = sigmas[i].0;
                        self.states[i].rho_z[fan.slot] = sigmas[i].1;
                    }
                    Some(b) if mask.is_reliable(b) => {
                        acc_y += shares[fan.from].0 + self.nu_y[b];
                        acc_z += shares[fan.from].1 + self.nu_z[b];
                        self.states[i].rho_y[fan.slot] = sigmas[fan.from].0;
                        self.states[i].rho_z[fan.slot] = sigmas[fan.from].1;
                    }
                    Some(_) => {}
                }
            }
            new_y[i] = acc_y;
            new_z[i] = acc_z;
        }

        // Buffer phase: reliable links flush, unreliable links absorb the share.
        for (b, e) in self.g.non_self_edges().iter().enumerate() {
            if mask.is_reliable(b) {
                self.nu_y[b] = 0.0;
                self.nu_z[b] = 0.0;
            } else {
                self.nu_y[b] += shares[e.from].0;
                self.nu_z[b] += shares[e.from].1;
            }
        }

        let mut estimates = Vec::with_capacity(m);
        let mut gated = Vec::with_capacity(m);
        for i in 0..m {
            self.states[i].y = new_y[i];
            self.states[i].z = new_z[i];
            let fresh = compute_estimate(&mut self.states[i], gating, i, k);
            gated.push(fresh.is_some());
            estimates.push(self.states[i].estimate);
        }

        RoundRecord {
            k,
            mask: DropMask {
                round: k,
                flags: mask.flags.clone(),
            },
            y: new_y,
            z: new_z,
            nu_y: self.nu_y.clone(),
            nu_z: self.nu_z.clone(),
            estimates,
            gated,
        }
    }
}

/// Largest relative conservation error over all rounds, for `y` and `z`:
/// `|sum(nodes) + sum(buffers) - sum(initial)| / sum(|initial|)`.
pub fn max_conservation_error(trace: &Trace) -> (f64, f64) {
    let totals = |y: &[f64], nu: &[f64]| y.iter().sum::<f64>() + nu.iter().sum::<f64>();
    let scale = |v: &[f64]| {
        let s: f64 = v.iter().map(|x| x.abs()).sum();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let y_target = totals(&trace.initial.y, &trace.initial.nu_y);
    let z_target = totals(&trace.initial.z, &trace.initial.nu_z);
    let y_scale = scale(&trace.initial.y);
    let z_scale = scale(&trace.initial.z);
    let mut worst = (0.0f64, 0.0f64);
    for r in &trace.rounds {
        worst.0 = worst.0.max((totals(&r.y, &r.nu_y) - y_target).abs() / y_scale);
        worst.1 = worst.1.max((totals(&r.z, &r.nu_z) - z_target).abs() / z_scale);
    }
    worst
}

/// Trace export: one row per augmented entity per round, canonical order.
/// Buffers report their held masses in the `y`/`z` columns; the estimate and
/// gated columns are left empty for buffers and for round 0.
pub fn trace_csv(trace: &Trace, g: &GraphSpec, header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("k,entity,kind,y,z,estimate,gated\n");
    let edges = g.non_self_edges();
    let mut push_rows = |k: usize,
                         y: &[f64],
                         z: &[f64],
                         nu_y: &[f64],
                         nu_z: &[f64],
                         estimates: Option<&[Option<f64>]>,
                         gated: Option<&[bool]>| {
        for i in 0..g.node_count() {
            let est = estimates
                .and_then(|e| e[i])
                .map(numfmt::full)
                .unwrap_or_default();
            let gate = gated.map(|gd| gd[i].to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},node,{},{},{},{}\n",
                k,
                i + 1,
                numfmt::full(y[i]),
                numfmt::full(z[i]),
                est,
                gate
            ));
        }
        for (b, e) in edges.iter().enumerate() {
            out.push_str(&format!(
                "{},{}->{},buffer,{},{},,\n",
                k,
                e.from + 1,
                e.to + 1,
                numfmt::full(nu_y[b]),
                numfmt::full(nu_z[b])
            ));
        }
    };
    push_rows(
        0,
        &trace.initial.y,
        &trace.initial.z,
        &trace.initial.nu_y,
        &trace.initial.nu_z,
        None,
        None,
    );
    for r in &trace.rounds {
        push_rows(
            r.k,
            &r.y,
            &r.z,
            &r.nu_y,
            &r.nu_z,
            Some(&r.estimates),
            Some(&r.gated),
        );
    }
    out
}

/// Mask export: one row per non-self-loop edge per round.
pub fn masks_csv(trace: &Trace, g: &GraphSpec, header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("k,from,to,reliable\n");
    for r in &trace.rounds {
        for (b, e) in g.non_self_edges().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.k,
                e.from + 1,
                e.to + 1,
                r.mask.is_reliable(b)
            ));
        }
    }
    out
}
