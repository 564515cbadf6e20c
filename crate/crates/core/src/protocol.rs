//! Per-node state machine for ratio consensus.
//!
//! Each node runs two identical linear iterations on masses `y` and `z` and
//! reports the ratio `y/z` as its estimate of `sum(y0) / sum(z0)`. Under
//! perfectly reliable links the iteration is the plain in-neighbor sum of
//! shares ([`ideal_step`]). Under lossy links each node instead broadcasts its
//! *cumulative* outgoing mass `sigma` and tracks the cumulative received mass
//! `rho` per in-neighbor; the per-round increment `rho_k - rho_{k-1}` then
//! delivers both the fresh share and any backlog that a recovering link
//! releases, so no mass is ever lost ([`robust_broadcast_phase`] /
//! [`robust_receive_phase`]).
//!
//! Estimates are gated: a node divides only when its `z` mass clears a
//! positive threshold `mu` (or is merely positive, in the strengthened mode),
//! which rules out division by zero by construction.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{GraphError, GraphSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("delivery from node {from} which is not an in-neighbor of node {to}")]
    NotAnInNeighbor { from: usize, to: usize },
    #[error("missing self-delivery for node {node}")]
    MissingSelfDelivery { node: usize },
    #[error("invalid initial conditions: {0}")]
    InvalidInit(String),
    #[error("node {node} has z0 = 0 and cannot derive a threshold; supply mu_z explicitly")]
    ZeroInitialZ { node: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Initial masses for the two iterations.
///
/// `z0` entries must be non-negative with a positive total. `y0` entries are
/// finite; negative values are accepted (useful with positive gating) but the
/// convergence guarantees are stated for non-negative `y0`.
///
/// Encoding a weighted average: with `y0[i] = w_i * v_i` and `z0[i] = w_i`
/// the consensus value is the weighted average of the `v_i`; all-ones `z0`
/// yields the plain average.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialConditions {
    pub y0: Vec<f64>,
    pub z0: Vec<f64>,
}

impl InitialConditions {
    pub fn new(y0: Vec<f64>, z0: Vec<f64>) -> Result<Self, ProtocolError> {
        if y0.len() != z0.len() {
            return Err(ProtocolError::InvalidInit(format!(
                "y0 has {} entries but z0 has {}",
                y0.len(),
                z0.len()
            )));
        }
        if let Some(v) = y0.iter().chain(z0.iter()).find(|v| !v.is_finite()) {
            return Err(ProtocolError::InvalidInit(format!("non-finite entry {v}")));
        }
        if let Some(i) = z0.iter().position(|&v| v < 0.0) {
            return Err(ProtocolError::InvalidInit(format!(
                "z0[{}] = {} is negative",
                i + 1,
                z0[i]
            )));
        }
        if z0.iter().sum::<f64>() <= 0.0 {
            return Err(ProtocolError::InvalidInit(
                "sum of z0 must be positive".into(),
            ));
        }
        Ok(InitialConditions { y0, z0 })
    }

    pub fn node_count(&self) -> usize {
        self.y0.len()
    }

    /// The consensus target `sum(y0) / sum(z0)`.
    pub fn target(&self) -> f64 {
        self.y0.iter().sum::<f64>() / self.z0.iter().sum::<f64>()
    }
}

/// When a node is allowed to refresh its ratio estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum GatingPolicy {
    /// Refresh when `z >= mu[i]`, with a positive per-node threshold.
    Threshold { mu: Vec<f64> },
    /// Strengthened mode: refresh whenever `z > 0`.
    Positive,
}

impl GatingPolicy {
    pub fn validate(&self, m: usize) -> Result<(), ProtocolError> {
        if let GatingPolicy::Threshold { mu } = self {
            if mu.len() != m {
                return Err(ProtocolError::InvalidInit(format!(
                    "threshold vector has {} entries for {} nodes",
                    mu.len(),
                    m
                )));
            }
            if let Some(i) = mu.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(ProtocolError::InvalidInit(format!(
                    "mu[{}] = {} must be a positive real",
                    i + 1,
                    mu[i]
                )));
            }
        }
        Ok(())
    }
}

/// Protocol variables of one computing node.
///
/// `rho_y[p]` / `rho_z[p]` track the cumulative mass received from the p-th
/// in-neighbor in the node's sorted in-neighbor list (self included).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub y: f64,
    pub z: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
    pub rho_y: Vec<f64>,
    pub rho_z: Vec<f64>,
    pub estimate: Option<f64>,
    /// Rounds at which the estimate was refreshed.
    pub update_times: Vec<usize>,
}

impl NodeState {
    pub fn new(g: &GraphSpec, i: usize, y0: f64, z0: f64) -> Self {
        let fan_in = g.in_neighbors(i).len();
        NodeState {
            y: y0,
            z: z0,
            sigma_y: 0.0,
            sigma_z: 0.0,
            rho_y: vec![0.0; fan_in],
            rho_z: vec![0.0; fan_in],
            estimate: None,
            update_times: Vec::new(),
        }
    }

    /// Position of in-neighbor `j` in this node's rho vectors.
    pub fn rho_slot(g: &GraphSpec, i: usize, j: usize) -> Option<usize> {
        g.in_neighbors(i).binary_search(&j).ok()
    }
}

/// Builds the initial per-node states for a run.
pub fn initial_states(g: &GraphSpec, init: &InitialConditions) -> Vec<NodeState> {
    (0..g.node_count())
        .map(|i| NodeState::new(g, i, init.y0[i], init.z0[i]))
        .collect()
}

/// One synchronous round of the ideal (always-reliable) iteration:
/// every node replaces its mass with the sum of its in-neighbors' shares.
pub fn ideal_step(states: &[NodeState], g: &GraphSpec) -> Vec<NodeState> {
    let shares: Vec<(f64, f64)> = states
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let d = g.out_degree(j).expect("state vector matches graph") as f64;
            (s.y / d, s.z / d)
        })
        .collect();
    states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut next = s.clone();
            next.y = g.in_neighbors(i).iter().map(|&j| shares[j].0).sum();
            next.z = g.in_neighbors(i).iter().map(|&j| shares[j].1).sum();
            next
        })
        .collect()
}

/// Broadcast phase of a robust round: fold the current share into the
/// cumulative totals and return the message `(sigma_y, sigma_z)` that goes to
/// every out-neighbor unchanged.
pub fn robust_broadcast_phase(state: &mut NodeState, g: &GraphSpec, i: usize) -> (f64, f64) {
    let d = g.out_degree(i).expect("node id valid") as f64;
    state.sigma_y += state.y / d;
    state.sigma_z += state.z / d;
    (state.sigma_y, state.sigma_z)
}

/// Receive phase of a robust round. `deliveries` maps each in-neighbor whose
/// message arrived this round to the received `(sigma_y, sigma_z)`; absent
/// in-neighbors dropped. The self message is always delivered and must be
/// present. A delivery from a non-in-neighbor is a protocol fault.
pub fn robust_receive_phase(
    state: &mut NodeState,
    g: &GraphSpec,
    i: usize,
    deliveries: &BTreeMap<usize, (f64, f64)>,
) -> Result<(), ProtocolError> {
    let in_neighbors = g.in_neighbors(i);
    if let Some(&from) = deliveries.keys().find(|j| !in_neighbors.contains(j)) {
        return Err(ProtocolError::NotAnInNeighbor {
            from: from + 1,
            to: i + 1,
        });
    }
    if !deliveries.contains_key(&i) {
        return Err(ProtocolError::MissingSelfDelivery { node: i + 1 });
    }
    let mut new_y = 0.0;
    let mut new_z = 0.0;
    for (slot, &j) in in_neighbors.iter().enumerate() {
        if let Some(&(sigma_y, sigma_z)) = deliveries.get(&j) {
            new_y += sigma_y - state.rho_y[slot];
            new_z += sigma_z - state.rho_z[slot];
            state.rho_y[slot] = sigma_y;
            state.rho_z[slot] = sigma_z;
        }
    }
    state.y = new_y;
    state.z = new_z;
    Ok(())
}

/// Gated ratio estimate at round `k`. Returns the fresh estimate when the
/// gate is open and records `k` in the node's update times; otherwise returns
/// `None` and the previous estimate is retained.
pub fn compute_estimate(
    state: &mut NodeState,
    policy: &GatingPolicy,
    i: usize,
    k: usize,
) -> Option<f64> {
    let open = match policy {
        GatingPolicy::Threshold { mu } => state.z >= mu[i],
        GatingPolicy::Positive => state.z > 0.0,
    };
    if open {
        let value = state.y / state.z;
        state.estimate = Some(value);
        state.update_times.push(k);
        Some(value)
    } else {
        None
    }
}

/// Self-derived gating threshold for node `i`: `z0[i] * c^l / n`, where `c`
/// is the minimum positive transition entry, `l` the scrambling block length,
/// and `n` the augmented entity count. Requires `z0[i] > 0`; a node with zero
/// initial `z` has no self-derived lower bound and the caller must supply one.
pub fn mu_for_node(
    g: &GraphSpec,
    z0: &[f64],
    i: usize,
    c: f64,
    l: usize,
) -> Result<f64, ProtocolError> {
    if i >= g.node_count() {
        return Err(GraphError::NodeOutOfRange {
            id: i + 1,
            m: g.node_count(),
        }
        .into());
    }
    if z0[i] <= 0.0 {
        return Err(ProtocolError::ZeroInitialZ { node: i + 1 });
    }
    let n = (g.node_count() + g.non_self_edges().len()) as f64;
    Ok(z0[i] * c.powi(l as i32) / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node() -> GraphSpec {
        GraphSpec::new(2, &[(0, 1, 0.9), (1, 0, 0.9)]).unwrap()
    }

    fn states_for(g: &GraphSpec, y0: &[f64], z0: &[f64]) -> Vec<NodeState> {
        let init = InitialConditions::new(y0.to_vec(), z0.to_vec()).unwrap();
        initial_states(g, &init)
    }

    #[test]
    fn ideal_step_two_node_averages() {
        let g = two_node();
        let states = states_for(&g, &[1.0, 3.0], &[1.0, 1.0]);
        let next = ideal_step(&states, &g);
        assert_eq!(next[0].y, 2.0);
        assert_eq!(next[1].y, 2.0);
        assert_eq!(next[0].z, 1.0);
        assert_eq!(next[1].z, 1.0);
    }

    #[test]
    fn ideal_step_preserves_zero_mass() {
        let g = GraphSpec::ring(4, 0.5).unwrap();
        let mut states = states_for(&g, &[0.0; 4], &[1.0; 4]);
        for _ in 0..5 {
            states = ideal_step(&states, &g);
            assert!(states.iter().all(|s| s.y == 0.0));
        }
    }

    #[test]
    fn ideal_ring_ratio_converges_to_mean() {
        let g = GraphSpec::ring(5, 1.0).unwrap();
        let mut states = states_for(&g, &[5.0, 0.0, 0.0, 0.0, 0.0], &[1.0; 5]);
        for _ in 0..200 {
            states = ideal_step(&states, &g);
        }
        for s in &states {
            assert!((s.y / s.z - 1.0).abs() < 1e-9, "ratio {}", s.y / s.z);
        }
    }

    #[test]
    fn broadcast_phase_accumulates_half_share() {
        let g = two_node();
        let mut state = NodeState::new(&g, 0, 1.0, 1.0);
        let (sy, _) = robust_broadcast_phase(&mut state, &g, 0);
        assert_eq!(sy, 0.5);
        assert_eq!(state.sigma_y, 0.5);
    }

    #[test]
    fn broadcast_phase_with_zero_mass_leaves_sigma() {
        let g = two_node();
        let mut state = NodeState::new(&g, 0, 0.0, 0.0);
        robust_broadcast_phase(&mut state, &g, 0);
        assert_eq!(state.sigma_y, 0.0);
        assert_eq!(state.sigma_z, 0.0);
    }

    #[test]
    fn broadcast_phase_is_cumulative() {
        // Hypothetical stalled node: y pinned at 1 for three rounds.
        let g = two_node();
        let mut state = NodeState::new(&g, 0, 1.0, 1.0);
        for _ in 0..3 {
            robust_broadcast_phase(&mut state, &g, 0);
            state.y = 1.0;
        }
        assert_eq!(state.sigma_y, 1.5);
    }

    /// Hand trace of round 1 on the two-node graph with y0 = [1, 3],
    /// link (0,1) dropped and (1,0) delivered.
    #[test]
    fn receive_phase_hand_trace_round_one() {
        let g = two_node();
        let mut states = states_for(&g, &[1.0, 3.0], &[1.0, 1.0]);
        let mut messages = Vec::new();
        for i in 0..2 {
            messages.push(robust_broadcast_phase(&mut states[i], &g, i));
        }
        assert_eq!(messages, vec![(0.5, 0.5), (1.5, 0.5)]);

        // Node 0 hears itself and node 1; node 1 hears only itself.
        let deliveries0 = BTreeMap::from([(0, messages[0]), (1, messages[1])]);
        let deliveries1 = BTreeMap::from([(1, messages[1])]);
        robust_receive_phase(&mut states[0], &g, 0, &deliveries0).unwrap();
        robust_receive_phase(&mut states[1], &g, 1, &deliveries1).unwrap();

        assert_eq!(states[0].y, 2.0);
        assert_eq!(states[1].y, 1.5);
        // Undelivered mass sits in the (0,1) buffer: sigma[0] - rho[0 -> 1].
        let slot = NodeState::rho_slot(&g, 1, 0).unwrap();
        let nu_01 = states[0].sigma_y - states[1].rho_y[slot];
        assert_eq!(nu_01, 0.5);
        assert_eq!(states[0].y + states[1].y + nu_01, 4.0);
    }

    /// Continue the trace: the link recovers at round 2 and node 1 receives
    /// backlog and fresh share together, i.e. node 0's full sigma at k = 2.
    #[test]
    fn receive_phase_releases_backlog_on_recovery() {
        let g = two_node();
        let mut states = states_for(&g, &[1.0, 3.0], &[1.0, 1.0]);
        for i in 0..2 {
            robust_broadcast_phase(&mut states[i], &g, i);
        }
        let m0 = (states[0].sigma_y, states[0].sigma_z);
        let m1 = (states[1].sigma_y, states[1].sigma_z);
        robust_receive_phase(&mut states[0], &g, 0, &BTreeMap::from([(0, m0), (1, m1)])).unwrap();
        robust_receive_phase(&mut states[1], &g, 1, &BTreeMap::from([(1, m1)])).unwrap();

        // Round 2: everything delivered.
        for i in 0..2 {
            robust_broadcast_phase(&mut states[i], &g, i);
        }
        let m0 = (states[0].sigma_y, states[0].sigma_z);
        let m1 = (states[1].sigma_y, states[1].sigma_z);
        assert_eq!(m0.0, 1.5);
        let slot = NodeState::rho_slot(&g, 1, 0).unwrap();
        let rho_before = states[1].rho_y[slot];
        robust_receive_phase(&mut states[0], &g, 0, &BTreeMap::from([(0, m0), (1, m1)])).unwrap();
        robust_receive_phase(&mut states[1], &g, 1, &BTreeMap::from([(0, m0), (1, m1)])).unwrap();

        // The increment from node 0 equals node 0's full sigma at k = 2.
        assert_eq!(states[1].rho_y[slot] - rho_before, 1.5);
        assert_eq!(states[0].y, 1.75);
        assert_eq!(states[1].y, 2.25);
        assert_eq!(states[0].y + states[1].y, 4.0);
    }

    #[test]
    fn receive_phase_with_only_self_and_no_mass() {
        let g = two_node();
        let mut state = NodeState::new(&g, 0, 0.0, 0.0);
        robust_broadcast_phase(&mut state, &g, 0);
        let m = (state.sigma_y, state.sigma_z);
        robust_receive_phase(&mut state, &g, 0, &BTreeMap::from([(0, m)])).unwrap();
        assert_eq!(state.y, 0.0);
    }

    #[test]
    fn delivery_from_stranger_is_a_fault() {
        let g = GraphSpec::ring(3, 0.5).unwrap();
        // Node 1's only in-neighbors are 0 and 1; node 2 is not among them.
        let mut state = NodeState::new(&g, 1, 1.0, 1.0);
        let deliveries = BTreeMap::from([(1, (0.5, 0.5)), (2, (0.5, 0.5))]);
        assert_eq!(
            robust_receive_phase(&mut state, &g, 1, &deliveries).unwrap_err(),
            ProtocolError::NotAnInNeighbor { from: 3, to: 2 }
        );
    }

    #[test]
    fn missing_self_delivery_is_a_fault() {
        let g = two_node();
        let mut state = NodeState::new(&g, 0, 1.0, 1.0);
        let deliveries = BTreeMap::from([(1, (0.5, 0.5))]);
        assert_eq!(
            robust_receive_phase(&mut state, &g, 0, &deliveries).unwrap_err(),
            ProtocolError::MissingSelfDelivery { node: 1 }
        );
    }

    #[test]
    fn estimate_gate_closed_on_zero_z() {
        let g = two_node();
        let mut state = NodeState::new(&g, 0, 1.0, 0.0);
        assert_eq!(compute_estimate(&mut state, &GatingPolicy::Positive, 0, 1), None);
        assert_eq!(state.estimate, None);
        assert!(state.update_times.is_empty());
    }

    #[test]
    fn estimate_gate_open_records_round() {
        let g = two_node();
        let mut state = NodeState::new(&g, 0, 2.0, 1.0);
        let policy = GatingPolicy::Threshold { mu: vec![0.1, 0.1] };
        assert_eq!(compute_estimate(&mut state, &policy, 0, 3), Some(2.0));
        assert_eq!(state.estimate, Some(2.0));
        assert_eq!(state.update_times, vec![3]);
    }

    #[test]
    fn estimate_holds_last_value_when_gate_closes() {
        let g = two_node();
        let mut state = NodeState::new(&g, 0, 2.0, 1.0);
        let policy = GatingPolicy::Threshold { mu: vec![0.5, 0.5] };
        compute_estimate(&mut state, &policy, 0, 1);
        state.z = 0.1;
        assert_eq!(compute_estimate(&mut state, &policy, 0, 2), None);
        assert_eq!(state.estimate, Some(2.0));
        assert_eq!(state.update_times, vec![1]);
    }

    /// Full perfect-link run on the two-node graph: the gated estimate is the
    /// target 2.0 at every round from k = 1 on.
    #[test]
    fn perfect_link_estimates_hit_target_immediately() {
        let g = two_node();
        let mut states = states_for(&g, &[1.0, 3.0], &[1.0, 1.0]);
        for k in 1..=10 {
            let mut messages = Vec::new();
            for i in 0..2 {
                messages.push(robust_broadcast_phase(&mut states[i], &g, i));
            }
            let all = BTreeMap::from([(0, messages[0]), (1, messages[1])]);
            for i in 0..2 {
                robust_receive_phase(&mut states[i], &g, i, &all).unwrap();
                assert_eq!(
                    compute_estimate(&mut states[i], &GatingPolicy::Positive, i, k),
                    Some(2.0)
                );
            }
        }
    }

    #[test]
    fn sigma_is_non_decreasing() {
        let g = two_node();
        let mut states = states_for(&g, &[1.0, 3.0], &[1.0, 1.0]);
        let mut last = [(0.0, 0.0); 2];
        for _ in 1..=20 {
            let mut messages = Vec::new();
            for i in 0..2 {
                messages.push(robust_broadcast_phase(&mut states[i], &g, i));
                assert!(messages[i].0 >= last[i].0 && messages[i].1 >= last[i].1);
                last[i] = messages[i];
            }
            // Only self-deliveries: the harshest mask.
            for i in 0..2 {
                let own = BTreeMap::from([(i, messages[i])]);
                robust_receive_phase(&mut states[i], &g, i, &own).unwrap();
            }
        }
    }

    #[test]
    fn mu_for_node_two_node_value() {
        let g = two_node();
        let mu = mu_for_node(&g, &[1.0, 1.0], 0, 0.5, 2).unwrap();
        assert_eq!(mu, 0.0625);
    }

    #[test]
    fn mu_for_node_rejects_zero_z0() {
        let g = two_node();
        assert_eq!(
            mu_for_node(&g, &[0.0, 1.0], 0, 0.5, 2).unwrap_err(),
            ProtocolError::ZeroInitialZ { node: 1 }
        );
    }

    #[test]
    fn mu_for_node_algebraic_identity() {
        let g = two_node();
        // c = 1, l = 1, z0 = n gives mu = 1.
        let n = (g.node_count() + g.non_self_edges().len()) as f64;
        assert_eq!(mu_for_node(&g, &[n, 1.0], 0, 1.0, 1).unwrap(), 1.0);
    }

    #[test]
    fn initial_conditions_validation() {
        assert!(InitialConditions::new(vec![1.0, 2.0], vec![1.0, 1.0]).is_ok());
        // Negative y0 is accepted (positive gating makes no claim about it).
        assert!(InitialConditions::new(vec![-1.0, 2.0], vec![1.0, 1.0]).is_ok());
        assert!(InitialConditions::new(vec![1.0], vec![1.0, 1.0]).is_err());
        assert!(InitialConditions::new(vec![1.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(InitialConditions::new(vec![1.0, 1.0], vec![-0.5, 1.0]).is_err());
        assert!(InitialConditions::new(vec![f64::NAN, 1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn gating_policy_validation() {
        assert!(GatingPolicy::Positive.validate(3).is_ok());
        assert!(GatingPolicy::Threshold { mu: vec![0.1; 3] }.validate(3).is_ok());
        assert!(GatingPolicy::Threshold { mu: vec![0.1; 2] }.validate(3).is_err());
        assert!(GatingPolicy::Threshold { mu: vec![0.0; 3] }.validate(3).is_err());
    }
}
