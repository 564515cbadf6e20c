//! Robust ratio consensus over lossy broadcast networks.
//!
//! Nodes on a strongly connected directed graph compute the ratio of two
//! parallel linear iterations to agree on `sum(y0) / sum(z0)` - the average
//! of their initial values in the all-ones-`z0` case. Links drop packets
//! independently with known probabilities; instead of acknowledgements, every
//! node broadcasts its *cumulative* outgoing mass and differences out the
//! per-sender received totals, so a recovering link delivers its backlog and
//! no mass is ever lost.
//!
//! The crate provides:
//!
//! * [`graph`] - validated directed graphs and the augmented index space of
//!   computing nodes plus one virtual buffer per link;
//! * [`protocol`] - the per-node state machine: ideal and robust updates,
//!   and the gated ratio estimate;
//! * [`sim`] - a deterministic, seeded, synchronous-round engine with full
//!   traces and CSV export;
//! * [`markov`] - the equivalent linear view: each round is a row-stochastic
//!   transition matrix on the augmented state determined by that round's
//!   drop mask, so a whole run is a forward matrix product;
//! * [`ergodicity`] - coefficients of ergodicity, scrambling detection, and
//!   the derived constants that certify geometric convergence;
//! * [`mc`] - deterministic Monte Carlo batches validating the probabilistic
//!   convergence bound empirically.

pub mod ergodicity;
pub mod graph;
pub mod markov;
pub mod mc;
pub mod numfmt;
pub mod protocol;
pub mod sim;
