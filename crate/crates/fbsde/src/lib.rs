//! Discrete-time approximation of decoupled forward-backward SDEs with a
//! single jump time.
//!
//! The forward component follows
//!
//! ```text
//! X_t = x + ∫ b(s, X_s) ds + ∫ σ(s, X_s) dW_s + ∫ β(s, X_{s-}) dH_s
//! ```
//!
//! where `H_t = 1_{τ ≤ t}` for a random time τ with deterministic density,
//! and the backward component `(Y, Z, U)` has terminal condition `g(X_T)`
//! and a generator that is Lipschitz or quadratic in `z`.
//!
//! Rather than discretising in the enlarged filtration directly, the solver
//! splits the problem into a pre-jump Brownian chain `X⁰` and a family of
//! post-jump branches `X¹(θ_j)` (one per grid date), solves a Brownian BSDE
//! backward along every branch, and feeds the branch values started at their
//! own jump date (the "diagonal") into the generator of the pre-jump
//! backward equation. The global processes are then recombined from the two
//! parts using the jump-time indicators.
//!
//! Conditional expectations are realised by least-squares regression on the
//! Markov state of the relevant chain. Everything is deterministic for a
//! fixed seed: per-path RNG substreams, fixed-chunk reductions and a
//! sequential second regression stage make results independent of the number
//! of worker threads.

pub mod backward;
pub mod cli;
pub mod condexp;
pub mod config;
pub mod error;
pub mod forward;
pub mod harness;
pub mod model;
pub mod recombine;
pub mod timegrid;
pub mod util;

pub use error::{Error, Result};
pub use timegrid::TimeGrid;
