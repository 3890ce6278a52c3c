//! Offline probabilistic design of a penalty-based stochastic MPC controller.
//!
//! The crate covers the full desk-scale workflow:
//!
//! 1. **Tightening** — draw disturbance scenarios, propagate the error
//!    dynamics `e⁺ = A_K e + ζ`, and turn order statistics of `C_K e` into
//!    per-step constraint tightenings `q_ℓ` with an explicit
//!    (ε, δ)-style guarantee ([`tightening`], [`probval`]).
//! 2. **Soft-constrained control** — a finite-horizon QP with the tightened
//!    constraints moved into an exact-penalty term `ρ‖η‖₁`, so the online
//!    problem is always feasible ([`smpc`], [`qpcore`]).
//! 3. **Validation** — Monte-Carlo closed-loop simulation over a grid of
//!    penalty factors, with the validated violation bound `γ(ρ)` computed as
//!    a discarded order statistic ([`closedloop`]).
//!
//! [`pipeline`] orchestrates the stages and persists JSON/CSV/SVG artifacts;
//! the `smpcval` binary is a thin CLI wrapper around it.

pub mod closedloop;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod probval;
pub mod qpcore;
pub mod smpc;
pub mod sysmodel;
pub mod tightening;
pub mod uncertainty;

pub use error::{Error, Result};
