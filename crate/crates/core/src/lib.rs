//! Cooperative vision-based vehicle localization under a communication budget.
//!
//! Vehicles photograph a shared set of feature points and measure pairwise
//! ranges; every scalar measurement is quantized before transmission. This
//! crate computes the relative squared position error bound (the trace of
//! the Cramér–Rao bound with global translation projected out) as a function
//! of the per-measurement bit allocation, and searches for allocations that
//! minimize it under a total bit budget.
//!
//! Module map:
//!
//! - [`scene`]: vehicles, feature points, intrinsics, scenario generators.
//! - [`measurement`]: projection and range models, the probabilistic
//!   quantizer, effective noise variance, observation simulation.
//! - [`fisher`]: bit-allocation layout, Fisher information assembly, the
//!   translation-free basis, the relative bound and its gradient.
//! - [`alloc`]: uniform, variance-based gradient descent, decoupled row and
//!   column optimization, simulated annealing, discretization.
//! - [`validate`]: Monte Carlo harness comparing least-squares estimates to
//!   the bound.

pub mod alloc;
pub mod error;
pub mod fisher;
pub mod measurement;
pub mod scene;
pub mod validate;

pub use error::{Error, Result};
pub use fisher::{BitAllocation, Layout, SpebEvaluator};
pub use scene::Scenario;
