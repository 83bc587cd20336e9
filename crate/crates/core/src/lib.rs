//! Monte Carlo toolkit for order-preserving random dynamical systems.
//!
//! The crate provides reproducible driving noise ([`noise`]), discrete 1-D
//! Dirichlet calculus ([`grid`]), the pointwise and dual partial orders
//! ([`orders`]), six order-preserving cocycles ([`engines`]) and the
//! statistics used to observe weak synchronization by noise
//! ([`diagnostics`]).

pub mod diagnostics;
pub mod engines;
pub mod grid;
pub mod noise;
pub mod orders;
pub mod rng;

pub use engines::{CocycleEngine, EngineConfig, EngineError, EngineKind, State, StateOrder};
pub use grid::{GridFunction, GridSpec, Norm};
pub use noise::{NoiseKind, NoisePath, QSpec};
pub use orders::{Interval, OrderKind, OrderRelation};
