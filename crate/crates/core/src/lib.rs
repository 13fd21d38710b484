//! Hamiltonian networks trained with the one-step integrator as an explicit
//! loss hyper-parameter, together with the tools to check what such networks
//! actually converge to: inverse-modified Hamiltonians, integrator order and
//! symplecticity probes, and the experiment pipelines that tie them together.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod ime;
pub mod integrators;
pub mod loss;
pub mod net;
pub mod optim;
pub mod phase;
pub mod stats;

pub use error::{Error, Result};
pub use integrators::{Method, SolverConfig};
pub use net::{Activation, NetArchitecture, NetParameters, ScalarNet};
pub use phase::{AnalyticSystem, CanonicalField, Hamiltonian, PhaseState, Trajectory, VectorField};
