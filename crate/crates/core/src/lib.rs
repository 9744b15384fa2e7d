// SPDX-License-Identifier: Apache-2.0
//! Stochastic impulse methods for stiff Langevin and Hamiltonian systems.

pub mod cli;
pub mod diagnostics;
pub mod fastflow;
pub mod integrators;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod parallel;
pub mod plot;
pub mod problems;
pub mod quadrature;
