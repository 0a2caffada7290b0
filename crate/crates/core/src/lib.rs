//! # absnet
//!
//! Interference-avoiding formation of aerial base station (ABS) relay networks.
//!
//! The crate builds SIR-weighted capacity graphs from a probabilistic
//! air-to-ground / air-to-air channel, moves ABSs along the spatial gradient
//! of a weighted algebraic connectivity, and evaluates the result with
//! max-flow, concurrent-flow, distributed eigenvector and rotorcraft energy
//! models.
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`channel`] | LoS probability, path loss, channel gains |
//! | [`netgraph`] | SIR, smoothed collision penalty, capacity graph, Laplacians |
//! | [`spectral`] | Fiedler pairs, exact Cheeger constants, Cheeger bounds |
//! | [`flow`] | Max flow, multicast, max concurrent flow |
//! | [`distfiedler`] | Neighbor-only simulated Fiedler computation |
//! | [`mobility`] | Gradient of λ2, positioning loop, straight-line replay |
//! | [`energy`] | Rotary-wing power and trajectory energy |
//! | [`scenario`] | Config files, Monte-Carlo harness, CSV outputs |

pub mod channel;
pub mod distfiedler;
pub mod energy;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod mobility;
pub mod netgraph;
pub mod scenario;
pub mod spectral;

pub use error::{Error, Result};
pub use geometry::Position3;
