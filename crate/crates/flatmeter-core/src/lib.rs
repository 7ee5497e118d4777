//! Flatness measures of neural-network loss surfaces that are invariant
//! under function-preserving reparameterizations of ReLU networks.
//!
//! The crate is organized around a small dense/matrix-free linear algebra
//! layer ([`numlin`]), a ReLU multilayer-perceptron engine with exact
//! Hessian-vector products ([`net`]), the flatness measures themselves
//! ([`flatness`]), function-preserving reparameterizations ([`reparam`]),
//! an SGD trainer ([`trainer`]), dataset and checkpoint handling ([`data`]),
//! experiment statistics ([`expstats`]), and brute-force verification
//! oracles ([`oracle`]).

pub mod data;
pub mod expstats;
pub mod flatness;
pub mod net;
pub mod numlin;
pub mod oracle;
pub mod reparam;
pub mod rng;
pub mod trainer;
