//! Traffic-engineering lab: learn intradomain routing from demand history.
//!
//! The pipeline is demand generation ([`demand`]), an LP oracle for the
//! optimal max-link-utilisation ([`lp`]), softmin translation of edge weights
//! into loop-free routings ([`softmin`]), a small reverse-mode neural network
//! library with graph-network blocks ([`nn`]), three policy architectures
//! ([`policy`]), a step-based environment ([`env`]) and a PPO trainer
//! ([`trainer`]).
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what training uses.

// `!(x > 0)` is the NaN-rejecting form of every positivity check here.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demand;
pub mod env;
pub mod graph;
pub mod lp;
pub mod nn;
pub mod policy;
pub mod scalar;
pub mod softmin;
pub mod topology;
pub mod trainer;

pub use scalar::Scalar;

pub type Network = graph::Network<f64>;
pub type Routing = graph::Routing<f64>;
pub type LinkLoadReport = graph::LinkLoadReport<f64>;
pub type Flow = graph::Flow<f64>;
pub type DemandMatrix = demand::DemandMatrix<f64>;
pub type DemandSequence = demand::DemandSequence<f64>;
pub type LpSolution = lp::LpSolution<f64>;
pub type EdgeWeights = softmin::EdgeWeights<f64>;
pub type FlowDag = softmin::FlowDag<f64>;
pub type Topology = topology::Topology<f64>;

pub type Network32 = graph::Network<f32>;
pub type DemandMatrix32 = demand::DemandMatrix<f32>;
pub type Matrix = nn::Matrix<f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type GnGraph = nn::GnGraph<f64>;
