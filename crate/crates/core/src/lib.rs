#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod agent;
pub mod backtest;
pub mod data;
pub mod env;
pub mod error;
pub mod features;
pub mod fmt;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod sim;

pub use error::{Error, ErrorClass, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/simulation.md")]
    struct Simulation;
    #[doc = include_str!("../../../book/src/features.md")]
    struct Features;
    #[doc = include_str!("../../../book/src/environment.md")]
    struct Environment;
    #[doc = include_str!("../../../book/src/network.md")]
    struct Network;
    #[doc = include_str!("../../../book/src/agent.md")]
    struct Agent;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/backtest.md")]
    struct Backtest;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
