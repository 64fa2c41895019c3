//! Parallel MCMC for Dirichlet process mixtures of multinomials.
//!
//! The crate provides three families of samplers over a shared
//! Dirichlet-multinomial model:
//!
//! * [`serial`]: a collapsed sampler with `m` auxiliary empty features,
//!   whose empty features are refreshed from the prior or with a
//!   data-driven Metropolis-Hastings kernel ([`proposal`]);
//! * [`distributed`]: the two-stage parallel sampler, an approximate
//!   accelerated stage with local counts and data-driven features followed
//!   by an exact stage with instantiated mixing weights;
//! * the same distributed runtime with no accelerated stage, which is the
//!   plain uncollapsed baseline.
//!
//! [`data`] generates synthetic data and reads/writes count matrices,
//! [`metrics`] scores held-out data and writes traces, and [`cli`] wires it
//! all into the `accel-dpmm` binary.

pub mod cli;
pub mod config;
pub mod data;
pub mod distributed;
pub mod error;
pub mod init;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod proposal;
pub mod serial;
pub mod slots;
pub mod state;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{ClusterId, ClusterState, CountDataset, Theta};
pub use state::{GlobalState, RunOutput};
