//! Simulator for federated learning across devices of two capacities.
//!
//! Simple devices train a small network. Complex devices train a larger one
//! whose parameter vector contains the small network as a fixed coordinate
//! subset `M`, so a single server can keep both models consistent: the small
//! model is read out of the large one, averaged together with the small
//! uploads, and written back.
//!
//! Three training methods are available through [`config::Method`]:
//!
//! * `fedhen`: complex devices also minimize the loss of the embedded small
//!   model on every batch, and the server shares `M` between both models.
//! * `noside`: the same shared server step without the extra loss term.
//! * `decouple`: two independent federated averages.
//!
//! ```
//! use fedhen::config::parse_config;
//! use fedhen::sim::{load_data, run_experiment};
//!
//! let cfg = parse_config(
//!     "rounds = 2\nn_devices = 4\nn_train = 200\nn_test = 50\nparticipation_rate = 0.5",
//! )?;
//! let (train, test) = load_data(&cfg)?;
//! let records = run_experiment(&cfg, &train, &test)?;
//! assert_eq!(records.len(), 3);
//! # Ok::<(), fedhen::Error>(())
//! ```

pub mod checkpoint;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod server;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/nested-architectures.md")]
    mod nested_architectures {}
    #[doc = include_str!("../../../book/src/local-training.md")]
    mod local_training {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/partitioning.md")]
    mod partitioning {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/gradient-check.md")]
    mod gradient_check {}
}
