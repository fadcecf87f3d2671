//! Parking occupancy from meter payments.
//!
//! A block of parking spaces is modelled as a first-come-first-served
//! multi-server queue whose only observations are payments at the block's
//! meter: the payment time and the balance left on the meter. An ABC
//! particle filter estimates the hidden arrivals, parking and search times
//! between payments; particle marginal Metropolis-Hastings adds inference of
//! the arrival rate, mean parking time and payment compliance.

pub mod data_io;
pub mod error;
pub mod estimators;
pub mod filter;
pub mod law;
pub mod params;
pub mod pmmh;
pub mod payment;
pub mod queue;
pub mod rng;
pub mod state;

pub use error::{Error, Result};
pub use filter::{run_filter, AbcConfig, FilterResult, Observation, Resampling};
pub use params::ModelParams;
pub use payment::{MeterState, PaymentMixture};
pub use queue::{Arrival, QueuePrimitives, SamplePath};
pub use state::Particle;
