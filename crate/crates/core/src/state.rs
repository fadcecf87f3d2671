//! Hidden state between payments.
//!
//! The state after the k-th payment is the number of drivers that have
//! arrived so far together with their queueing quantities. Between two
//! payments a geometric number of non-paying drivers arrives, followed by
//! the driver who makes the k-th payment.

use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{invalid, Result};
use crate::law::DurationDensity;
use crate::params::ModelParams;
use crate::payment::MeterState;
use crate::queue::{QueueFrontier, SamplePath};

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    pub path: SamplePath,
    pub meter: MeterState,
    pub log_weight: f64,
    frontier: QueueFrontier,
}

impl Particle {
    pub fn num_arrivals(&self) -> usize {
        self.path.len()
    }

    pub fn frontier(&self) -> &QueueFrontier {
        &self.frontier
    }

    /// Wraps an existing path; the recursion state is recomputed from it.
    pub fn from_path(path: SamplePath, meter: MeterState, log_weight: f64) -> Self {
        let frontier = path.frontier();
        Self {
            path,
            meter,
            log_weight,
            frontier,
        }
    }
}

/// Empty block at `origin` with an empty meter.
pub fn init_particle(params: &ModelParams, origin: f64) -> Particle {
    Particle {
        path: SamplePath::empty(params.spaces, origin),
        meter: MeterState::empty(origin),
        log_weight: 0.0,
        frontier: QueueFrontier::new(params.spaces, origin),
    }
}

/// Number of drivers arriving up to and including the next payer:
/// `1 + G` where `G` counts non-payers, geometric with success
/// probability `compliance`.
pub fn sample_arrival_increment<R: Rng + ?Sized>(compliance: f64, rng: &mut R) -> Result<usize> {
    let geometric = Geometric::new(compliance)
        .map_err(|_| invalid("compliance", format!("must lie in (0, 1], got {compliance}")))?;
    if compliance == 0.0 {
        return Err(invalid("compliance", "payments never occur at zero compliance"));
    }
    Ok(1 + geometric.sample(rng) as usize)
}

/// Samples the state at the next payment. The meter is left unchanged;
/// it is set from the observation.
pub fn transition<R: Rng + ?Sized>(prev: &Particle, params: &ModelParams, rng: &mut R) -> Result<Particle> {
    let increment = sample_arrival_increment(params.compliance, rng)?;
    let arrival = params.arrival();
    let service = params.service();
    let mut next = prev.clone();
    for _ in 0..increment {
        let alpha = arrival.sample(rng);
        let nu = service.sample(rng);
        let a = next.frontier.admit(alpha, nu);
        next.path.push(a);
    }
    Ok(next)
}

/// Log of the transition density: geometric mass of the arrival count
/// times the densities of the new primitives. `-inf` if `next` is not an
/// extension of `prev` under the queue recursion.
pub fn log_transition_density(prev: &Particle, next: &Particle, params: &ModelParams) -> f64 {
    let old = prev.path.arrivals();
    let new = next.path.arrivals();
    if new.len() <= old.len()
        || next.path.num_spaces() != prev.path.num_spaces()
        || next.path.origin() != prev.path.origin()
        || &new[..old.len()] != old
    {
        return f64::NEG_INFINITY;
    }
    let increment = new.len() - old.len();
    let mut total = params.compliance.ln();
    if increment > 1 {
        total += (increment - 1) as f64 * (1.0 - params.compliance).ln();
    }
    let arrival = params.arrival();
    let service = params.service();
    let mut frontier = prev.path.frontier();
    for a in &new[old.len()..] {
        let alpha = a.arrival - frontier.last_arrival();
        let nu = a.departure - a.service_start;
        if frontier.admit(alpha, nu) != *a {
            return f64::NEG_INFINITY;
        }
        total += arrival.ln_pdf(alpha) + service.ln_pdf(nu);
    }
    total
}
