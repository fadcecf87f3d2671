//! Particle filter with kernel-smoothed (ABC) observation weights.
//!
//! Each step propagates every particle to its next payment, simulates `H`
//! pseudo payments from the particle, scores the observed payment with a
//! product Gaussian kernel around them and resamples when the effective
//! sample size drops below a threshold. The running product of the mean
//! incremental weights is the likelihood estimate used by PMMH.
//!
//! Particle histories are stored as a genealogy (per-step ancestor indices
//! and the drivers added at that step) and only expanded into full sample
//! paths on request.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::law::DurationDensity;
use crate::params::ModelParams;
use crate::payment::{meter_balance, MeterState};
use crate::queue::{Arrival, QueueFrontier, SamplePath};
use crate::rng::stream_rng;
use crate::state::{sample_arrival_increment, Particle};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Time-kernel log factor below which the balance kernel is not evaluated.
const SKIP_NATS: f64 = 100.0;
/// Log weight gap below which a particle's contribution is dropped.
const NEGLIGIBLE_NATS: f64 = 60.0;

#[derive(Clone, Copy, Debug)]
enum Weight {
    Exact(f64),
    /// Upper bound on a log weight that was not computed.
    Bound(f64),
}

/// One payment: its time and the balance left on the meter right after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pay_time: f64,
    pub meter_balance: f64,
}

impl Observation {
    pub fn new(pay_time: f64, meter_balance: f64) -> Self {
        Self {
            pay_time,
            meter_balance,
        }
    }
}

/// Checks a batch: non-negative balances and strictly increasing times.
pub fn validate_observations(observations: &[Observation]) -> Result<()> {
    let mut previous = f64::NEG_INFINITY;
    for obs in observations {
        if !(obs.meter_balance >= 0.0) {
            return Err(invalid("meter_balance", format!("negative balance {}", obs.meter_balance)));
        }
        if !(obs.pay_time > previous) {
            return Err(Error::TimeOrder {
                time: obs.pay_time,
                previous,
            });
        }
        previous = obs.pay_time;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbcConfig {
    pub num_particles: usize,
    /// Pseudo payments simulated per particle and step.
    pub num_pseudo_obs: usize,
    /// Multiplier `c` of the bandwidth schedule.
    pub kernel_bandwidth_const: f64,
    /// Resample when ESS falls below this fraction of the particle count.
    pub ess_threshold: f64,
    /// Fixed `(time, balance)` bandwidths in minutes.
    pub bandwidth_override: Option<[f64; 2]>,
    /// Bandwidth of the payment-time kernel and lower bound of the balance
    /// bandwidth, in minutes. Defaults to the observation window / 1000.
    pub bandwidth_floor: Option<f64>,
    pub resampling: Resampling,
}

impl Default for AbcConfig {
    fn default() -> Self {
        Self {
            num_particles: 20_000,
            num_pseudo_obs: 64,
            kernel_bandwidth_const: 0.25,
            ess_threshold: 0.5,
            bandwidth_override: None,
            bandwidth_floor: None,
            resampling: Resampling::Multinomial,
        }
    }
}

impl AbcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_particles == 0 {
            return Err(invalid("num_particles", "must be positive"));
        }
        if self.num_particles > u32::MAX as usize {
            return Err(invalid("num_particles", "too large"));
        }
        if self.num_pseudo_obs == 0 {
            return Err(invalid("num_pseudo_obs", "must be positive"));
        }
        if !(self.kernel_bandwidth_const > 0.0) {
            return Err(invalid("kernel_bandwidth_const", "must be positive"));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            return Err(invalid("ess_threshold", "must lie in (0, 1]"));
        }
        if let Some([a, b]) = self.bandwidth_override {
            if !(a > 0.0 && b > 0.0) {
                return Err(invalid("bandwidth_override", "bandwidths must be positive"));
            }
        }
        if let Some(floor) = self.bandwidth_floor {
            if !(floor > 0.0) {
                return Err(invalid("bandwidth_floor", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Bandwidth shrinkage factor `(ln H / H)^(1/5)`.
pub fn bandwidth_schedule(h: usize) -> f64 {
    let h = h as f64;
    (h.ln() / h).max(0.0).powf(0.2)
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n < 2 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Per-dimension bandwidths `max(c * sd * (ln H / H)^(1/5), floor)`.
pub fn select_bandwidth(pseudo: &[Observation], cfg: &AbcConfig, floor: f64) -> [f64; 2] {
    if let Some(fixed) = cfg.bandwidth_override {
        return fixed;
    }
    let scale = cfg.kernel_bandwidth_const * bandwidth_schedule(pseudo.len());
    let tau = std_dev(pseudo.iter().map(|o| o.pay_time));
    let m = std_dev(pseudo.iter().map(|o| o.meter_balance));
    [(tau * scale).max(floor), (m * scale).max(floor)]
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log of the product-Gaussian kernel density estimate of `observed`
/// built from the pseudo observations.
pub fn abc_log_weight(observed: &Observation, pseudo: &[Observation], bandwidth: [f64; 2]) -> f64 {
    if pseudo.is_empty() {
        return f64::NEG_INFINITY;
    }
    let [e_tau, e_m] = bandwidth;
    let terms = pseudo.iter().map(|p| {
        let zt = (observed.pay_time - p.pay_time) / e_tau;
        let zm = (observed.meter_balance - p.meter_balance) / e_m;
        -0.5 * (zt * zt + zm * zm)
    });
    log_sum_exp(terms) - (pseudo.len() as f64).ln() - e_tau.ln() - e_m.ln() - LN_2PI
}

/// Specialization of [`abc_log_weight`] for pseudo payments sharing one
/// payment time, which is always the case for pseudo payments simulated
/// from a single particle.
fn abc_log_weight_shared_time(observed: &Observation, pay_time: f64, balances: &[f64], bandwidth: [f64; 2]) -> f64 {
    let [e_tau, e_m] = bandwidth;
    let zt = (observed.pay_time - pay_time) / e_tau;
    let terms = balances.iter().map(|&b| {
        let zm = (observed.meter_balance - b) / e_m;
        -0.5 * zm * zm
    });
    -0.5 * zt * zt + log_sum_exp(terms) - (balances.len() as f64).ln() - e_tau.ln() - e_m.ln() - LN_2PI
}

/// Draws the paid amount of the payer (conditioned nonzero) and applies it
/// to the meter, `h` times.
fn fill_pseudo_balances<R: Rng + ?Sized>(
    meter: MeterState,
    payer: &Arrival,
    params: &ModelParams,
    h: usize,
    rng: &mut R,
    out: &mut Vec<f64>,
) {
    let mean = params.payment_scale * payer.service_time();
    out.clear();
    out.extend((0..h).map(|_| {
        let e: f64 = Exp1.sample(rng);
        meter_balance(meter, mean * e, payer.service_start)
    }));
}

/// `h` pseudo payments of the particle's newest driver, who is the payer.
/// They share the payer's service start as their payment time.
pub fn simulate_pseudo_observations<R: Rng + ?Sized>(
    particle: &Particle,
    params: &ModelParams,
    h: usize,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    if h == 0 {
        return Err(invalid("num_pseudo_obs", "must be positive"));
    }
    let payer = particle.path.arrivals().last().ok_or(Error::Empty("particle has no drivers"))?;
    let mut balances = Vec::with_capacity(h);
    fill_pseudo_balances(particle.meter, payer, params, h, rng, &mut balances);
    Ok(balances
        .into_iter()
        .map(|m| Observation::new(payer.service_start, m))
        .collect())
}

/// `1 / sum(W^2)` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Unnormalized { sum });
    }
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

/// `n` ancestor indices drawn from normalized weights.
pub fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    n: usize,
    scheme: Resampling,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Unnormalized { sum });
    }
    match scheme {
        Resampling::Multinomial => {
            let dist = WeightedIndex::new(weights).map_err(|_| Error::Unnormalized { sum })?;
            Ok((0..n).map(|_| dist.sample(rng)).collect())
        }
        Resampling::Systematic => {
            let offset: f64 = rng.random();
            let mut out = Vec::with_capacity(n);
            let mut cumulative = weights[0] / sum;
            let mut j = 0;
            for i in 0..n {
                let u = (i as f64 + offset) / n as f64;
                while u > cumulative && j + 1 < weights.len() {
                    j += 1;
                    cumulative += weights[j] / sum;
                }
                out.push(j);
            }
            Ok(out)
        }
    }
}

/// Multinomial resampling of a weighted particle set (log weights must be
/// normalized). Output weights are uniform.
pub fn resample_multinomial<R: Rng + ?Sized>(particles: &[Particle], rng: &mut R) -> Result<Vec<Particle>> {
    let weights: Vec<f64> = particles.iter().map(|p| p.log_weight.exp()).collect();
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Unnormalized { sum });
    }
    let uniform = -(particles.len() as f64).ln();
    Ok(resample_indices(&weights, particles.len(), Resampling::Multinomial, rng)?
        .into_iter()
        .map(|i| {
            let mut p = particles[i].clone();
            p.log_weight = uniform;
            p
        })
        .collect())
}

#[derive(Clone, Debug)]
struct Live {
    frontier: QueueFrontier,
    meter: MeterState,
    num_arrivals: usize,
}

#[derive(Clone, Debug)]
struct StepRecord {
    parents: Vec<u32>,
    offsets: Vec<u32>,
    arrivals: Vec<Arrival>,
    log_weights: Vec<f64>,
    occupancy: Vec<u16>,
}

/// Output of [`run_filter`].
#[derive(Clone, Debug)]
pub struct FilterResult {
    /// Log of the likelihood estimate.
    pub log_likelihood: f64,
    /// Log of the per-step mean incremental weight; sums to `log_likelihood`.
    pub step_log_increments: Vec<f64>,
    /// ESS after weighting at each step, before any resampling.
    pub ess_history: Vec<f64>,
    pub resampled: Vec<bool>,
    num_particles: usize,
    origin: f64,
    spaces: usize,
    steps: Vec<StepRecord>,
    final_meters: Vec<MeterState>,
}

impl FilterResult {
    pub fn num_particles(&self) -> usize {
        self.num_particles
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Normalized final weights.
    pub fn final_weights(&self) -> Vec<f64> {
        match self.steps.last() {
            Some(step) => step.log_weights.iter().map(|w| w.exp()).collect(),
            None => vec![1.0 / self.num_particles as f64; self.num_particles],
        }
    }

    /// Full history of final particle `index`.
    pub fn trajectory(&self, index: usize) -> SamplePath {
        let mut chunks: Vec<&[Arrival]> = Vec::with_capacity(self.steps.len());
        let mut idx = index;
        for step in self.steps.iter().rev() {
            chunks.push(&step.arrivals[step.offsets[idx] as usize..step.offsets[idx + 1] as usize]);
            idx = step.parents[idx] as usize;
        }
        let mut path = SamplePath::empty(self.spaces, self.origin);
        for chunk in chunks.into_iter().rev() {
            path.extend_from_slice(chunk);
        }
        path
    }

    pub fn trajectories(&self) -> Vec<SamplePath> {
        (0..self.num_particles).map(|i| self.trajectory(i)).collect()
    }

    /// Final particles as full states with their log weights.
    pub fn particles(&self) -> Vec<Particle> {
        let weights = self.final_weights();
        (0..self.num_particles)
            .map(|i| Particle::from_path(self.trajectory(i), self.final_meters[i], weights[i].ln()))
            .collect()
    }

    /// One trajectory drawn according to the final weights.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> SamplePath {
        let weights = self.final_weights();
        let index = WeightedIndex::new(&weights).map(|d| d.sample(rng)).unwrap_or(0);
        self.trajectory(index)
    }

    /// Occupancy of every particle right after its own `step`-th payment
    /// (0-based), with the normalized log weights of that step.
    pub fn step_occupancy(&self, step: usize) -> (&[u16], &[f64]) {
        let record = &self.steps[step];
        (&record.occupancy, &record.log_weights)
    }
}

/// Runs the filter over `observations` at fixed parameters, starting from
/// an empty block at `origin`.
pub fn run_filter(
    observations: &[Observation],
    params: &ModelParams,
    cfg: &AbcConfig,
    origin: f64,
    seed: u64,
) -> Result<FilterResult> {
    params.validate()?;
    cfg.validate()?;
    validate_observations(observations)?;
    if let Some(first) = observations.first() {
        if first.pay_time < origin {
            return Err(Error::TimeOrder {
                time: first.pay_time,
                previous: origin,
            });
        }
    }

    let n = cfg.num_particles;
    let h = cfg.num_pseudo_obs;
    let floor = cfg.bandwidth_floor.unwrap_or_else(|| {
        let window = observations.last().map(|o| o.pay_time - origin).unwrap_or(0.0);
        if window > 0.0 {
            window / 1000.0
        } else {
            1e-3
        }
    });
    let schedule = bandwidth_schedule(h);
    let arrival_law = params.arrival();
    let service_law = params.service();
    let uniform = -(n as f64).ln();
    let (tau_bandwidth, min_balance_bandwidth) = match cfg.bandwidth_override {
        Some([t, m]) => (t, m),
        None => (floor, floor),
    };
    let balance_scale = cfg.kernel_bandwidth_const * schedule;

    let mut live = vec![
        Live {
            frontier: QueueFrontier::new(params.spaces, origin),
            meter: MeterState::empty(origin),
            num_arrivals: 0,
        };
        n
    ];
    let mut parents: Vec<u32> = (0..n as u32).collect();
    let mut prior_log_weights = vec![uniform; n];
    let mut steps = Vec::with_capacity(observations.len());
    let mut step_log_increments = Vec::with_capacity(observations.len());
    let mut ess_history = Vec::with_capacity(observations.len());
    let mut resampled = Vec::with_capacity(observations.len());

    for (k, obs) in observations.iter().enumerate() {
        let step = k as u64 + 1;
        let propagate = |balances: &mut Vec<f64>, i: usize, parent: u32, full: bool| {
            let mut rng = stream_rng(seed, step, i as u64);
            let mut state = live[parent as usize].clone();
            let increment = sample_arrival_increment(params.compliance, &mut rng).expect("compliance validated");
            let mut added: SmallVec<[Arrival; 2]> = SmallVec::with_capacity(increment);
            for _ in 0..increment {
                let alpha = arrival_law.sample(&mut rng);
                let nu = service_law.sample(&mut rng);
                added.push(state.frontier.admit(alpha, nu));
            }
            state.num_arrivals += increment;
            let payer = *added.last().expect("increment is at least one");
            let zt = (obs.pay_time - payer.service_start) / tau_bandwidth;
            let time_term = -0.5 * zt * zt;
            let weight = if !full && time_term < -SKIP_NATS {
                Weight::Bound(time_term - tau_bandwidth.ln() - min_balance_bandwidth.ln() - LN_2PI)
            } else {
                fill_pseudo_balances(state.meter, &payer, params, h, &mut rng, balances);
                let bandwidth = match cfg.bandwidth_override {
                    Some(fixed) => fixed,
                    None => {
                        let sd = std_dev(balances.iter().copied());
                        [tau_bandwidth, (sd * balance_scale).max(floor)]
                    }
                };
                Weight::Exact(abc_log_weight_shared_time(obs, payer.service_start, balances, bandwidth))
            };
            state.meter = MeterState {
                balance: obs.meter_balance,
                last_payment_time: payer.service_start,
            };
            let occupied = state.frontier.occupied_after(payer.service_start) as u16;
            (state, added, weight, occupied)
        };
        let mut propagated: Vec<_> = parents
            .par_iter()
            .enumerate()
            .map_init(|| Vec::with_capacity(h), |balances, (i, &parent)| propagate(balances, i, parent, false))
            .collect();

        // Particles whose payment time is far from the observed one were not
        // scored. Score them after all if they could still matter.
        let best_exact = propagated
            .iter()
            .zip(&prior_log_weights)
            .filter_map(|(p, prior)| match p.2 {
                Weight::Exact(w) => Some(prior + w),
                Weight::Bound(_) => None,
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let best_bound = propagated
            .iter()
            .zip(&prior_log_weights)
            .filter_map(|(p, prior)| match p.2 {
                Weight::Bound(w) => Some(prior + w),
                Weight::Exact(_) => None,
            })
            .fold(f64::NEG_INFINITY, f64::max);
        if best_bound > best_exact - NEGLIGIBLE_NATS {
            let rescored: Vec<_> = propagated
                .par_iter()
                .enumerate()
                .filter(|(_, p)| matches!(p.2, Weight::Bound(_)))
                .map_init(
                    || Vec::with_capacity(h),
                    |balances, (i, _)| (i, propagate(balances, i, parents[i], true)),
                )
                .collect();
            for (i, p) in rescored {
                propagated[i] = p;
            }
        }

        let mut offsets = Vec::with_capacity(n + 1);
        let mut arrivals = Vec::with_capacity(propagated.iter().map(|p| p.1.len()).sum());
        let mut log_weights = Vec::with_capacity(n);
        let mut occupancy = Vec::with_capacity(n);
        let mut next_live = Vec::with_capacity(n);
        offsets.push(0u32);
        for (i, (state, added, weight, occupied)) in propagated.into_iter().enumerate() {
            arrivals.extend_from_slice(&added);
            offsets.push(arrivals.len() as u32);
            let log_g = match weight {
                Weight::Exact(w) => w,
                Weight::Bound(_) => f64::NEG_INFINITY,
            };
            log_weights.push(prior_log_weights[i] + log_g);
            occupancy.push(occupied);
            next_live.push(state);
        }
        live = next_live;

        let increment = log_sum_exp(log_weights.iter().copied());
        if !increment.is_finite() {
            return Err(Error::Degenerate { step: k + 1 });
        }
        for w in &mut log_weights {
            *w -= increment;
        }
        let weights: Vec<f64> = log_weights.iter().map(|w| w.exp()).collect();
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        step_log_increments.push(increment);
        ess_history.push(ess);

        let record_parents = std::mem::take(&mut parents);
        let resample = ess < cfg.ess_threshold * n as f64 && k + 1 < observations.len();
        if resample {
            let mut rng = stream_rng(seed, step, u64::MAX);
            parents = resample_indices(&weights, n, cfg.resampling, &mut rng)?
                .into_iter()
                .map(|i| i as u32)
                .collect();
            prior_log_weights.fill(uniform);
        } else {
            parents = (0..n as u32).collect();
            prior_log_weights.copy_from_slice(&log_weights);
        }
        resampled.push(resample);
        steps.push(StepRecord {
            parents: record_parents,
            offsets,
            arrivals,
            log_weights,
            occupancy,
        });
    }

    Ok(FilterResult {
        log_likelihood: step_log_increments.iter().sum(),
        step_log_increments,
        ess_history,
        resampled,
        num_particles: n,
        origin,
        spaces: params.spaces,
        steps,
        final_meters: live.into_iter().map(|l| l.meter).collect(),
    })
}
