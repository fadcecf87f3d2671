//! Particle marginal Metropolis-Hastings over `(lambda, mean_parking, p)`.
//!
//! Each iteration proposes parameters by a Gaussian random walk on
//! `(ln lambda, ln mean_parking, logit p)`, runs the ABC filter at the
//! proposal and accepts the pair (parameters, one trajectory drawn from the
//! filter) with the usual pseudo-marginal ratio. The walk covariance is
//! adapted from the chain history once enough states are available.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{invalid, Error, Result};
use crate::filter::{run_filter, AbcConfig, Observation};
use crate::law::LawFamily;
use crate::params::ModelParams;
use crate::queue::SamplePath;
use crate::rng::{derive_seed, stream_rng};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Chain states needed before the proposal covariance is adapted.
pub const ADAPT_AFTER: usize = 50;
const ADAPT_JITTER: f64 = 1e-6;
const START_ATTEMPTS: u64 = 100;

/// Prior of one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    LogNormal { median: f64, log_sd: f64 },
    Beta { a: f64, b: f64 },
    /// Constant density on the natural support. Improper for the positive
    /// parameters, uniform on `(0, 1)` for the compliance.
    Flat,
    /// Held at this value and never proposed.
    Fixed { value: f64 },
}

impl PriorSpec {
    fn is_fixed(&self) -> bool {
        matches!(self, PriorSpec::Fixed { .. })
    }

    fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            PriorSpec::LogNormal { median, log_sd } => {
                if !(x > 0.0) {
                    return f64::NEG_INFINITY;
                }
                let z = (x.ln() - median.ln()) / log_sd;
                -x.ln() - log_sd.ln() - LN_SQRT_2PI - 0.5 * z * z
            }
            PriorSpec::Beta { a, b } => {
                if !(x > 0.0 && x < 1.0) {
                    return f64::NEG_INFINITY;
                }
                (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)
            }
            PriorSpec::Flat => 0.0,
            PriorSpec::Fixed { value } => {
                if x == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    fn validate(&self, field: &'static str, unit_interval: bool) -> Result<()> {
        match *self {
            PriorSpec::LogNormal { median, log_sd } => {
                if unit_interval {
                    return Err(invalid(field, "log-normal prior does not fit a probability"));
                }
                if !(median > 0.0 && median.is_finite() && log_sd > 0.0 && log_sd.is_finite()) {
                    return Err(invalid(field, "log-normal prior needs positive median and log_sd"));
                }
            }
            PriorSpec::Beta { a, b } => {
                if !unit_interval {
                    return Err(invalid(field, "beta prior only fits a probability"));
                }
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    return Err(invalid(field, "beta prior needs positive shapes"));
                }
            }
            PriorSpec::Flat => {}
            PriorSpec::Fixed { value } => {
                let ok = if unit_interval {
                    value > 0.0 && value <= 1.0
                } else {
                    value > 0.0 && value.is_finite()
                };
                if !ok {
                    return Err(invalid(field, format!("fixed value {value} out of range")));
                }
            }
        }
        Ok(())
    }
}

/// Independent priors on the three parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Prior {
    pub lambda: PriorSpec,
    pub mean_parking: PriorSpec,
    pub compliance: PriorSpec,
}

impl Default for Prior {
    fn default() -> Self {
        Self {
            lambda: PriorSpec::LogNormal {
                median: 1.0,
                log_sd: 1.0,
            },
            mean_parking: PriorSpec::LogNormal {
                median: 10.0,
                log_sd: 1.0,
            },
            compliance: PriorSpec::Beta { a: 2.0, b: 2.0 },
        }
    }
}

impl Prior {
    /// The default priors with the compliance held at 1.
    pub fn full_compliance() -> Self {
        Self {
            compliance: PriorSpec::Fixed { value: 1.0 },
            ..Self::default()
        }
    }

    fn specs(&self) -> [PriorSpec; 3] {
        [self.lambda, self.mean_parking, self.compliance]
    }

    pub fn validate(&self) -> Result<()> {
        self.lambda.validate("prior.lambda", false)?;
        self.mean_parking.validate("prior.mean_parking", false)?;
        self.compliance.validate("prior.compliance", true)
    }

    /// Log prior density of `(lambda, mean_parking, compliance)`.
    pub fn ln_density(&self, theta: [f64; 3]) -> f64 {
        self.specs().iter().zip(theta).map(|(s, x)| s.ln_pdf(x)).sum()
    }

    /// A draw from the prior. Fails for improper components.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[f64; 3]> {
        let mut out = [0.0; 3];
        for (i, spec) in self.specs().iter().enumerate() {
            out[i] = match *spec {
                PriorSpec::LogNormal { median, log_sd } => LogNormal::new(median.ln(), log_sd)
                    .map_err(|e| invalid("prior", e.to_string()))?
                    .sample(rng),
                PriorSpec::Beta { a, b } => {
                    // Keep the draw strictly inside (0, 1) for the logit walk.
                    let x: f64 = Beta::new(a, b).map_err(|e| invalid("prior", e.to_string()))?.sample(rng);
                    x.clamp(1e-12, 1.0 - 1e-12)
                }
                PriorSpec::Flat if i == 2 => rng.random_range(1e-12..1.0 - 1e-12),
                PriorSpec::Flat => {
                    return Err(invalid(
                        "start",
                        "cannot draw from a flat prior on a positive parameter; give an explicit start",
                    ))
                }
                PriorSpec::Fixed { value } => value,
            };
        }
        Ok(out)
    }

    /// Indices of the parameters that are proposed.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..3).filter(|&i| !self.specs()[i].is_fixed()).collect()
    }
}

/// Parts of the model that are not inferred.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockModel {
    pub spaces: usize,
    pub arrival_law: LawFamily,
    pub service_law: LawFamily,
    pub payment_scale: f64,
}

impl Default for BlockModel {
    fn default() -> Self {
        Self {
            spaces: 7,
            arrival_law: LawFamily::Exponential,
            service_law: LawFamily::Exponential,
            payment_scale: 1.0,
        }
    }
}

impl BlockModel {
    pub fn params(&self, theta: [f64; 3]) -> Result<ModelParams> {
        let params = ModelParams {
            lambda: theta[0],
            mean_parking: theta[1],
            compliance: theta[2],
            spaces: self.spaces,
            arrival_law: self.arrival_law,
            service_law: self.service_law,
            payment_scale: self.payment_scale,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmmhConfig {
    pub num_accepts_burn_in: usize,
    pub num_accepts_post: usize,
    /// Proposals made at most, whatever the acceptance count.
    pub max_iterations: usize,
    pub prior: Prior,
    /// Random-walk standard deviations on the transformed scale.
    pub proposal_init_scale: [f64; 3],
    pub adapt: bool,
    pub filter: AbcConfig,
    pub model: BlockModel,
    /// Explicit `(lambda, mean_parking, compliance)` start instead of a prior draw.
    pub start: Option<[f64; 3]>,
    /// Prior draws screened for the start; the chain begins at the one
    /// with the highest likelihood estimate times prior density.
    pub start_candidates: usize,
    /// Time of the empty block the filter starts from.
    pub origin: f64,
    pub seed: u64,
}

impl Default for PmmhConfig {
    fn default() -> Self {
        Self {
            num_accepts_burn_in: 200,
            num_accepts_post: 3800,
            max_iterations: 100_000,
            prior: Prior::default(),
            proposal_init_scale: [0.1, 0.1, 0.3],
            adapt: true,
            filter: AbcConfig::default(),
            model: BlockModel::default(),
            start: None,
            start_candidates: 16,
            origin: 0.0,
            seed: 0,
        }
    }
}

impl PmmhConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_accepts_burn_in == 0 || self.num_accepts_post == 0 {
            return Err(invalid("num_accepts", "burn-in and post counts must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be positive"));
        }
        if self.start_candidates == 0 {
            return Err(invalid("start_candidates", "must be positive"));
        }
        if self.proposal_init_scale.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("proposal_init_scale", "scales must be finite and non-negative"));
        }
        self.prior.validate()?;
        self.filter.validate()?;
        if let Some(start) = self.start {
            let params = self.model.params(start)?;
            if !self.prior.compliance.is_fixed() && params.compliance >= 1.0 {
                return Err(invalid("start", "a free compliance must start below 1"));
            }
            if self.prior.ln_density(start) == f64::NEG_INFINITY {
                return Err(invalid("start", "outside the prior support"));
            }
        } else {
            self.model.params([1.0, 1.0, 0.5])?;
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn transform(theta: [f64; 3], i: usize) -> f64 {
    if i == 2 {
        logit(theta[2])
    } else {
        theta[i].ln()
    }
}

fn untransform(z: f64, i: usize) -> f64 {
    if i == 2 {
        expit(z)
    } else {
        z.exp()
    }
}

/// Log Jacobian `ln |d theta / d z|` summed over the free parameters.
fn ln_jacobian(theta: [f64; 3], free: &[usize]) -> f64 {
    free.iter()
        .map(|&i| {
            if i == 2 {
                theta[2].ln() + (1.0 - theta[2]).ln()
            } else {
                theta[i].ln()
            }
        })
        .sum()
}

fn as_array(params: &ModelParams) -> [f64; 3] {
    [params.lambda, params.mean_parking, params.compliance]
}

/// Running mean and covariance of the transformed chain states.
#[derive(Clone, Debug)]
pub struct ChainHistory {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl ChainHistory {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn push(&mut self, z: &DVector<f64>) {
        self.count += 1;
        let delta = z - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta_after = z - &self.mean;
        self.scatter += &delta * delta_after.transpose();
    }

    /// Sample covariance; `None` with fewer than two states.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.count >= 2).then(|| &self.scatter / (self.count - 1) as f64)
    }
}

fn proposal_covariance(history: &ChainHistory, cfg: &PmmhConfig, free: &[usize]) -> DMatrix<f64> {
    let d = free.len();
    if cfg.adapt && history.len() >= ADAPT_AFTER {
        if let Some(cov) = history.covariance() {
            return cov * (2.38 * 2.38 / d as f64) + DMatrix::identity(d, d) * ADAPT_JITTER;
        }
    }
    DMatrix::from_diagonal(&DVector::from_iterator(
        d,
        free.iter().map(|&i| cfg.proposal_init_scale[i].powi(2)),
    ))
}

/// Random-walk proposal on the transformed scale. Fixed parameters are
/// copied from `current`.
pub fn propose_params<R: Rng + ?Sized>(
    current: &ModelParams,
    history: &ChainHistory,
    cfg: &PmmhConfig,
    rng: &mut R,
) -> ModelParams {
    let free = cfg.prior.free_indices();
    let mut next = *current;
    if free.is_empty() {
        return next;
    }
    let cov = proposal_covariance(history, cfg, &free);
    let noise = DVector::from_iterator(free.len(), (0..free.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let step = match Cholesky::new(cov.clone()) {
        Some(chol) => chol.l() * noise,
        // Zero scales leave a singular diagonal.
        None => DVector::from_iterator(
            free.len(),
            (0..free.len()).map(|j| cov[(j, j)].max(0.0).sqrt() * noise[j]),
        ),
    };
    let theta = as_array(current);
    let mut out = theta;
    for (j, &i) in free.iter().enumerate() {
        if step[j] != 0.0 {
            out[i] = untransform(transform(theta, i) + step[j], i);
        }
    }
    next.lambda = out[0];
    next.mean_parking = out[1];
    next.compliance = out[2];
    next
}

/// Log of the Metropolis-Hastings acceptance probability. The walk is
/// symmetric on the transformed scale, so only the Jacobian terms of the
/// transform remain from the proposal ratio.
pub fn acceptance_log_ratio(
    prop_loglik: f64,
    cur_loglik: f64,
    prop: &ModelParams,
    cur: &ModelParams,
    prior: &Prior,
) -> f64 {
    if prop_loglik == f64::NEG_INFINITY || prop_loglik.is_nan() {
        return f64::NEG_INFINITY;
    }
    let free = prior.free_indices();
    let (p, c) = (as_array(prop), as_array(cur));
    let prior_p = prior.ln_density(p);
    if prior_p == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let ratio = prop_loglik - cur_loglik + prior_p - prior.ln_density(c) + ln_jacobian(p, &free) - ln_jacobian(c, &free);
    ratio.min(0.0)
}

/// Per-step diagnostics of the filter run behind a chain state.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterTrace {
    pub step_log_increments: Vec<f64>,
    pub ess_history: Vec<f64>,
    pub num_particles: usize,
    pub num_pseudo_obs: usize,
}

/// One chain state. Rejections repeat the previous state's parameters,
/// trajectory and likelihood; `accepted` tells them apart.
#[derive(Clone, Debug)]
pub struct PosteriorSample {
    pub theta: ModelParams,
    pub trajectory: Arc<SamplePath>,
    pub log_likelihood: f64,
    pub iteration: usize,
    pub accepted: bool,
    pub burn_in: bool,
    pub filter: Arc<FilterTrace>,
}

/// Chain returned by [`run_pmmh`]. Iteration 0 is the starting state.
#[derive(Clone, Debug)]
pub struct Chain {
    pub samples: Vec<PosteriorSample>,
    /// Log-likelihoods of every proposal, `-inf` where the filter degenerated.
    pub proposal_log_likelihoods: Vec<f64>,
}

impl Chain {
    pub fn post_burn_in(&self) -> impl Iterator<Item = &PosteriorSample> {
        self.samples.iter().filter(|s| !s.burn_in)
    }

    pub fn num_accepted(&self) -> usize {
        self.samples.iter().filter(|s| s.accepted).count()
    }

    /// Fraction of post-burn-in iterations that accepted.
    pub fn acceptance_rate_post(&self) -> f64 {
        let (n, a) = self
            .post_burn_in()
            .fold((0usize, 0usize), |(n, a), s| (n + 1, a + s.accepted as usize));
        if n == 0 {
            0.0
        } else {
            a as f64 / n as f64
        }
    }

    /// Post-burn-in parameter draws as `[lambda, mean_parking, compliance]`.
    pub fn post_parameters(&self) -> Vec<[f64; 3]> {
        self.post_burn_in().map(|s| as_array(&s.theta)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_chain_csv(&self.samples, writer)
    }
}

fn filter_state(
    observations: &[Observation],
    params: &ModelParams,
    cfg: &PmmhConfig,
    seed: u64,
) -> Result<Option<(f64, Arc<SamplePath>, Arc<FilterTrace>)>> {
    let result = match run_filter(observations, params, &cfg.filter, cfg.origin, seed) {
        Ok(r) => r,
        Err(Error::Degenerate { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut rng = stream_rng(seed, u64::MAX, u64::MAX);
    let trajectory = Arc::new(result.sample_trajectory(&mut rng));
    let trace = Arc::new(FilterTrace {
        step_log_increments: result.step_log_increments,
        ess_history: result.ess_history,
        num_particles: cfg.filter.num_particles,
        num_pseudo_obs: cfg.filter.num_pseudo_obs,
    });
    Ok(Some((result.log_likelihood, trajectory, trace)))
}

fn transformed(theta: &ModelParams, free: &[usize]) -> DVector<f64> {
    let t = as_array(theta);
    DVector::from_iterator(free.len(), free.iter().map(|&i| transform(t, i)))
}

/// Runs the chain until the requested acceptances or the iteration cap.
pub fn run_pmmh(observations: &[Observation], cfg: &PmmhConfig) -> Result<Chain> {
    cfg.validate()?;
    if observations.is_empty() {
        return Err(Error::Empty("observations"));
    }
    let free = cfg.prior.free_indices();
    let chain_seed = derive_seed(cfg.seed, 0x9a1e);
    let filter_seed = |iteration: usize| derive_seed(cfg.seed, iteration as u64 + 1);

    // Starting state: the explicit start, or the best of several prior
    // draws on which the filter survives the whole batch.
    let mut start: Option<(ModelParams, (f64, Arc<SamplePath>, Arc<FilterTrace>))> = None;
    let mut survivors = 0;
    for attempt in 0..START_ATTEMPTS {
        let theta = match cfg.start {
            Some(s) => s,
            None => cfg.prior.sample(&mut stream_rng(chain_seed, 0, attempt))?,
        };
        let params = cfg.model.params(theta)?;
        if let Some(state) = filter_state(observations, &params, cfg, filter_seed(0) ^ attempt)? {
            let score = |p: &ModelParams, ll: f64| ll + cfg.prior.ln_density(as_array(p));
            if start.as_ref().is_none_or(|(p, s)| score(&params, state.0) > score(p, s.0)) {
                start = Some((params, state));
            }
            survivors += 1;
        }
        if cfg.start.is_some() || survivors == cfg.start_candidates {
            break;
        }
    }
    let (mut params, (mut loglik, mut trajectory, mut trace)) = start.ok_or(Error::Degenerate { step: 0 })?;

    let target = cfg.num_accepts_burn_in + cfg.num_accepts_post;
    let mut accepts = 0usize;
    let mut history = ChainHistory::new(free.len());
    history.push(&transformed(&params, &free));
    let mut samples = vec![PosteriorSample {
        theta: params,
        trajectory: trajectory.clone(),
        log_likelihood: loglik,
        iteration: 0,
        accepted: false,
        burn_in: true,
        filter: trace.clone(),
    }];
    let mut proposal_log_likelihoods = Vec::new();

    for iteration in 1..=cfg.max_iterations {
        if accepts >= target {
            break;
        }
        let mut rng = stream_rng(chain_seed, iteration as u64, 0);
        let proposal = propose_params(&params, &history, cfg, &mut rng);
        let u: f64 = rng.random();
        let state = filter_state(observations, &proposal, cfg, filter_seed(iteration))?;
        let prop_loglik = state.as_ref().map_or(f64::NEG_INFINITY, |s| s.0);
        proposal_log_likelihoods.push(prop_loglik);
        let log_alpha = acceptance_log_ratio(prop_loglik, loglik, &proposal, &params, &cfg.prior);
        let accepted = u.ln() < log_alpha;
        if accepted {
            let (l, t, f) = state.expect("finite likelihood implies a state");
            params = proposal;
            loglik = l;
            trajectory = t;
            trace = f;
            accepts += 1;
        }
        let burn_in = accepts < cfg.num_accepts_burn_in || (accepted && accepts == cfg.num_accepts_burn_in);
        history.push(&transformed(&params, &free));
        samples.push(PosteriorSample {
            theta: params,
            trajectory: trajectory.clone(),
            log_likelihood: loglik,
            iteration,
            accepted,
            burn_in,
            filter: trace.clone(),
        });
        log::debug!("iteration {iteration}: log_lik {prop_loglik:.3}, accepted {accepted}, total {accepts}");
    }
    if accepts == 0 {
        return Err(Error::NoAcceptance {
            iterations: cfg.max_iterations,
        });
    }
    Ok(Chain {
        samples,
        proposal_log_likelihoods,
    })
}

/// Post-burn-in state with the largest likelihood estimate, earliest first
/// on ties.
pub fn map_estimate(samples: &[PosteriorSample]) -> Result<&PosteriorSample> {
    let mut best: Option<&PosteriorSample> = None;
    for s in samples.iter().filter(|s| !s.burn_in) {
        if best.is_none_or(|b| s.log_likelihood > b.log_likelihood) {
            best = Some(s);
        }
    }
    best.ok_or(Error::Empty("no post-burn-in samples"))
}

pub fn write_chain_csv<W: Write>(samples: &[PosteriorSample], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iter", "accepted", "lambda", "mean_parking", "p", "log_lik"])?;
    for s in samples {
        w.write_record([
            s.iteration.to_string(),
            (s.accepted as u8).to_string(),
            format!("{:.9}", s.theta.lambda),
            format!("{:.9}", s.theta.mean_parking),
            format!("{:.9}", s.theta.compliance),
            format!("{:.6}", s.log_likelihood),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of a chain CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainRow {
    pub iteration: usize,
    pub accepted: bool,
    pub theta: [f64; 3],
    pub log_likelihood: f64,
}

pub fn read_chain_csv<R: std::io::Read>(reader: R) -> Result<Vec<ChainRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| invalid("chain", format!("row {} is short", line + 2)))
        };
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .trim()
                .parse::<f64>()
                .map_err(|e| invalid("chain", format!("row {}: {e}", line + 2)))
        };
        rows.push(ChainRow {
            iteration: field(0)?
                .trim()
                .parse()
                .map_err(|e| invalid("chain", format!("row {}: {e}", line + 2)))?,
            accepted: field(1)?.trim() == "1",
            theta: [num(2)?, num(3)?, num(4)?],
            log_likelihood: num(5)?,
        });
    }
    Ok(rows)
}
