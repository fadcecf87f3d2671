//! Duration distributions for inter-arrival and parking times.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

/// A positive-duration density with a sampler.
pub trait DurationDensity {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;
    /// Natural log of the density; `-inf` outside the support.
    fn ln_pdf(&self, x: f64) -> f64;
    fn mean(&self) -> f64;
}

/// Family of a duration law. The mean is supplied separately from the
/// model parameters (arrival rate or mean parking time).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LawFamily {
    #[default]
    Exponential,
    /// Log-normal with the given log-scale standard deviation.
    LogNormal { log_sd: f64 },
}

impl LawFamily {
    pub fn with_mean(self, mean: f64) -> DurationLaw {
        DurationLaw { family: self, mean }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DurationLaw {
    pub family: LawFamily,
    pub mean: f64,
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl DurationDensity for DurationLaw {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            LawFamily::Exponential => {
                let e: f64 = Exp1.sample(rng);
                self.mean * e
            }
            LawFamily::LogNormal { log_sd } => {
                let z: f64 = StandardNormal.sample(rng);
                let mu = self.mean.ln() - 0.5 * log_sd * log_sd;
                (mu + log_sd * z).exp()
            }
        }
    }

    fn ln_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self.family {
            LawFamily::Exponential => -self.mean.ln() - x / self.mean,
            LawFamily::LogNormal { log_sd } => {
                let mu = self.mean.ln() - 0.5 * log_sd * log_sd;
                let z = (x.ln() - mu) / log_sd;
                -0.5 * z * z - x.ln() - log_sd.ln() - LN_SQRT_2PI
            }
        }
    }

    fn mean(&self) -> f64 {
        self.mean
    }
}
