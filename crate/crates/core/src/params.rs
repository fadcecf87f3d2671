use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::law::{DurationLaw, LawFamily};

fn unit_scale() -> f64 {
    1.0
}

/// Model parameters: arrival rate, mean parking time, payment compliance and
/// the number of spaces on the block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Arrivals per minute.
    pub lambda: f64,
    /// Mean parking duration in minutes.
    pub mean_parking: f64,
    /// Probability that an arriving driver makes a nonzero payment.
    pub compliance: f64,
    pub spaces: usize,
    #[serde(default)]
    pub arrival_law: LawFamily,
    #[serde(default)]
    pub service_law: LawFamily,
    /// Paid time of a compliant driver has mean `payment_scale * parking time`.
    #[serde(default = "unit_scale")]
    pub payment_scale: f64,
}

impl ModelParams {
    pub fn new(lambda: f64, mean_parking: f64, compliance: f64, spaces: usize) -> Result<Self> {
        let params = Self {
            lambda,
            mean_parking,
            compliance,
            spaces,
            arrival_law: LawFamily::Exponential,
            service_law: LawFamily::Exponential,
            payment_scale: 1.0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be positive, got {}", self.lambda)));
        }
        if !(self.mean_parking > 0.0 && self.mean_parking.is_finite()) {
            return Err(invalid(
                "mean_parking",
                format!("must be positive, got {}", self.mean_parking),
            ));
        }
        if !(self.compliance > 0.0 && self.compliance <= 1.0) {
            return Err(invalid(
                "compliance",
                format!("must lie in (0, 1], got {}", self.compliance),
            ));
        }
        if self.spaces == 0 {
            return Err(invalid("spaces", "must be at least 1"));
        }
        if !(self.payment_scale > 0.0 && self.payment_scale.is_finite()) {
            return Err(invalid("payment_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn arrival(&self) -> DurationLaw {
        self.arrival_law.with_mean(1.0 / self.lambda)
    }

    pub fn service(&self) -> DurationLaw {
        self.service_law.with_mean(self.mean_parking)
    }
}
