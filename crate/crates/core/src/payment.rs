//! Meter balance and the payment-amount mixture.
//!
//! All drivers on a block pay at one station. A paying driver pays right
//! after parking; the balance then decays one minute per minute and never
//! goes below zero.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterState {
    /// Paid minutes remaining just after the last payment.
    pub balance: f64,
    pub last_payment_time: f64,
}

impl MeterState {
    pub fn empty(origin: f64) -> Self {
        Self {
            balance: 0.0,
            last_payment_time: origin,
        }
    }
}

/// Law of the paid amount given the true parking time: zero with
/// probability `1 - compliance_prob`, otherwise exponential with mean
/// `amount_mean_scale * parking time`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaymentMixture {
    pub compliance_prob: f64,
    pub amount_mean_scale: f64,
}

impl PaymentMixture {
    pub fn new(compliance_prob: f64) -> Result<Self> {
        Self::with_scale(compliance_prob, 1.0)
    }

    pub fn with_scale(compliance_prob: f64, amount_mean_scale: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&compliance_prob) {
            return Err(invalid("compliance_prob", format!("{compliance_prob} outside [0, 1]")));
        }
        if !(amount_mean_scale > 0.0 && amount_mean_scale.is_finite()) {
            return Err(invalid("amount_mean_scale", "must be positive"));
        }
        Ok(Self {
            compliance_prob,
            amount_mean_scale,
        })
    }
}

/// Applies a payment of `paid` minutes made at `pay_time`.
pub fn update_meter(state: MeterState, paid: f64, pay_time: f64) -> Result<MeterState> {
    if pay_time < state.last_payment_time {
        return Err(Error::TimeOrder {
            time: pay_time,
            previous: state.last_payment_time,
        });
    }
    Ok(MeterState {
        balance: meter_balance(state, paid, pay_time),
        last_payment_time: pay_time,
    })
}

#[inline]
pub(crate) fn meter_balance(state: MeterState, paid: f64, pay_time: f64) -> f64 {
    (state.balance + paid - (pay_time - state.last_payment_time)).max(0.0)
}

pub fn sample_payment_amount<R: Rng + ?Sized>(
    true_duration: f64,
    mix: &PaymentMixture,
    rng: &mut R,
) -> Result<f64> {
    if !(true_duration > 0.0) {
        return Err(Error::NonPositiveDuration {
            what: "parking time",
            index: 0,
            value: true_duration,
        });
    }
    if !rng.random_bool(mix.compliance_prob) {
        return Ok(0.0);
    }
    let e: f64 = Exp1.sample(rng);
    Ok(mix.amount_mean_scale * true_duration * e)
}

/// Log density of a paid amount on the mixed measure: counting measure at
/// zero, Lebesgue measure on the positive half-line.
pub fn log_payment_density(amount: f64, true_duration: f64, mix: &PaymentMixture) -> f64 {
    if amount < 0.0 || !(true_duration > 0.0) {
        return f64::NEG_INFINITY;
    }
    if amount == 0.0 {
        return (1.0 - mix.compliance_prob).ln();
    }
    let mean = mix.amount_mean_scale * true_duration;
    mix.compliance_prob.ln() - mean.ln() - amount / mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn meter(balance: f64, t: f64) -> MeterState {
        MeterState {
            balance,
            last_payment_time: t,
        }
    }

    #[test]
    fn balance_recursion() {
        assert_eq!(update_meter(meter(3.0, 0.0), 2.0, 4.0).unwrap().balance, 1.0);
        assert_eq!(update_meter(meter(1.0, 0.0), 0.5, 4.0).unwrap().balance, 0.0);
        let same_time = update_meter(meter(1.5, 2.0), 2.25, 2.0).unwrap();
        assert_eq!(same_time.balance, 3.75);
        assert!(matches!(
            update_meter(meter(0.0, 5.0), 1.0, 4.0),
            Err(Error::TimeOrder { .. })
        ));
    }

    #[test]
    fn zero_payment_never_increases_balance() {
        let mut state = meter(10.0, 0.0);
        for t in [0.5, 1.0, 4.0, 20.0] {
            let next = update_meter(state, 0.0, t).unwrap();
            assert!(next.balance <= state.balance && next.balance >= 0.0);
            state = next;
        }
    }

    #[test]
    fn density_cases() {
        let mix = PaymentMixture::new(0.8).unwrap();
        assert!((log_payment_density(0.0, 5.0, &mix) - 0.2f64.ln()).abs() < 1e-15);
        let full = PaymentMixture::new(1.0).unwrap();
        let expected = ((-1.0f64).exp() / 5.0).ln();
        assert!((log_payment_density(5.0, 5.0, &full) - expected).abs() < 1e-15);
        assert_eq!(log_payment_density(0.0, 5.0, &full), f64::NEG_INFINITY);
    }

    #[test]
    fn noncompliant_drivers_pay_nothing() {
        let mix = PaymentMixture::new(0.0).unwrap();
        let mut rng = stream_rng(3, 0, 0);
        for _ in 0..1000 {
            assert_eq!(sample_payment_amount(5.0, &mix, &mut rng).unwrap(), 0.0);
        }
        assert!(sample_payment_amount(0.0, &mix, &mut rng).is_err());
        assert!(PaymentMixture::new(1.2).is_err());
    }

    #[test]
    fn payment_moments() {
        let n = 100_000;
        let mut rng = stream_rng(4, 0, 0);
        let full = PaymentMixture::new(1.0).unwrap();
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_payment_amount(5.0, &full, &mut rng).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        // exponential with mean 5 has standard deviation 5
        assert!((mean - 5.0).abs() < 3.0 * 5.0 / (n as f64).sqrt(), "{mean}");

        let partial = PaymentMixture::new(0.8).unwrap();
        let zeros = (0..n)
            .filter(|_| sample_payment_amount(5.0, &partial, &mut rng).unwrap() == 0.0)
            .count();
        let frac = zeros as f64 / n as f64;
        let se = (0.2f64 * 0.8 / n as f64).sqrt();
        assert!((frac - 0.2).abs() < 3.0 * se, "{frac}");
    }
}
