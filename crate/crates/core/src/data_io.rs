//! Payment logs, sensor snapshots and synthetic scenarios.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use chrono::{NaiveDateTime, NaiveTime, Timelike};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result, RowError};
use crate::estimators::{uniform_grid, GroundTruth};
use crate::filter::Observation;
use crate::params::ModelParams;
use crate::payment::{sample_payment_amount, update_meter, MeterState, PaymentMixture};
use crate::queue::{QueueFrontier, SamplePath};
use crate::law::DurationDensity;
use crate::rng::stream_rng;

const MAX_REPORTED_ERRORS: usize = 10;
const DATETIME_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// Default epoch for converting wall-clock times to minutes.
pub fn default_epoch() -> NaiveDateTime {
    NaiveDateTime::parse_from_str("2012-01-01T00:00:00", "%Y-%m-%dT%H:%M:%S").expect("valid literal")
}

pub fn parse_datetime(text: &str) -> Option<NaiveDateTime> {
    let text = text.trim();
    DATETIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(text, f).ok())
}

pub fn format_datetime(t: &NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S%.f").to_string()
}

pub fn datetime_to_minutes(epoch: &NaiveDateTime, t: &NaiveDateTime) -> f64 {
    let delta = *t - *epoch;
    delta.num_microseconds().map(|us| us as f64 / 60e6).unwrap_or(delta.num_seconds() as f64 / 60.0)
}

pub fn minutes_to_datetime(epoch: &NaiveDateTime, minutes: f64) -> NaiveDateTime {
    *epoch + chrono::Duration::microseconds((minutes * 60e6).round() as i64)
}

/// One raw transaction.
#[derive(Clone, Debug, PartialEq)]
pub struct PaymentRecord {
    pub block_id: String,
    pub timestamp: NaiveDateTime,
    /// Dollars, or minutes with [`AmountUnit::Minutes`].
    pub amount: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedPayments {
    /// Sorted by block, then time; ties keep file order.
    pub records: Vec<PaymentRecord>,
    pub duplicates_removed: usize,
}

fn collect_or_fail<T>(items: Vec<T>, errors: Vec<RowError>) -> Result<Vec<T>> {
    if errors.is_empty() {
        Ok(items)
    } else {
        Err(Error::Rows(errors.into_iter().take(MAX_REPORTED_ERRORS).collect()))
    }
}

fn row_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Reads `block_id,date,amount` rows.
pub fn parse_payments<R: Read>(reader: R) -> Result<ParsedPayments> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["block_id", "date", "amount"] {
        return Err(invalid("header", format!("expected block_id,date,amount, got {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for row in csv.records() {
        let row = row?;
        let line = row_line(&row);
        let fail = |message: String| RowError { line, message };
        let timestamp = match parse_datetime(&row[1]) {
            Some(t) => t,
            None => {
                errors.push(fail(format!("unparseable date `{}`", &row[1])));
                continue;
            }
        };
        match row[2].parse::<f64>() {
            Ok(amount) if amount >= 0.0 && amount.is_finite() => records.push(PaymentRecord {
                block_id: row[0].to_string(),
                timestamp,
                amount,
            }),
            _ => errors.push(fail(format!("invalid amount `{}`", &row[2]))),
        }
    }
    let mut records = collect_or_fail(records, errors)?;
    records.sort_by(|a, b| a.block_id.cmp(&b.block_id).then(a.timestamp.cmp(&b.timestamp)));
    let before = records.len();
    let mut seen = HashSet::new();
    records.retain(|r| seen.insert((r.block_id.clone(), r.timestamp, r.amount.to_bits())));
    Ok(ParsedPayments {
        duplicates_removed: before - records.len(),
        records,
    })
}

pub fn write_payments<W: Write>(writer: W, records: &[PaymentRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["block_id", "date", "amount"])?;
    for r in records {
        out.write_record([r.block_id.clone(), format_datetime(&r.timestamp), r.amount.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmountUnit {
    #[default]
    Dollars,
    Minutes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateWindow {
    pub start: NaiveTime,
    pub end: NaiveTime,
    pub price_per_hour: f64,
}

/// Hourly prices per block and time of day.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub blocks: BTreeMap<String, Vec<RateWindow>>,
}

impl RateSchedule {
    pub fn new(blocks: BTreeMap<String, Vec<RateWindow>>) -> Result<Self> {
        for windows in blocks.values() {
            let mut sorted = windows.clone();
            sorted.sort_by_key(|w| w.start);
            for w in &sorted {
                if !(w.price_per_hour > 0.0) {
                    return Err(invalid("price_per_hour", "prices must be positive"));
                }
                if w.end <= w.start {
                    return Err(invalid("rate window", format!("{} does not end after it starts", w.start)));
                }
            }
            if sorted.windows(2).any(|p| p[1].start < p[0].end) {
                return Err(invalid("rate window", "windows overlap"));
            }
        }
        Ok(Self { blocks })
    }

    /// Single all-day price for one block.
    pub fn flat(block: &str, price_per_hour: f64) -> Result<Self> {
        let window = RateWindow {
            start: NaiveTime::MIN,
            end: NaiveTime::from_hms_nano_opt(23, 59, 59, 999_999_999).expect("valid time"),
            price_per_hour,
        };
        Self::new(BTreeMap::from([(block.to_string(), vec![window])]))
    }

    pub fn rate_at(&self, block: &str, t: &NaiveDateTime) -> Option<f64> {
        let time = t.time();
        self.blocks
            .get(block)?
            .iter()
            .find(|w| w.start <= time && (time < w.end || (w.end.hour() == 23 && time <= w.end)))
            .map(|w| w.price_per_hour)
    }
}

/// Observations of one block in a window, in minutes from the window start.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationBatch {
    pub window_start: NaiveDateTime,
    pub observations: Vec<Observation>,
    /// Paid minutes of each observation.
    pub paid_minutes: Vec<f64>,
    pub dropped_outside_window: usize,
    pub dropped_zero_amount: usize,
    pub perturbed: usize,
}

const SIMULTANEOUS_SHIFT_MIN: f64 = 1.0 / 60_000.0;

/// Converts a block's transactions in `[start, end)` to payment
/// observations, folding the meter balance from zero at the window start.
pub fn payments_to_observations(
    records: &[PaymentRecord],
    rates: &RateSchedule,
    block: &str,
    window: (NaiveDateTime, NaiveDateTime),
    unit: AmountUnit,
) -> Result<ObservationBatch> {
    let (start, end) = window;
    let mut meter = MeterState::empty(0.0);
    let mut batch = ObservationBatch {
        window_start: start,
        observations: Vec::new(),
        paid_minutes: Vec::new(),
        dropped_outside_window: 0,
        dropped_zero_amount: 0,
        perturbed: 0,
    };
    let mut last_time = f64::NEG_INFINITY;
    for r in records.iter().filter(|r| r.block_id == block) {
        if r.timestamp < start || r.timestamp >= end {
            batch.dropped_outside_window += 1;
            continue;
        }
        if r.amount == 0.0 {
            batch.dropped_zero_amount += 1;
            continue;
        }
        let paid = match unit {
            AmountUnit::Minutes => r.amount,
            AmountUnit::Dollars => {
                let rate = rates.rate_at(block, &r.timestamp).ok_or_else(|| Error::MissingRate {
                    time: format_datetime(&r.timestamp),
                })?;
                60.0 * r.amount / rate
            }
        };
        let mut t = datetime_to_minutes(&start, &r.timestamp);
        if t <= last_time {
            t = last_time + SIMULTANEOUS_SHIFT_MIN;
            batch.perturbed += 1;
            warn!("simultaneous payments on block {block} at {}; shifted by 1 ms", format_datetime(&r.timestamp));
        }
        meter = update_meter(meter, paid, t)?;
        batch.observations.push(Observation::new(t, meter.balance));
        batch.paid_minutes.push(paid);
        last_time = t;
    }
    Ok(batch)
}

pub fn write_observations<W: Write>(writer: W, observations: &[Observation]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["k", "pay_time", "meter_balance"])?;
    for (k, o) in observations.iter().enumerate() {
        out.write_record([(k + 1).to_string(), format!("{:.6}", o.pay_time), format!("{:.6}", o.meter_balance)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_observations<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    let mut csv = csv::Reader::from_reader(reader);
    for row in csv.records() {
        let row = row?;
        let line = row_line(&row);
        let parsed = row.deserialize::<(usize, f64, f64)>(None);
        match parsed {
            Ok((_, t, m)) if m >= 0.0 => out.push(Observation::new(t, m)),
            Ok(_) => errors.push(RowError { line, message: "negative meter balance".into() }),
            Err(e) => errors.push(RowError { line, message: e.to_string() }),
        }
    }
    let out = collect_or_fail(out, errors)?;
    crate::filter::validate_observations(&out)?;
    Ok(out)
}

/// Reads `block_id,time,occupied,capacity` rows, grouped by block.
pub fn parse_ground_truth<R: Read>(reader: R, epoch: &NaiveDateTime) -> Result<BTreeMap<String, GroundTruth>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["block_id", "time", "occupied", "capacity"] {
        return Err(invalid("header", "expected block_id,time,occupied,capacity"));
    }
    let mut rows: BTreeMap<String, Vec<(f64, u32, u32)>> = BTreeMap::new();
    let mut errors = Vec::new();
    for row in csv.records() {
        let row = row?;
        let line = row_line(&row);
        let fail = |message: String| RowError { line, message };
        let Some(t) = parse_datetime(&row[1]) else {
            errors.push(fail(format!("unparseable time `{}`", &row[1])));
            continue;
        };
        match (row[2].parse::<u32>(), row[3].parse::<u32>()) {
            (Ok(occ), Ok(cap)) if occ <= cap => rows
                .entry(row[0].to_string())
                .or_default()
                .push((datetime_to_minutes(epoch, &t), occ, cap)),
            (Ok(occ), Ok(cap)) => errors.push(fail(format!("occupied {occ} exceeds capacity {cap}"))),
            _ => errors.push(fail("occupied and capacity must be non-negative integers".into())),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Rows(errors.into_iter().take(MAX_REPORTED_ERRORS).collect()));
    }
    rows.into_iter()
        .map(|(block, mut snaps)| {
            snaps.sort_by(|a, b| a.0.total_cmp(&b.0));
            let truth = GroundTruth::new(
                snaps.iter().map(|s| s.0).collect(),
                snaps.iter().map(|s| s.1).collect(),
                snaps.iter().map(|s| s.2).collect(),
            )?;
            Ok((block, truth))
        })
        .collect()
}

pub fn write_ground_truth<W: Write>(writer: W, block: &str, truth: &GroundTruth, epoch: &NaiveDateTime) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["block_id", "time", "occupied", "capacity"])?;
    for i in 0..truth.len() {
        out.write_record([
            block.to_string(),
            format_datetime(&minutes_to_datetime(epoch, truth.snapshot_times[i])),
            truth.occupied[i].to_string(),
            truth.capacity[i].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Parameters of a synthetic validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub lambda: f64,
    pub mean_parking: f64,
    pub compliance: f64,
    pub spaces: usize,
    pub num_payments: usize,
    pub seed: u64,
    #[serde(default)]
    pub origin: f64,
}

impl Scenario {
    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::new(self.lambda, self.mean_parking, self.compliance, self.spaces)
    }

    pub fn validate(&self) -> Result<()> {
        self.params()?;
        if self.num_payments == 0 {
            return Err(invalid("num_payments", "must be at least 1"));
        }
        Ok(())
    }
}

pub const TRUTH_GRID_MIN: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedScenario {
    pub observations: Vec<Observation>,
    pub path: SamplePath,
    /// Paid minutes per driver (zero for non-payers).
    pub amounts: Vec<f64>,
    /// Occupancy every five minutes from the origin to the last payment.
    pub truth_grid: GroundTruth,
}

impl SimulatedScenario {
    /// Exact occupancy at the payment times.
    pub fn truth_at_payments(&self) -> GroundTruth {
        let times: Vec<f64> = self.observations.iter().map(|o| o.pay_time).collect();
        GroundTruth::from_path(&self.path, &times)
    }
}

/// Simulates the queue and payment process until `num_payments` nonzero
/// payments have been made.
pub fn generate_scenario(sc: &Scenario) -> Result<SimulatedScenario> {
    sc.validate()?;
    generate_with_params(&sc.params()?, sc.num_payments, sc.origin, sc.seed)
}

/// [`generate_scenario`] with explicit parameters (non-exponential laws,
/// payment scale).
pub fn generate_with_params(params: &ModelParams, num_payments: usize, origin: f64, seed: u64) -> Result<SimulatedScenario> {
    params.validate()?;
    let mut rng = stream_rng(seed, 0, 0);
    let mix = PaymentMixture::with_scale(params.compliance, params.payment_scale)?;
    let arrival_law = params.arrival();
    let service_law = params.service();
    let mut frontier = QueueFrontier::new(params.spaces, origin);
    let mut path = SamplePath::empty(params.spaces, origin);
    let mut meter = MeterState::empty(origin);
    let mut observations = Vec::with_capacity(num_payments);
    let mut amounts = Vec::new();
    while observations.len() < num_payments {
        let alpha = arrival_law.sample(&mut rng);
        let nu = service_law.sample(&mut rng);
        let driver = frontier.admit(alpha, nu);
        let paid = sample_payment_amount(nu, &mix, &mut rng)?;
        path.push(driver);
        amounts.push(paid);
        if paid > 0.0 {
            meter = update_meter(meter, paid, driver.service_start)?;
            observations.push(Observation::new(driver.service_start, meter.balance));
        }
    }
    let last = observations.last().map(|o| o.pay_time).unwrap_or(origin);
    let grid = uniform_grid(origin, last, TRUTH_GRID_MIN);
    Ok(SimulatedScenario {
        truth_grid: GroundTruth::from_path(&path, &grid),
        observations,
        path,
        amounts,
    })
}
