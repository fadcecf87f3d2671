//! First-come-first-served multi-server sample paths.
//!
//! A block with `s` spaces is a GI/GI/s queue. The random primitives
//! (inter-arrival gaps and parking durations) are mapped to arrival,
//! service-start and departure times by the FCFS recursion: each driver is
//! assigned the space that frees earliest and starts parking at
//! `max(arrival, first free time)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::law::DurationDensity;
use crate::params::ModelParams;

/// Random inputs of the queue.
#[derive(Clone, Debug, PartialEq)]
pub struct QueuePrimitives {
    pub inter_arrivals: Vec<f64>,
    pub service_times: Vec<f64>,
    pub num_spaces: usize,
}

impl QueuePrimitives {
    pub fn new(inter_arrivals: Vec<f64>, service_times: Vec<f64>, num_spaces: usize) -> Result<Self> {
        let primitives = Self {
            inter_arrivals,
            service_times,
            num_spaces,
        };
        primitives.validate()?;
        Ok(primitives)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_spaces == 0 {
            return Err(invalid("num_spaces", "must be at least 1"));
        }
        if self.inter_arrivals.len() != self.service_times.len() {
            return Err(invalid(
                "service_times",
                format!(
                    "length {} differs from {} inter-arrival times",
                    self.service_times.len(),
                    self.inter_arrivals.len()
                ),
            ));
        }
        check_positive("inter-arrival time", &self.inter_arrivals)?;
        check_positive("service time", &self.service_times)
    }

    pub fn len(&self) -> usize {
        self.inter_arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inter_arrivals.is_empty()
    }
}

fn check_positive(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        Some(index) => Err(Error::NonPositiveDuration {
            what,
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Queueing quantities of one driver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub arrival: f64,
    /// First time any space becomes available to this driver.
    pub first_free: f64,
    pub service_start: f64,
    pub departure: f64,
    /// 1-based space index.
    pub space: usize,
}

impl Arrival {
    pub fn search_time(&self) -> f64 {
        self.service_start - self.arrival
    }

    pub fn service_time(&self) -> f64 {
        self.departure - self.service_start
    }

    pub fn is_parked_at(&self, t: f64) -> bool {
        self.service_start <= t && t < self.departure
    }

    pub fn is_searching_at(&self, t: f64) -> bool {
        self.arrival <= t && t < self.service_start
    }
}

/// Incremental state of the recursion: the last arrival time and, per
/// space, the departure of the last driver assigned to it.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueFrontier {
    last_arrival: f64,
    space_free: SmallVec<[f64; 8]>,
}

impl QueueFrontier {
    /// Empty block: all spaces available from `origin`.
    pub fn new(num_spaces: usize, origin: f64) -> Self {
        Self {
            last_arrival: origin,
            space_free: smallvec::smallvec![origin; num_spaces],
        }
    }

    pub fn num_spaces(&self) -> usize {
        self.space_free.len()
    }

    pub fn last_arrival(&self) -> f64 {
        self.last_arrival
    }

    /// Per-space release times.
    pub fn space_free(&self) -> &[f64] {
        &self.space_free
    }

    /// Admits the next driver. Inputs are not validated here.
    #[inline]
    pub fn admit(&mut self, inter_arrival: f64, service_time: f64) -> Arrival {
        let arrival = self.last_arrival + inter_arrival;
        let mut best = 0;
        let mut first_free = self.space_free[0];
        for (i, &free) in self.space_free.iter().enumerate().skip(1) {
            if free < first_free {
                first_free = free;
                best = i;
            }
        }
        let service_start = arrival.max(first_free);
        let departure = service_time + service_start;
        self.last_arrival = arrival;
        self.space_free[best] = departure;
        Arrival {
            arrival,
            first_free,
            service_start,
            departure,
            space: best + 1,
        }
    }

    /// Number of spaces still held at `t`, valid for any `t` no earlier
    /// than the latest service start.
    pub fn occupied_after(&self, t: f64) -> usize {
        self.space_free.iter().filter(|&&d| d > t).count()
    }
}

/// Output of the recursion for a sequence of drivers.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePath {
    origin: f64,
    num_spaces: usize,
    arrivals: Vec<Arrival>,
}

impl SamplePath {
    pub fn empty(num_spaces: usize, origin: f64) -> Self {
        Self {
            origin,
            num_spaces,
            arrivals: Vec::new(),
        }
    }

    /// Validates the path invariants and wraps the records.
    pub fn from_arrivals(num_spaces: usize, origin: f64, arrivals: Vec<Arrival>) -> Result<Self> {
        if num_spaces == 0 {
            return Err(invalid("num_spaces", "must be at least 1"));
        }
        let mut previous = origin;
        let mut space_free = vec![origin; num_spaces];
        for (index, a) in arrivals.iter().enumerate() {
            let bad = |reason: String| Error::InvalidPath { index, reason };
            if !(a.arrival > previous) {
                return Err(bad(format!("arrival {} not after {}", a.arrival, previous)));
            }
            if !(a.arrival <= a.service_start && a.service_start <= a.departure) {
                return Err(bad("requires arrival <= service start <= departure".into()));
            }
            if a.space == 0 || a.space > num_spaces {
                return Err(bad(format!("space {} outside 1..={}", a.space, num_spaces)));
            }
            if a.service_start < space_free[a.space - 1] {
                return Err(bad(format!("space {} is still occupied", a.space)));
            }
            space_free[a.space - 1] = a.departure;
            previous = a.arrival;
        }
        Ok(Self {
            origin,
            num_spaces,
            arrivals,
        })
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn num_spaces(&self) -> usize {
        self.num_spaces
    }

    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }

    pub fn arrivals(&self) -> &[Arrival] {
        &self.arrivals
    }

    pub fn arrival_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.arrivals.iter().map(|a| a.arrival)
    }

    pub fn service_starts(&self) -> impl Iterator<Item = f64> + '_ {
        self.arrivals.iter().map(|a| a.service_start)
    }

    pub fn departures(&self) -> impl Iterator<Item = f64> + '_ {
        self.arrivals.iter().map(|a| a.departure)
    }

    /// Recursion state after the last recorded driver.
    pub fn frontier(&self) -> QueueFrontier {
        let mut frontier = QueueFrontier::new(self.num_spaces, self.origin);
        for a in &self.arrivals {
            frontier.space_free[a.space - 1] = a.departure;
            frontier.last_arrival = a.arrival;
        }
        frontier
    }

    pub(crate) fn push(&mut self, arrival: Arrival) {
        self.arrivals.push(arrival);
    }

    pub(crate) fn extend_from_slice(&mut self, arrivals: &[Arrival]) {
        self.arrivals.extend_from_slice(arrivals);
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["j", "arrival", "service_start", "departure", "space"])?;
        for (j, a) in self.arrivals.iter().enumerate() {
            out.write_record([
                (j + 1).to_string(),
                format!("{:.6}", a.arrival),
                format!("{:.6}", a.service_start),
                format!("{:.6}", a.departure),
                a.space.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`SamplePath::write_csv`]. The file does not
    /// carry the origin or the space count, so the caller supplies them.
    /// First-free times are recomputed from the recorded assignments.
    pub fn read_csv<R: Read>(reader: R, num_spaces: usize, origin: f64) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            #[allow(dead_code)]
            j: usize,
            arrival: f64,
            service_start: f64,
            departure: f64,
            space: usize,
        }
        let mut arrivals = Vec::new();
        let mut space_free = vec![origin; num_spaces.max(1)];
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: Row = row?;
            let first_free = space_free.iter().copied().fold(f64::INFINITY, f64::min);
            if row.space >= 1 && row.space <= space_free.len() {
                space_free[row.space - 1] = row.departure;
            }
            arrivals.push(Arrival {
                arrival: row.arrival,
                first_free,
                service_start: row.service_start,
                departure: row.departure,
                space: row.space,
            });
        }
        Self::from_arrivals(num_spaces, origin, arrivals)
    }
}

/// Maps primitives to the unique FCFS sample path anchored at `origin`.
pub fn build_sample_path(primitives: &QueuePrimitives, origin: f64) -> Result<SamplePath> {
    primitives.validate()?;
    let mut frontier = QueueFrontier::new(primitives.num_spaces, origin);
    let arrivals = primitives
        .inter_arrivals
        .iter()
        .zip(&primitives.service_times)
        .map(|(&alpha, &nu)| frontier.admit(alpha, nu))
        .collect();
    Ok(SamplePath {
        origin,
        num_spaces: primitives.num_spaces,
        arrivals,
    })
}

/// Recovers the primitives: gaps between successive arrivals and parking
/// durations.
pub fn invert_sample_path(path: &SamplePath) -> Result<QueuePrimitives> {
    let mut previous = path.origin;
    let mut inter_arrivals = Vec::with_capacity(path.len());
    let mut service_times = Vec::with_capacity(path.len());
    for (index, a) in path.arrivals.iter().enumerate() {
        if !(a.arrival <= a.service_start && a.service_start <= a.departure) {
            return Err(Error::InvalidPath {
                index,
                reason: "requires arrival <= service start <= departure".into(),
            });
        }
        inter_arrivals.push(a.arrival - previous);
        service_times.push(a.departure - a.service_start);
        previous = a.arrival;
    }
    QueuePrimitives::new(inter_arrivals, service_times, path.num_spaces)
}

/// Number of parked cars at `t`.
pub fn occupancy_at(path: &SamplePath, t: f64) -> usize {
    path.arrivals.iter().filter(|a| a.is_parked_at(t)).count()
}

/// Number of cars that have arrived but not yet parked at `t`.
pub fn searching_at(path: &SamplePath, t: f64) -> usize {
    path.arrivals.iter().filter(|a| a.is_searching_at(t)).count()
}

/// Log of the joint density of the path's primitives under `params`.
pub fn log_joint_density(path: &SamplePath, params: &ModelParams) -> f64 {
    let arrival = params.arrival();
    let service = params.service();
    let mut previous = path.origin;
    let mut total = 0.0;
    for a in &path.arrivals {
        total += arrival.ln_pdf(a.arrival - previous) + service.ln_pdf(a.departure - a.service_start);
        previous = a.arrival;
    }
    total
}
