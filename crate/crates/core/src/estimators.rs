//! Summaries of sampled trajectories and parameter chains.

use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::queue::{occupancy_at, SamplePath};

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Sensor snapshots of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub snapshot_times: Vec<f64>,
    pub occupied: Vec<u32>,
    pub capacity: Vec<u32>,
}

impl GroundTruth {
    pub fn new(snapshot_times: Vec<f64>, occupied: Vec<u32>, capacity: Vec<u32>) -> Result<Self> {
        if snapshot_times.len() != occupied.len() || occupied.len() != capacity.len() {
            return Err(invalid("ground_truth", "column lengths differ"));
        }
        if let Some(i) = (0..occupied.len()).find(|&i| occupied[i] > capacity[i]) {
            return Err(invalid(
                "occupied",
                format!("snapshot {i}: {} exceeds capacity {}", occupied[i], capacity[i]),
            ));
        }
        Ok(Self {
            snapshot_times,
            occupied,
            capacity,
        })
    }

    /// Exact occupancy of a path at the given times.
    pub fn from_path(path: &SamplePath, times: &[f64]) -> Self {
        let s = path.num_spaces() as u32;
        Self {
            snapshot_times: times.to_vec(),
            occupied: times.iter().map(|&t| occupancy_at(path, t) as u32).collect(),
            capacity: vec![s; times.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.snapshot_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot_times.is_empty()
    }

    /// Index of the snapshot nearest to `t` within `window` minutes.
    pub fn nearest(&self, t: f64, window: f64) -> Option<usize> {
        let idx = self.snapshot_times.partition_point(|&s| s < t);
        [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter(|&i| i < self.len())
            .map(|i| (i, (self.snapshot_times[i] - t).abs()))
            .filter(|&(_, d)| d <= window)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

/// Weighted occupancy quantiles over time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OccupancyTrajectory {
    pub eval_times: Vec<f64>,
    /// One row per eval time, columns in [`QUANTILE_LEVELS`] order.
    pub quantiles: Vec<[f64; 5]>,
    pub mean: Vec<f64>,
}

impl OccupancyTrajectory {
    pub fn median(&self) -> impl Iterator<Item = f64> + '_ {
        self.quantiles.iter().map(|q| q[2])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["time", "q05", "q25", "q50", "q75", "q95"])?;
        for (t, q) in self.eval_times.iter().zip(&self.quantiles) {
            let mut row = vec![format!("{t:.6}")];
            row.extend(q.iter().map(|v| format!("{v:.6}")));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut eval_times = Vec::new();
        let mut quantiles = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let (t, a, b, c, d, e): (f64, f64, f64, f64, f64, f64) = row?;
            eval_times.push(t);
            quantiles.push([a, b, c, d, e]);
        }
        let mean = quantiles.iter().map(|q| q[2]).collect();
        Ok(Self {
            eval_times,
            quantiles,
            mean,
        })
    }
}

/// Left-continuous inverse CDF: smallest value whose cumulative weight
/// reaches `level`. `sorted` holds (value, weight) pairs sorted by value with
/// weights summing to one.
pub fn weighted_quantile(sorted: &[(f64, f64)], level: f64) -> f64 {
    let mut cumulative = 0.0;
    for &(value, weight) in sorted {
        cumulative += weight;
        if cumulative >= level - 1e-12 {
            return value;
        }
    }
    sorted.last().map(|v| v.0).unwrap_or(f64::NAN)
}

fn normalized(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Unnormalized { sum: total });
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Weighted quantiles of occupied spaces over `samples` at each eval time.
pub fn trajectory_quantiles(samples: &[(f64, &SamplePath)], eval_times: &[f64]) -> Result<OccupancyTrajectory> {
    if samples.is_empty() {
        return Err(Error::Empty("trajectory sample set"));
    }
    let weights = normalized(&samples.iter().map(|s| s.0).collect::<Vec<_>>())?;
    let mut quantiles = Vec::with_capacity(eval_times.len());
    let mut mean = Vec::with_capacity(eval_times.len());
    let mut column: Vec<(f64, f64)> = Vec::with_capacity(samples.len());
    for &t in eval_times {
        column.clear();
        column.extend(
            samples
                .iter()
                .zip(&weights)
                .map(|((_, path), &w)| (occupancy_at(path, t) as f64, w)),
        );
        column.sort_by(|a, b| a.0.total_cmp(&b.0));
        quantiles.push(QUANTILE_LEVELS.map(|level| weighted_quantile(&column, level)));
        mean.push(column.iter().map(|(v, w)| v * w).sum());
    }
    Ok(OccupancyTrajectory {
        eval_times: eval_times.to_vec(),
        quantiles,
        mean,
    })
}

/// Quantiles of already-evaluated weighted counts at one time.
pub fn count_quantiles(values: &[u16], weights: &[f64]) -> ([f64; 5], f64) {
    let mut column: Vec<(f64, f64)> = values.iter().map(|&v| v as f64).zip(weights.iter().copied()).collect();
    column.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = weights.iter().sum();
    for entry in &mut column {
        entry.1 /= total;
    }
    let mean = column.iter().map(|(v, w)| v * w).sum();
    (QUANTILE_LEVELS.map(|level| weighted_quantile(&column, level)), mean)
}

/// Uniform grid from `start` to `end` (inclusive of `start`) every `step`.
pub fn uniform_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let count = ((end - start) / step).floor().max(0.0) as usize;
    (0..=count).map(|i| start + i as f64 * step).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RmseReport {
    pub rmse_cars: f64,
    /// Eval times matched to a snapshot.
    pub matched: usize,
    /// Eval times without a snapshot within the alignment window.
    pub unmatched: usize,
    /// Fraction of matched times where truth lies in the 5-95% band.
    pub coverage_fraction_05_95: f64,
}

pub const ALIGNMENT_WINDOW_MIN: f64 = 5.0;

/// RMSE of the median against the nearest snapshot within five minutes.
pub fn rmse_vs_truth(traj: &OccupancyTrajectory, truth: &GroundTruth) -> Result<RmseReport> {
    let mut sq = 0.0;
    let mut matched = 0;
    let mut covered = 0;
    for (t, q) in traj.eval_times.iter().zip(&traj.quantiles) {
        if let Some(i) = truth.nearest(*t, ALIGNMENT_WINDOW_MIN) {
            let target = truth.occupied[i] as f64;
            sq += (q[2] - target).powi(2);
            matched += 1;
            if q[0] <= target && target <= q[4] {
                covered += 1;
            }
        }
    }
    if matched == 0 {
        return Err(Error::ZeroOverlap);
    }
    Ok(RmseReport {
        rmse_cars: (sq / matched as f64).sqrt(),
        matched,
        unmatched: traj.eval_times.len() - matched,
        coverage_fraction_05_95: covered as f64 / matched as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CruisingSummary {
    /// Weighted mean search time of drivers arriving in the window (min).
    pub mean_search: f64,
    pub median_search: f64,
    pub q95_search: f64,
    pub max_search: f64,
    /// Time-averaged number of searching cars over the window.
    pub mean_searching_cars: f64,
    /// Weighted mean number of drivers arriving in the window.
    pub arrivals: f64,
}

/// Search-time statistics of drivers arriving in `[start, end)`.
pub fn cruising_stats(samples: &[(f64, &SamplePath)], window: (f64, f64)) -> Result<CruisingSummary> {
    if samples.is_empty() {
        return Err(Error::Empty("trajectory sample set"));
    }
    let (start, end) = window;
    if !(end > start) {
        return Err(invalid("window", "end must be after start"));
    }
    let weights = normalized(&samples.iter().map(|s| s.0).collect::<Vec<_>>())?;
    let mut searches: Vec<(f64, f64)> = Vec::new();
    let mut searching_time = 0.0;
    let mut arrivals = 0.0;
    for ((_, path), &w) in samples.iter().zip(&weights) {
        let in_window: Vec<f64> = path
            .arrivals()
            .iter()
            .filter(|a| a.arrival >= start && a.arrival < end)
            .map(|a| a.search_time())
            .collect();
        arrivals += w * in_window.len() as f64;
        if !in_window.is_empty() {
            let share = w / in_window.len() as f64;
            searches.extend(in_window.into_iter().map(|s| (s, share)));
        }
        let overlap: f64 = path
            .arrivals()
            .iter()
            .map(|a| (a.service_start.min(end) - a.arrival.max(start)).max(0.0))
            .sum();
        searching_time += w * overlap;
    }
    searches.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = searches.iter().map(|s| s.1).sum();
    let (mean_search, median_search, q95_search, max_search) = if total > 0.0 {
        for s in &mut searches {
            s.1 /= total;
        }
        (
            searches.iter().map(|(v, w)| v * w).sum(),
            weighted_quantile(&searches, 0.5),
            weighted_quantile(&searches, 0.95),
            searches.last().map(|s| s.0).unwrap_or(0.0),
        )
    } else {
        (0.0, 0.0, 0.0, 0.0)
    };
    Ok(CruisingSummary {
        mean_search,
        median_search,
        q95_search,
        max_search,
        mean_searching_cars: searching_time / (end - start),
        arrivals,
    })
}

/// Longest allowed spacing of eval times inside an hourly window.
pub const MAX_GRID_GAP_MIN: f64 = 15.0;

/// Median occupied time over `[start, end)` as a percentage of capacity,
/// by trapezoidal integration over the eval times; the median is held
/// constant from the window edges to the nearest eval time.
pub fn hourly_occupancy_rate(traj: &OccupancyTrajectory, capacity: usize, window: (f64, f64)) -> Result<f64> {
    let (start, end) = window;
    if !(end > start) || capacity == 0 {
        return Err(invalid("window", "needs end > start and positive capacity"));
    }
    let points: Vec<(f64, f64)> = traj
        .eval_times
        .iter()
        .zip(traj.median())
        .filter(|(t, _)| **t >= start && **t <= end)
        .map(|(t, m)| (*t, m))
        .collect();
    let (first, last) = match (points.first(), points.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Coverage { start, gap: end - start }),
    };
    let mut previous = start;
    for &(t, _) in points.iter().chain(std::iter::once(&(end, 0.0))) {
        if t - previous > MAX_GRID_GAP_MIN {
            return Err(Error::Coverage {
                start: previous,
                gap: t - previous,
            });
        }
        previous = t;
    }
    let mut area = first.1 * (first.0 - start) + last.1 * (end - last.0);
    for pair in points.windows(2) {
        area += 0.5 * (pair[0].1 + pair[1].1) * (pair[1].0 - pair[0].0);
    }
    Ok((100.0 * area / (capacity as f64 * (end - start))).clamp(0.0, 100.0))
}

/// Exact occupancy rate of a path over a window, in percent.
pub fn path_occupancy_rate(path: &SamplePath, window: (f64, f64)) -> f64 {
    let (start, end) = window;
    let occupied: f64 = path
        .arrivals()
        .iter()
        .map(|a| (a.departure.min(end) - a.service_start.max(start)).max(0.0))
        .sum();
    100.0 * occupied / (path.num_spaces() as f64 * (end - start))
}

/// Equal-width bins over `[lo, hi]`; values outside are clamped into the
/// edge bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Grid {
    pub fn covering(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            let pad = (lo.abs() * 0.05).max(1e-6);
            (lo - pad, lo + pad)
        };
        Self { lo, hi, bins }
    }

    pub fn bin(&self, v: f64) -> usize {
        let x = ((v - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        x.clamp(0.0, (self.bins - 1) as f64) as usize
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * (self.hi - self.lo) / self.bins as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalSummary {
    pub name: &'static str,
    pub mean: f64,
    /// At [`QUANTILE_LEVELS`].
    pub quantiles: [f64; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairHistogram {
    pub x: &'static str,
    pub y: &'static str,
    pub x_grid: Grid,
    pub y_grid: Grid,
    /// Row-major `counts[ix][iy]`.
    pub counts: Vec<Vec<u64>>,
}

impl PairHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record([self.x, self.y, "count"])?;
        for (ix, row) in self.counts.iter().enumerate() {
            for (iy, c) in row.iter().enumerate() {
                out.write_record([
                    format!("{:.6}", self.x_grid.center(ix)),
                    format!("{:.6}", self.y_grid.center(iy)),
                    c.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub draws: usize,
    pub marginals: Vec<MarginalSummary>,
    pub pairs: Vec<PairHistogram>,
}

pub const PARAMETER_NAMES: [&str; 3] = ["lambda", "mean_parking", "p"];

/// Marginal summaries and pairwise histograms of parameter draws, one
/// `[lambda, mean_parking, p]` row per draw.
pub fn parameter_posterior_summary(draws: &[[f64; 3]], bins: usize) -> Result<PosteriorSummary> {
    if draws.is_empty() {
        return Err(Error::Empty("posterior chain"));
    }
    if bins == 0 {
        return Err(invalid("bins", "must be positive"));
    }
    let columns: Vec<Vec<f64>> = (0..3).map(|d| draws.iter().map(|r| r[d]).collect()).collect();
    let uniform = 1.0 / draws.len() as f64;
    let marginals = columns
        .iter()
        .zip(PARAMETER_NAMES)
        .map(|(col, name)| {
            let mut sorted: Vec<(f64, f64)> = col.iter().map(|&v| (v, uniform)).collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            MarginalSummary {
                name,
                mean: col.iter().sum::<f64>() / col.len() as f64,
                quantiles: QUANTILE_LEVELS.map(|l| weighted_quantile(&sorted, l)),
            }
        })
        .collect();
    let grids: Vec<Grid> = columns.iter().map(|c| Grid::covering(c, bins)).collect();
    let pairs = [(0, 1), (0, 2), (1, 2)]
        .into_iter()
        .map(|(a, b)| {
            let mut counts = vec![vec![0u64; bins]; bins];
            for row in draws {
                counts[grids[a].bin(row[a])][grids[b].bin(row[b])] += 1;
            }
            PairHistogram {
                x: PARAMETER_NAMES[a],
                y: PARAMETER_NAMES[b],
                x_grid: grids[a],
                y_grid: grids[b],
                counts,
            }
        })
        .collect();
    Ok(PosteriorSummary {
        draws: draws.len(),
        marginals,
        pairs,
    })
}
