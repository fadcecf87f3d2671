use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{NaiveDateTime, Timelike};
use log::{info, warn};
use meterflow::data_io::{
    generate_with_params, minutes_to_datetime, parse_ground_truth, parse_payments,
    payments_to_observations, read_observations, write_ground_truth, write_observations, write_payments, AmountUnit,
    PaymentRecord, RateSchedule,
};
use meterflow::estimators::{
    count_quantiles, cruising_stats, hourly_occupancy_rate, parameter_posterior_summary, rmse_vs_truth,
    trajectory_quantiles, uniform_grid, GroundTruth, OccupancyTrajectory, QUANTILE_LEVELS,
};
use meterflow::pmmh::{map_estimate, read_chain_csv, run_pmmh};
use meterflow::rng::{derive_seed, stream_rng};
use meterflow::{run_filter, Observation, SamplePath};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, PAPER_SCALE_PARTICLES};
use crate::error::{CliError, CliResult};
use crate::manifest::{hash_file, OutputDir, RunManifest};
use crate::svg;

/// Settings shared by every command.
pub struct Context {
    pub command: &'static str,
    pub seed_override: Option<u64>,
    pub threads: usize,
    started: Instant,
    inputs: Vec<PathBuf>,
}

impl Context {
    pub fn new(command: &'static str, seed_override: Option<u64>, threads: usize) -> Self {
        Self {
            command,
            seed_override,
            threads,
            started: Instant::now(),
            inputs: Vec::new(),
        }
    }

    fn seed(&self, cfg: &RunConfig) -> u64 {
        self.seed_override.unwrap_or(cfg.seed)
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        if !path.is_file() {
            return Err(CliError::Io(format!("{}: no such file", path.display())));
        }
        self.inputs.push(path.to_path_buf());
        Ok(())
    }

    fn finish(self, out: OutputDir, seed: u64, config: &RunConfig) -> CliResult<()> {
        let inputs = self.inputs.iter().map(|p| hash_file(p)).collect::<CliResult<_>>()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads: self.threads,
            config: serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?,
            inputs,
            outputs: Vec::new(),
            runtime_seconds: self.started.elapsed().as_secs_f64(),
        };
        let manifest = out.finish(manifest)?;
        info!("{}: wrote {} files", self.command, manifest.outputs.len());
        Ok(())
    }
}

fn load_config(ctx: &mut Context, path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => {
            ctx.input(p)?;
            RunConfig::load(p)
        }
        None => Ok(RunConfig::default()),
    }
}

fn open(path: &Path) -> CliResult<fs::File> {
    fs::File::open(path).map_err(|e| CliError::io(path, e))
}

fn rate_schedule(cfg: &RunConfig, block: &str) -> CliResult<RateSchedule> {
    let rates = cfg.rates()?;
    if !rates.blocks.values().all(|w| w.is_empty()) {
        return Ok(rates);
    }
    let price = cfg.scenario.as_ref().map(|s| s.price_per_hour).unwrap_or(2.0);
    RateSchedule::flat(block, price).map_err(|e| CliError::Config(e.to_string()))
}

pub fn simulate(mut ctx: Context, config: &Path, out_dir: &Path) -> CliResult<()> {
    let cfg = load_config(&mut ctx, Some(config))?;
    let seed = ctx.seed(&cfg);
    let params = cfg.scenario_params()?;
    let scenario = cfg.scenario.as_ref().expect("checked by scenario_params");
    let origin = cfg.origin()?;
    let block = cfg.block_id();
    let sim = generate_with_params(&params, scenario.num_payments, 0.0, seed).map_err(CliError::run)?;
    let rates = rate_schedule(&cfg, &block)?;
    let mut payments = Vec::new();
    for (driver, &paid) in sim.path.arrivals().iter().zip(&sim.amounts) {
        if paid > 0.0 {
            let timestamp = minutes_to_datetime(&origin, driver.service_start);
            let rate = rates.rate_at(&block, &timestamp).ok_or_else(|| {
                CliError::Config(format!("no rate for block {block} at {timestamp}"))
            })?;
            payments.push(PaymentRecord {
                block_id: block.clone(),
                timestamp,
                amount: paid * rate / 60.0,
            });
        }
    }

    let mut out = OutputDir::create(out_dir)?;
    out.write_with("observations.csv", |w| write_observations(w, &sim.observations))?;
    out.write_with("sample_path.csv", |w| sim.path.write_csv(w))?;
    out.write_with("truth.csv", |w| write_ground_truth(w, &block, &sim.truth_grid, &origin))?;
    out.write_with("truth_payments.csv", |w| write_ground_truth(w, &block, &sim.truth_at_payments(), &origin))?;
    out.write_with("payments.csv", |w| write_payments(w, &payments))?;
    info!("simulated {} drivers, {} payments", sim.path.len(), sim.observations.len());
    ctx.finish(out, seed, &cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Filter,
    Pmmh,
}

pub struct InferArgs<'a> {
    pub obs: &'a Path,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub mode: Mode,
    pub paper_scale: bool,
    pub amount_unit: Option<AmountUnit>,
}

fn is_payment_file(path: &Path) -> CliResult<bool> {
    let mut first = String::new();
    BufReader::new(open(path)?)
        .read_line(&mut first)
        .map_err(|e| CliError::io(path, e))?;
    Ok(first.trim().replace(' ', "").starts_with("block_id,"))
}

/// Observations from either an observation CSV or a raw payment log.
fn load_observations(path: &Path, cfg: &RunConfig, unit: Option<AmountUnit>) -> CliResult<Vec<Observation>> {
    if !is_payment_file(path)? {
        return read_observations(open(path)?).map_err(|e| CliError::input(path, e));
    }
    let field = cfg
        .field
        .as_ref()
        .ok_or_else(|| CliError::Config("payment logs need a [field] section".into()))?;
    let parsed = parse_payments(open(path)?).map_err(|e| CliError::input(path, e))?;
    if parsed.duplicates_removed > 0 {
        warn!("dropped {} duplicate payment rows", parsed.duplicates_removed);
    }
    let window = (cfg.origin()?, meterflow::data_io::parse_datetime(&field.window_end).expect("validated"));
    let rates = rate_schedule(cfg, &field.block_id)?;
    let batch = payments_to_observations(
        &parsed.records,
        &rates,
        &field.block_id,
        window,
        unit.unwrap_or(field.amount_unit),
    )
    .map_err(|e| match e {
        meterflow::Error::MissingRate { .. } => CliError::Config(e.to_string()),
        other => CliError::input(path, other),
    })?;
    info!(
        "{} payments in window; dropped {} outside, {} zero-amount",
        batch.observations.len(),
        batch.dropped_outside_window,
        batch.dropped_zero_amount
    );
    if batch.observations.is_empty() {
        return Err(CliError::Io(format!("{}: no payments for block {} in the window", path.display(), field.block_id)));
    }
    Ok(batch.observations)
}

fn write_grid(out: &mut OutputDir, cfg: &RunConfig, samples: &[(f64, &SamplePath)], end: f64) -> CliResult<()> {
    if let Some(step) = cfg.evaluation.grid_minutes {
        let grid = trajectory_quantiles(samples, &uniform_grid(0.0, end, step)).map_err(CliError::run)?;
        out.write_with("trajectory_grid.csv", |w| grid.write_csv(w))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Theta {
    lambda: f64,
    mean_parking: f64,
    p: f64,
}

impl From<&meterflow::ModelParams> for Theta {
    fn from(m: &meterflow::ModelParams) -> Self {
        Self {
            lambda: m.lambda,
            mean_parking: m.mean_parking,
            p: m.compliance,
        }
    }
}

pub fn infer(mut ctx: Context, args: InferArgs<'_>) -> CliResult<()> {
    let mut cfg = load_config(&mut ctx, args.config)?;
    ctx.input(args.obs)?;
    if args.paper_scale {
        cfg.filter.num_particles = PAPER_SCALE_PARTICLES;
    }
    let seed = ctx.seed(&cfg);
    let observations = load_observations(args.obs, &cfg, args.amount_unit)?;
    let pay_times: Vec<f64> = observations.iter().map(|o| o.pay_time).collect();
    let end = *pay_times.last().expect("non-empty");
    let mut out = OutputDir::create(args.out)?;
    out.write_with("observations.csv", |w| write_observations(w, &observations))?;

    match args.mode {
        Mode::Filter => {
            let params = cfg.fixed_params()?;
            let result = run_filter(&observations, &params, &cfg.filter, 0.0, seed).map_err(CliError::run)?;
            let mut quantiles = Vec::with_capacity(observations.len());
            let mut mean = Vec::with_capacity(observations.len());
            for k in 0..observations.len() {
                let (values, log_weights) = result.step_occupancy(k);
                let weights: Vec<f64> = log_weights.iter().map(|w| w.exp()).collect();
                let (q, m) = count_quantiles(values, &weights);
                quantiles.push(q);
                mean.push(m);
            }
            let traj = OccupancyTrajectory {
                eval_times: pay_times.clone(),
                quantiles,
                mean,
            };
            out.write_with("trajectory.csv", |w| traj.write_csv(w))?;

            let mut ess = String::from("step,ess,resampled,log_increment\n");
            for k in 0..result.num_steps() {
                ess.push_str(&format!(
                    "{},{:.6},{},{:.6}\n",
                    k + 1,
                    result.ess_history[k],
                    result.resampled[k] as u8,
                    result.step_log_increments[k]
                ));
            }
            out.write_bytes("ess.csv", ess.as_bytes())?;

            let weights = result.final_weights();
            let paths: Vec<(f64, SamplePath)> = weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w > 0.0)
                .map(|(i, &w)| (w, result.trajectory(i)))
                .collect();
            let samples: Vec<(f64, &SamplePath)> = paths.iter().map(|(w, p)| (*w, p)).collect();
            write_grid(&mut out, &cfg, &samples, end)?;
            let cruising = cruising_stats(&samples, (0.0, end)).map_err(CliError::run)?;
            out.write_json("cruising.json", &cruising)?;
            let draw = result.sample_trajectory(&mut stream_rng(derive_seed(seed, 0x5a3e), 0, 0));
            out.write_with("sample_path.csv", |w| draw.write_csv(w))?;
            out.write_json(
                "summary.json",
                &json!({
                    "mode": "filter",
                    "theta": Theta::from(&params),
                    "log_likelihood": result.log_likelihood,
                    "num_particles": cfg.filter.num_particles,
                    "num_payments": observations.len(),
                    "resample_steps": result.resampled.iter().filter(|r| **r).count(),
                    "min_ess": result.ess_history.iter().copied().fold(f64::INFINITY, f64::min),
                }),
            )?;
        }
        Mode::Pmmh => {
            let pcfg = cfg.pmmh_config(seed)?;
            let chain = run_pmmh(&observations, &pcfg).map_err(CliError::run)?;
            out.write_with("chain.csv", |w| chain.write_csv(w))?;
            let post: Vec<_> = chain.post_burn_in().collect();
            if post.is_empty() {
                ctx.finish(out, seed, &cfg)?;
                return Err(CliError::Degenerate(format!(
                    "chain stopped after {} iterations with {} of {} burn-in acceptances",
                    chain.samples.len() - 1,
                    chain.num_accepted(),
                    pcfg.num_accepts_burn_in
                )));
            }
            let samples: Vec<(f64, &SamplePath)> = post.iter().map(|s| (1.0, s.trajectory.as_ref())).collect();
            let traj = trajectory_quantiles(&samples, &pay_times).map_err(CliError::run)?;
            out.write_with("trajectory.csv", |w| traj.write_csv(w))?;
            write_grid(&mut out, &cfg, &samples, end)?;
            let map = map_estimate(&chain.samples).map_err(CliError::run)?;
            out.write_with("map_path.csv", |w| map.trajectory.write_csv(w))?;

            let summary = parameter_posterior_summary(&chain.post_parameters(), cfg.evaluation.histogram_bins)
                .map_err(CliError::run)?;
            for pair in &summary.pairs {
                out.write_with(&format!("pair_{}_{}.csv", pair.x, pair.y), |w| pair.write_csv(w))?;
            }
            out.write_json(
                "posterior_summary.json",
                &json!({
                    "draws": summary.draws,
                    "quantile_levels": QUANTILE_LEVELS,
                    "marginals": summary.marginals,
                    "map": Theta::from(&map.theta),
                    "map_log_likelihood": map.log_likelihood,
                    "map_iteration": map.iteration,
                }),
            )?;
            let cruising = cruising_stats(&samples, (0.0, end)).map_err(CliError::run)?;
            out.write_json("cruising.json", &cruising)?;
            out.write_json(
                "summary.json",
                &json!({
                    "mode": "pmmh",
                    "iterations": chain.samples.len() - 1,
                    "accepted": chain.num_accepted(),
                    "post_burn_in_samples": post.len(),
                    "first_post_burn_in_iteration": post[0].iteration,
                    "acceptance_rate_post": chain.acceptance_rate_post(),
                    "num_particles": cfg.filter.num_particles,
                    "num_payments": observations.len(),
                    "start": Theta::from(&chain.samples[0].theta),
                }),
            )?;
        }
    }
    ctx.finish(out, seed, &cfg)
}

/// Picks the configured block, or the only block in the file.
fn select_block(mut truths: std::collections::BTreeMap<String, GroundTruth>, cfg: &RunConfig, configured: bool, path: &Path) -> CliResult<GroundTruth> {
    let wanted = cfg.block_id();
    if let Some(t) = truths.remove(&wanted) {
        return Ok(t);
    }
    if !configured && truths.len() == 1 {
        return Ok(truths.into_values().next().expect("one block"));
    }
    Err(CliError::Io(format!("{}: no snapshots for block {wanted}", path.display())))
}

fn load_truth(path: &Path, cfg: &RunConfig, configured: bool) -> CliResult<GroundTruth> {
    let origin = cfg.origin()?;
    let truths = parse_ground_truth(open(path)?, &origin).map_err(|e| CliError::input(path, e))?;
    select_block(truths, cfg, configured, path)
}

fn truth_as_trajectory(truth: &GroundTruth) -> OccupancyTrajectory {
    let occupied: Vec<f64> = truth.occupied.iter().map(|&o| o as f64).collect();
    OccupancyTrajectory {
        eval_times: truth.snapshot_times.clone(),
        quantiles: occupied.iter().map(|&o| [o; 5]).collect(),
        mean: occupied,
    }
}

#[derive(Serialize)]
struct HourlyRate {
    hour_start: String,
    estimate_percent: f64,
    truth_percent: f64,
}

/// Clock hours with enough estimate and truth points to compare.
fn hourly_rates(traj: &OccupancyTrajectory, truth: &GroundTruth, origin: &NaiveDateTime) -> Vec<HourlyRate> {
    let (Some(&first), Some(&last)) = (traj.eval_times.first(), traj.eval_times.last()) else {
        return Vec::new();
    };
    let capacity = truth.capacity.iter().copied().max().unwrap_or(0) as usize;
    let truth_traj = truth_as_trajectory(truth);
    let offset = origin.minute() as f64 + origin.second() as f64 / 60.0;
    let mut start = ((first + offset) / 60.0).floor() * 60.0 - offset;
    let mut rates = Vec::new();
    while start < last {
        let window = (start, start + 60.0);
        if let (Ok(e), Ok(t)) = (
            hourly_occupancy_rate(traj, capacity, window),
            hourly_occupancy_rate(&truth_traj, capacity, window),
        ) {
            rates.push(HourlyRate {
                hour_start: meterflow::data_io::format_datetime(&minutes_to_datetime(origin, start)),
                estimate_percent: e,
                truth_percent: t,
            });
        }
        start += 60.0;
    }
    rates
}

fn read_trajectory(path: &Path) -> CliResult<OccupancyTrajectory> {
    OccupancyTrajectory::read_csv(open(path)?).map_err(|e| CliError::input(path, e))
}

pub fn evaluate(mut ctx: Context, traj_path: &Path, truth_path: &Path, config: Option<&Path>, out_dir: &Path) -> CliResult<()> {
    let cfg = load_config(&mut ctx, config)?;
    ctx.input(traj_path)?;
    ctx.input(truth_path)?;
    let traj = read_trajectory(traj_path)?;
    let truth = load_truth(truth_path, &cfg, config.is_some())?;
    let report = rmse_vs_truth(&traj, &truth).map_err(CliError::run)?;
    if report.matched == 0 {
        return Err(CliError::run(meterflow::Error::ZeroOverlap));
    }
    let origin = cfg.origin()?;
    // Hourly rates come from the dense grid estimate when one sits next to
    // the trajectory.
    let grid_path = traj_path.with_file_name("trajectory_grid.csv");
    let hourly_source = if grid_path.is_file() && grid_path != traj_path {
        ctx.input(&grid_path)?;
        read_trajectory(&grid_path)?
    } else {
        traj.clone()
    };
    let hourly = hourly_rates(&hourly_source, &truth, &origin);
    let cruising_path = traj_path.with_file_name("cruising.json");
    let cruising = if cruising_path.is_file() {
        ctx.input(&cruising_path)?;
        let text = fs::read_to_string(&cruising_path).map_err(|e| CliError::io(&cruising_path, e))?;
        serde_json::from_str::<serde_json::Value>(&text).map_err(|e| CliError::io(&cruising_path, e))?
    } else {
        serde_json::Value::Null
    };
    let mut out = OutputDir::create(out_dir)?;
    out.write_json(
        "evaluation.json",
        &json!({
            "rmse_cars": report.rmse_cars,
            "coverage_fraction_05_95": report.coverage_fraction_05_95,
            "matched": report.matched,
            "unmatched": report.unmatched,
            "hourly_rates": hourly,
            "cruising_summary": cruising,
        }),
    )?;
    info!("rmse {:.3} cars, coverage {:.3}", report.rmse_cars, report.coverage_fraction_05_95);
    ctx.finish(out, 0, &cfg)
}

pub fn report(mut ctx: Context, run_dir: &Path, truth_path: Option<&Path>, config: Option<&Path>, out_dir: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(&mut ctx, config)?;
    let traj_path = run_dir.join("trajectory.csv");
    ctx.input(&traj_path)?;
    let traj = read_trajectory(&traj_path)?;
    let truth = match truth_path {
        Some(p) => {
            ctx.input(p)?;
            Some(load_truth(p, &cfg, config.is_some())?)
        }
        None => None,
    };
    let capacity = match &truth {
        Some(t) => t.capacity.iter().copied().max().unwrap_or(0) as usize,
        None => cfg.block_model().spaces,
    };
    let points: Option<Vec<(f64, f64)>> = truth.as_ref().map(|t| {
        t.snapshot_times
            .iter()
            .zip(&t.occupied)
            .map(|(&s, &o)| (s, o as f64))
            .collect()
    });
    let default_out = run_dir.join("report");
    let mut out = OutputDir::create(out_dir.unwrap_or(&default_out))?;
    out.write_bytes("occupancy.svg", svg::occupancy_plot(&traj, points.as_deref(), capacity).as_bytes())?;

    let chain_path = run_dir.join("chain.csv");
    if chain_path.is_file() {
        ctx.input(&chain_path)?;
        let rows = read_chain_csv(open(&chain_path)?).map_err(|e| CliError::input(&chain_path, e))?;
        let first_post = post_burn_in_start(run_dir)?;
        let draws: Vec<[f64; 3]> = rows.iter().filter(|r| r.iteration >= first_post).map(|r| r.theta).collect();
        let summary = parameter_posterior_summary(&draws, cfg.evaluation.histogram_bins).map_err(|e| CliError::input(&chain_path, e))?;
        for pair in &summary.pairs {
            out.write_bytes(&format!("pair_{}_{}.svg", pair.x, pair.y), svg::pair_plot(pair).as_bytes())?;
        }
    }
    ctx.finish(out, 0, &cfg)
}

/// First post-burn-in iteration recorded by `infer`, or zero.
fn post_burn_in_start(run_dir: &Path) -> CliResult<usize> {
    let path = run_dir.join("summary.json");
    if !path.is_file() {
        return Ok(0);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))?;
    Ok(value["first_post_burn_in_iteration"].as_u64().unwrap_or(0) as usize)
}
