use meterflow::data_io::{generate_scenario, Scenario};
use meterflow::estimators::{count_quantiles, weighted_quantile};
use meterflow::filter::{abc_log_weight, effective_sample_size, resample_indices};
use meterflow::queue::occupancy_at;
use meterflow::rng::stream_rng;
use meterflow::{run_filter, AbcConfig, Observation, Resampling};
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn normal_pdf(x: f64, sd: f64) -> f64 {
    (-(x * x) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

proptest! {
    #[test]
    fn kernel_matches_linear_space_average(
        tau in 0.0f64..50.0,
        m in 0.0f64..30.0,
        pseudo in prop::collection::vec((0.0f64..50.0, 0.0f64..30.0), 1..40),
        e_tau in 0.5f64..10.0,
        e_m in 0.5f64..10.0,
    ) {
        let y = Observation::new(tau, m);
        let pseudo: Vec<Observation> = pseudo.into_iter().map(|(t, b)| Observation::new(t, b)).collect();
        let linear: f64 = pseudo
            .iter()
            .map(|p| normal_pdf(tau - p.pay_time, e_tau) * normal_pdf(m - p.meter_balance, e_m))
            .sum::<f64>()
            / pseudo.len() as f64;
        let log = abc_log_weight(&y, &pseudo, [e_tau, e_m]);
        if linear > 1e-250 {
            prop_assert!((log - linear.ln()).abs() < 1e-9 * (1.0 + linear.ln().abs()));
        } else {
            prop_assert!(log < -500.0);
        }
    }

    #[test]
    fn weighted_quantile_matches_expanded_sample(
        items in prop::collection::vec((0u8..10, 1u32..6), 1..30),
        level in 0.01f64..0.99,
    ) {
        let total: u32 = items.iter().map(|i| i.1).sum();
        let mut expanded: Vec<f64> = items.iter().flat_map(|&(v, w)| std::iter::repeat_n(v as f64, w as usize)).collect();
        expanded.sort_by(f64::total_cmp);
        // Smallest value whose empirical CDF reaches the level.
        let rank = ((level * total as f64) - 1e-9).ceil().max(1.0) as usize;
        let expected = expanded[rank - 1];
        let mut sorted: Vec<(f64, f64)> = items.iter().map(|&(v, w)| (v as f64, w as f64 / total as f64)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        prop_assert_eq!(weighted_quantile(&sorted, level), expected);
        let values: Vec<u16> = items.iter().map(|i| i.0 as u16).collect();
        let weights: Vec<f64> = items.iter().map(|i| i.1 as f64).collect();
        let (q, mean) = count_quantiles(&values, &weights);
        prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        let direct = expanded.iter().sum::<f64>() / total as f64;
        prop_assert!((mean - direct).abs() < 1e-9);
    }
}

#[test]
fn multinomial_offspring_counts() {
    let weights = [0.05, 0.4, 0.1, 0.25, 0.2];
    let n = 1000;
    let reps = 400;
    let mut totals = [0u64; 5];
    for r in 0..reps {
        let idx = resample_indices(&weights, n, Resampling::Multinomial, &mut stream_rng(5, r, 0)).unwrap();
        for i in idx {
            totals[i] += 1;
        }
    }
    let draws = (n as u64 * reps) as f64;
    let stat: f64 = totals
        .iter()
        .zip(weights)
        .map(|(&o, w)| (o as f64 - draws * w).powi(2) / (draws * w))
        .sum();
    assert!(stat < ChiSquared::new(4.0).unwrap().inverse_cdf(0.999), "chi-square {stat}");

    let idx = resample_indices(&weights, n, Resampling::Systematic, &mut stream_rng(6, 0, 0)).unwrap();
    for (i, w) in weights.iter().enumerate() {
        let count = idx.iter().filter(|&&j| j == i).count() as f64;
        assert!((count - w * n as f64).abs() <= 1.0, "systematic count for {i}");
    }
}

#[test]
fn ess_bounds() {
    let mut rng = stream_rng(2, 0, 0);
    for _ in 0..100 {
        let raw: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let ess = effective_sample_size(&w).unwrap();
        assert!((1.0..=50.0 + 1e-9).contains(&ess));
    }
}

fn scenario(seed: u64, payments: usize) -> (Vec<Observation>, meterflow::ModelParams) {
    let sc = Scenario {
        lambda: 0.752,
        mean_parking: 5.0,
        compliance: 0.8,
        spaces: 7,
        num_payments: payments,
        seed,
        origin: 0.0,
    };
    (generate_scenario(&sc).unwrap().observations, sc.params().unwrap())
}

#[test]
fn filter_results_do_not_depend_on_thread_count() {
    let (obs, theta) = scenario(3, 12);
    let cfg = AbcConfig {
        num_particles: 3000,
        ..AbcConfig::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_filter(&obs, &theta, &cfg, 0.0, 99).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.log_likelihood.to_bits(), b.log_likelihood.to_bits());
    assert_eq!(a.ess_history, b.ess_history);
    assert_eq!(a.trajectory(17), b.trajectory(17));
    assert_eq!(a.final_weights(), b.final_weights());
}

#[test]
fn filter_bookkeeping() {
    let (obs, theta) = scenario(4, 15);
    let cfg = AbcConfig {
        num_particles: 2000,
        ..AbcConfig::default()
    };
    let res = run_filter(&obs, &theta, &cfg, 0.0, 5).unwrap();
    let total: f64 = res.step_log_increments.iter().sum();
    assert!((total - res.log_likelihood).abs() < 1e-9);
    assert_eq!(res.ess_history.len(), obs.len());
    assert!(!res.resampled.last().unwrap());
    let weights = res.final_weights();
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for &ess in &res.ess_history {
        assert!(ess >= 1.0 - 1e-9 && ess <= 2000.0 + 1e-6);
    }
    // Every trajectory pays at the observation count and keeps the queue
    // constraint; the recorded occupancy is the occupancy at its own
    // payment time.
    for i in (0..2000).step_by(97) {
        let path = res.trajectory(i);
        assert!(path.len() >= obs.len());
        let (occ, _) = res.step_occupancy(obs.len() - 1);
        let last = path.arrivals().last().unwrap();
        let t = last.service_start;
        assert_eq!(occ[i] as usize, occupancy_at(&path, t));
        assert!(path.arrivals().iter().all(|a| a.arrival <= a.service_start));
    }
    let same = run_filter(&obs, &theta, &cfg, 0.0, 5).unwrap();
    assert_eq!(same.log_likelihood.to_bits(), res.log_likelihood.to_bits());
    let other = run_filter(&obs, &theta, &cfg, 0.0, 6).unwrap();
    assert_ne!(other.log_likelihood, res.log_likelihood);
}
