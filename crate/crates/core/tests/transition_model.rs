mod common;

use proptest::prelude::*;
use rand::Rng;

use cqec::markov::{log_transition_matrix, rate_matrix, transition_matrix};
use cqec::rng;
use cqec::simulator::{syndrome_means, trial_stream, ErrorSource};
use cqec::{RunConfig, StateIndex};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn rows_sum_to_one(log_mu in -6.0f64..1.0, log_dt in -3.0f64..0.5) {
        let j = transition_matrix(10f64.powf(log_mu), 10f64.powf(log_dt)).unwrap();
        for row in &j.j {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}

proptest! {
    #[test]
    fn generator_exponential_matches_closed_form(log_mu_t in -6.0f64..(0.5f64).log10()) {
        let dt = 0.1;
        let mu = 10f64.powf(log_mu_t) / dt;
        let e = common::expm(&rate_matrix(mu).unwrap().q, dt);
        let j = transition_matrix(mu, dt).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                prop_assert!((e[a][b] - j.j[a][b]).abs() <= 1e-10, "{a}->{b}: {} vs {}", e[a][b], j.j[a][b]);
            }
        }
    }

    #[test]
    fn log_form_matches_log_of_matrix(log_mu_t in -3.0f64..(0.5f64).log10()) {
        let dt = 0.2;
        let mu = 10f64.powf(log_mu_t) / dt;
        let j = transition_matrix(mu, dt).unwrap();
        let lj = log_transition_matrix(mu, dt).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                prop_assert!((lj.logj[a][b] - j.j[a][b].ln()).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn syndrome_means_bounded_and_tied_for_middle_qubit(
        mut t1 in proptest::collection::vec(0.0f64..=1.0, 0..4),
        mut t2 in proptest::collection::vec(0.0f64..=1.0, 0..4),
        mut t3 in proptest::collection::vec(0.0f64..=1.0, 0..4),
        start in 0u8..8,
    ) {
        for v in [&mut t1, &mut t2, &mut t3] {
            v.sort_by(f64::total_cmp);
        }
        let s = StateIndex::new(start).unwrap();
        let m = syndrome_means(s, &t1, &t2, &t3).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m.s1bar) && (-1.0..=1.0).contains(&m.s2bar));
        let only_middle = syndrome_means(s, &[], &t2, &[]).unwrap();
        let (c1, c2) = cqec::syndrome_of(s).as_f64();
        prop_assert!((c1 * only_middle.s1bar - c2 * only_middle.s2bar).abs() < 1e-12);
    }
}

#[test]
fn simulated_jump_frequencies_match_transition_matrix() {
    let (mu, dt) = (0.5, 0.1);
    let cfg = RunConfig::new(mu, dt, 0.5, 1e5).with_seed(17);
    let j = transition_matrix(mu, dt).unwrap();
    let mut counts = [[0u64; 8]; 8];
    let mut from = [0u64; 8];
    for iv in trial_stream(&cfg, 0, ErrorSource::Poisson).unwrap() {
        counts[iv.start_state.index()][iv.end_state.index()] += 1;
        from[iv.start_state.index()] += 1;
    }
    assert_eq!(from.iter().sum::<u64>(), 1_000_000);
    for a in 0..8 {
        for b in 0..8 {
            let p = j.j[a][b];
            let n = from[a] as f64;
            let se = (p * (1.0 - p) / n).sqrt();
            let freq = counts[a][b] as f64 / n;
            assert!((freq - p).abs() <= 4.0 * se, "{a}->{b}: {freq} vs {p} (se {se})");
        }
    }
}

#[test]
fn grand_mean_variance_depends_only_on_total_time() {
    let k = 0.5;
    let budget = 10.0;
    let trials = 20_000;
    for dt in [0.01, 0.1, 1.0] {
        let cfg = RunConfig::new(1e-12, dt, k, budget).with_seed(23);
        let mut means = Vec::with_capacity(trials);
        for trial in 0..trials as u64 {
            let (mut s, mut n) = (0.0, 0);
            for iv in trial_stream(&cfg, trial, ErrorSource::Poisson).unwrap() {
                assert_eq!(iv.end_state, StateIndex::ZERO);
                s += iv.measurement.m1;
                n += 1;
            }
            means.push(s / n as f64);
        }
        let mu = means.iter().sum::<f64>() / trials as f64;
        let var = means.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let want = k / budget;
        // sampling error of a variance estimate at 2e4 draws is ~1%
        assert!(((var - want) / want).abs() < 0.05, "T={dt}: var {var} vs {want}");
    }
}

#[test]
fn single_error_mean_is_uniform() {
    // intervals with exactly one error, on qubit 1, taken from long simulated runs
    let cfg = RunConfig::new(1.0, 0.1, 0.5, 1.5e6).with_seed(29);
    let mut xs = Vec::with_capacity(1_000_000);
    for iv in trial_stream(&cfg, 0, ErrorSource::Poisson).unwrap() {
        if iv.counts == [1, 0, 0] {
            let sign = cqec::syndrome_of(iv.start_state).as_f64().0;
            xs.push(sign * iv.means.s1bar);
            if xs.len() == 1_000_000 {
                break;
            }
        }
    }
    assert_eq!(xs.len(), 1_000_000);
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x + 1.0) / 2.0;
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // two-sided Kolmogorov-Smirnov critical value at significance 1e-3
    let critical = ((2.0f64 / 1e-3).ln() / 2.0).sqrt() / n.sqrt();
    assert!(d < critical, "D = {d}, critical {critical}");
}

#[test]
fn uniform_error_times_give_uniform_means() {
    let mut r = rng::stream(31, 0);
    let mut hist = [0u32; 10];
    for _ in 0..100_000 {
        let t: f64 = r.random();
        let m = syndrome_means(StateIndex::ZERO, &[], &[], &[t]).unwrap();
        assert_eq!(m.s1bar, 1.0);
        hist[(((m.s2bar + 1.0) / 2.0 * 10.0) as usize).min(9)] += 1;
    }
    assert!(hist.iter().all(|&c| (c as f64 - 10_000.0).abs() < 500.0), "{hist:?}");
}
