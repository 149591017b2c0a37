use std::f64::consts::PI;

use fingerloc::channel::{
    compute_fcf, compute_rss, draw_realization, synth_ctf, ChannelRealization, CtfSweep,
    EnvironmentProfile, FrequencyGrid, MultipathComponent,
};
use fingerloc::{Environment, Point};
use num_complex::Complex64;
use proptest::prelude::*;

fn sweep(values: Vec<Complex64>) -> CtfSweep {
    let grid = FrequencyGrid::new(2.4e9, 100e6, values.len()).unwrap();
    CtfSweep::new(grid, values).unwrap()
}

fn complex_vec(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), len)
        .prop_map(|v| v.into_iter().map(|(r, i)| Complex64::new(r, i)).collect())
}

fn direct_ctf(paths: &[(f64, f64, f64)], grid: &FrequencyGrid) -> Vec<Complex64> {
    let step = grid.span_hz() / (grid.n_points() - 1) as f64;
    (0..grid.n_points())
        .map(|i| {
            let f = grid.center_hz() - grid.span_hz() / 2.0 + i as f64 * step;
            let mut h = Complex64::new(0.0, 0.0);
            for &(a, tau, theta) in paths {
                let arg = -(2.0 * PI * f * tau - theta);
                h += Complex64::new(a * arg.cos(), a * arg.sin());
            }
            h
        })
        .collect()
}

fn double_loop(h: &[Complex64], max_lag: usize) -> Vec<Complex64> {
    let n = h.len();
    let mut out = Vec::new();
    for m in 0..=max_lag {
        let mut s = Complex64::new(0.0, 0.0);
        for i in 0..(n - m) {
            s += h[i] * h[i + m].conj();
        }
        out.push(s / (n - m) as f64);
    }
    out
}

#[test]
fn three_random_paths_match_direct_sum() {
    let paths = [(0.8, 12e-9, 0.3), (0.35, 47e-9, -2.1), (0.1, 95e-9, 1.4)];
    let grid = FrequencyGrid::default();
    let components = paths
        .iter()
        .map(|&(a, t, p)| MultipathComponent::new(a, t, p).unwrap())
        .collect();
    let got = synth_ctf(&ChannelRealization::new(components).unwrap(), &grid);
    let want = direct_ctf(&paths, &grid);
    for (g, w) in got.values().iter().zip(&want) {
        assert!((g - w).norm() <= 1e-12 * w.norm().max(1e-3), "{g} vs {w}");
    }
}

#[test]
fn random_64_point_sweep_matches_double_loop() {
    let h: Vec<Complex64> = (0..64)
        .map(|i| {
            let x = i as f64;
            Complex64::new((0.37 * x).sin() + 0.1 * x.cos(), (1.3 * x).cos())
        })
        .collect();
    let got = compute_fcf(&sweep(h.clone()), 16).unwrap();
    for (g, w) in got.values().iter().zip(double_loop(&h, 16)) {
        assert!((g - w).norm() <= 1e-9 * w.norm().max(1e-12));
    }
}

#[test]
fn rss_matches_power_average() {
    let h: Vec<Complex64> = (0..40).map(|i| Complex64::from_polar(1.0 + i as f64 * 0.05, i as f64)).collect();
    let mean_power = h.iter().map(|v| v.re * v.re + v.im * v.im).sum::<f64>() / h.len() as f64;
    assert!((compute_rss(&sweep(h)) - 10.0 * mean_power.log10()).abs() <= 1e-9);
}

#[test]
fn lab_spreads_more_than_sports_hall() {
    let grid = FrequencyGrid::default();
    let mean_variance = |env: Environment| {
        let profile = EnvironmentProfile::default_for(env);
        let mut total = 0.0;
        for draw in 0..100u64 {
            // positions spread over distinct cells so each draw is independent
            let pos = Point::new(25.0 + 150.0 * (draw % 10) as f64, 25.0 + 150.0 * (draw / 10) as f64);
            let r = draw_realization(&profile, pos, 1000 + draw).unwrap();
            let mags: Vec<f64> = synth_ctf(&r, &grid).values().iter().map(|v| v.norm()).collect();
            // normalise by mean power so path loss does not dominate
            let mean_sq = mags.iter().map(|m| m * m).sum::<f64>() / mags.len() as f64;
            let norm: Vec<f64> = mags.iter().map(|m| m / mean_sq.sqrt()).collect();
            let mu = norm.iter().sum::<f64>() / norm.len() as f64;
            total += norm.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (norm.len() - 1) as f64;
        }
        total / 100.0
    };
    let lab = mean_variance(Environment::Lab);
    let hall = mean_variance(Environment::SportsHall);
    assert!(lab > hall, "lab {lab} vs sports hall {hall}");
}

#[test]
fn clutter_ordering_of_default_profiles() {
    let p: Vec<EnvironmentProfile> = Environment::ALL.iter().map(|&e| EnvironmentProfile::default_for(e)).collect();
    for w in p.windows(2) {
        assert!(w[0].multipath_count.0 >= w[1].multipath_count.0);
        assert!(w[0].multipath_count.1 > w[1].multipath_count.1);
        assert!(w[0].los_power_ratio < w[1].los_power_ratio);
    }
}

proptest! {
    #[test]
    fn fcf_equals_double_loop(h in complex_vec(2..=256), lag_frac in 0.0..1.0f64) {
        let max_lag = ((h.len() - 1) as f64 * lag_frac) as usize;
        let got = compute_fcf(&sweep(h.clone()), max_lag).unwrap();
        let want = double_loop(&h, max_lag);
        let scale = want[0].norm();
        for (g, w) in got.values().iter().zip(&want) {
            prop_assert!((g - w).norm() <= 1e-9 * w.norm().max(scale));
        }
    }

    #[test]
    fn fcf_zero_lag_is_real_and_bounds_the_rest(h in complex_vec(2..=128)) {
        let n = h.len();
        let r = compute_fcf(&sweep(h), n - 1).unwrap();
        let r0 = r.values()[0];
        prop_assert!(r0.im.abs() <= 1e-9 * r0.re.abs().max(1e-300));
        prop_assert!(r0.re >= 0.0);
        // with the 1/(N-m) per-lag normalisation the bound holds after
        // rescaling to the 1/N estimate
        for (m, v) in r.values().iter().enumerate() {
            prop_assert!(v.norm() * (n - m) as f64 <= r0.re * n as f64 * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn ctf_magnitude_bounded_by_amplitude_sum(
        paths in prop::collection::vec((0.0..2.0f64, 0.0..200e-9f64, -PI..PI), 1..12),
    ) {
        let comps = paths.iter().map(|&(a, t, p)| MultipathComponent::new(a, t, p).unwrap()).collect();
        let r = ChannelRealization::new(comps).unwrap();
        let bound = r.amplitude_sum();
        let ctf = synth_ctf(&r, &FrequencyGrid::default());
        for v in ctf.values() {
            prop_assert!(v.norm() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rss_scale_covariance(h in complex_vec(2..=64), g in 0.01..100.0f64) {
        prop_assume!(h.iter().any(|v| v.norm() > 1e-3));
        let base = compute_rss(&sweep(h.clone()));
        let scaled = compute_rss(&sweep(h.iter().map(|v| v * g).collect()));
        prop_assert!((scaled - base - 20.0 * g.log10()).abs() <= 1e-9);
    }

    #[test]
    fn draw_is_pure(x in 0.0..700.0f64, y in 0.0..700.0f64, seed in any::<u64>(), env in 0usize..4) {
        let p = EnvironmentProfile::default_for(Environment::ALL[env]);
        let a = draw_realization(&p, Point::new(x, y), seed).unwrap();
        let b = draw_realization(&p, Point::new(x, y), seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
