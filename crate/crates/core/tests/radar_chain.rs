use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use cogradar_core::agent::{run_online_evaluation, SaaAgent};
use cogradar_core::env::{EnvConfig, SpectrumEnv};
use cogradar_core::interference::{InterferenceSource, SweepGenerator};
use cogradar_core::mask::SubbandMask;
use cogradar_core::radar::{
    aggregate_metrics, ca_cfar_scale, ca_cfar_sweep, cfar_power, roc_point, score_detections, simulate_cpi, sinr,
    CfarConfig, CpiOutcome, LinkBudget, RadarConfig, TargetTrack, SPEED_OF_LIGHT,
};

fn m(s: &str) -> SubbandMask {
    s.parse().unwrap()
}

fn quiet() -> RadarConfig {
    RadarConfig {
        range_min_m: 2000.0,
        range_max_m: 2100.0,
        include_noise: false,
        ..RadarConfig::default()
    }
}

fn still(range: f64) -> TargetTrack {
    TargetTrack {
        initial_range_m: range,
        radial_velocity_mps: 0.0,
        amplitude_scale: 1.0,
    }
}

fn range_profile(action: SubbandMask, target: &TargetTrack) -> Vec<f64> {
    let cfg = quiet();
    let empty = SubbandMask::empty(5);
    let map = simulate_cpi(&cfg, &LinkBudget::default(), &[action], &[empty], Some(target), 0).unwrap();
    map.data.column(0).iter().map(|z| z.norm()).collect()
}

/// Width between the half-power crossings around the peak, in gates, by
/// linear interpolation of the magnitude.
fn half_power_width(profile: &[f64]) -> f64 {
    let (peak_i, peak) = profile
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    let level = peak / 2f64.sqrt();
    let mut left = peak_i;
    while profile[left - 1] >= level {
        left -= 1;
    }
    let mut right = peak_i;
    while profile[right + 1] >= level {
        right += 1;
    }
    let l = left as f64 - (profile[left] - level) / (profile[left] - profile[left - 1]);
    let r = right as f64 + (profile[right] - level) / (profile[right] - profile[right + 1]);
    r - l
}

#[test]
fn compressed_pulse_width_follows_bandwidth() {
    let cfg = quiet();
    for (action, bw) in [(m("10000"), 20e6), (m("01100"), 40e6)] {
        let width_m = half_power_width(&range_profile(action, &still(2050.0))) * cfg.gate_spacing_m();
        // sinc main lobe: 0.886 / B in delay
        let expected = 0.886 * SPEED_OF_LIGHT / (2.0 * bw);
        assert!(
            (width_m / expected - 1.0).abs() < 0.1,
            "{action}: {width_m} m vs {expected} m"
        );
    }
}

#[test]
fn peak_height_does_not_depend_on_subband() {
    let target = still(2043.3);
    let peaks: Vec<f64> = ["10000", "01000", "00100", "00001"]
        .iter()
        .map(|a| range_profile(m(a), &target).into_iter().fold(0.0, f64::max))
        .collect();
    for p in &peaks[1..] {
        assert!((p / peaks[0] - 1.0).abs() < 1e-9, "{peaks:?}");
    }
}

#[test]
fn compressed_peak_is_pulse_energy_times_amplitude() {
    let cfg = quiet();
    let link = LinkBudget::default();
    // a target exactly on a gate: the peak is N * sqrt(P_s)
    let range = 2000.0 + 40.0 * cfg.gate_spacing_m();
    let peak = range_profile(m("11111"), &still(range)).into_iter().fold(0.0, f64::max);
    let expected = cfg.pulse_samples() as f64 * link.signal_power_w(range).sqrt();
    assert!((peak / expected - 1.0).abs() < 1e-6, "{peak} vs {expected}");
}

fn exp_map(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| Exp1.sample(&mut rng))
}

#[test]
fn cfar_false_alarm_rate_is_calibrated() {
    let power = exp_map(1000, 1000, 11);
    for pfa in [1e-2, 1e-3] {
        let cfg = CfarConfig {
            desired_pfa: pfa,
            ..CfarConfig::default()
        };
        let out = cfar_power(&power, &cfg).unwrap();
        let rate = out.detections.iter().filter(|&&d| d).count() as f64 / power.len() as f64;
        assert!(rate > pfa / 3.0 && rate < pfa * 3.0, "pfa {pfa}: measured {rate}");
    }
}

#[test]
fn strong_cell_is_found_in_noise() {
    let mut power = exp_map(200, 64, 5);
    power[[100, 30]] = 1000.0;
    let cfg = CfarConfig {
        desired_pfa: 1e-4,
        ..CfarConfig::default()
    };
    let out = cfar_power(&power, &cfg).unwrap();
    assert!(out.detections[[100, 30]]);
}

#[test]
fn degenerate_window_is_an_error() {
    let cfg = CfarConfig::default();
    assert!(cfar_power(&Array2::from_elem((5, 3), 1.0), &cfg).is_err());
}

proptest! {
    #[test]
    fn flat_maps_never_alarm(level in 1e-6f64..1e6, pfa in 1e-8f64..0.36, rows in 1usize..40, cols in 6usize..20) {
        let cfg = CfarConfig { guard_cells: (1, 1), training_cells: (2, 2), desired_pfa: pfa };
        let out = cfar_power(&Array2::from_elem((rows, cols), level), &cfg).unwrap();
        prop_assert!(out.detections.iter().all(|&d| !d));
    }

    #[test]
    fn cfar_scale_reaches_the_log_limit(pfa in 1e-8f64..0.5, n in 1usize..500) {
        let a = ca_cfar_scale(pfa, n);
        // `n (pfa^(-1/n) - 1)` decreases towards `-ln pfa`
        prop_assert!(a >= -pfa.ln() - 1e-9);
        prop_assert!(a <= ca_cfar_scale(pfa, 1) + 1e-9);
    }

    #[test]
    fn sinr_is_monotone(range in 100.0f64..1e5, nc in 0usize..5, bw in 1e6f64..1e9) {
        let link = LinkBudget::default();
        let base = sinr(&link, range, nc, 5, bw).unwrap();
        prop_assert!(sinr(&link, range * 1.5, nc, 5, bw).unwrap() < base);
        prop_assert!(sinr(&link, range, nc, 5, bw * 2.0).unwrap() < base);
        if nc < 5 {
            prop_assert!(sinr(&link, range, nc + 1, 5, bw).unwrap() < base);
        }
    }

    #[test]
    fn roc_rates_are_probabilities(outcomes in proptest::collection::vec((any::<bool>(), 0usize..50, 50usize..100), 1..30)) {
        let o: Vec<CpiOutcome> = outcomes
            .into_iter()
            .map(|(d, f, n)| CpiOutcome { target_detected: d, false_alarms: f, n_cells: n })
            .collect();
        let (fa, pd) = roc_point(&o).unwrap();
        prop_assert!((0.0..=1.0).contains(&fa) && (0.0..=1.0).contains(&pd));
    }
}

#[test]
fn threshold_sweep_is_nested() {
    let cfg = RadarConfig::default();
    let link = LinkBudget::default();
    let actions = vec![m("11111"); 32];
    let theta = vec![m("00110"); 32];
    let target = TargetTrack {
        initial_range_m: 2500.0,
        radial_velocity_mps: 6.0,
        amplitude_scale: 0.3,
    };
    let map = simulate_cpi(&cfg, &link, &actions, &theta, Some(&target), 4).unwrap();
    let pfas = [1e-6, 1e-4, 1e-2, 1e-1];
    let sweep = ca_cfar_sweep(&map, &CfarConfig::default(), &pfas).unwrap();
    let truth = map
        .gate_of(2500.0)
        .map(|g| (g, map.doppler_bin_of(6.0, link.wavelength_m)));
    let mut last: Option<CpiOutcome> = None;
    for (k, det) in sweep.iter().enumerate() {
        if k > 0 {
            // a looser threshold keeps every earlier detection
            assert!(sweep[k - 1].iter().zip(det.iter()).all(|(a, b)| !a || *b));
        }
        let o = score_detections(det, truth);
        if let Some(prev) = last {
            assert!(o.false_alarms >= prev.false_alarms);
            assert!(o.target_detected || !prev.target_detected);
        }
        last = Some(o);
    }
    let none = Array2::from_elem(map.power().dim(), false);
    let all = Array2::from_elem(map.power().dim(), true);
    assert_eq!(roc_point(&[score_detections(&none, truth)]).unwrap(), (0.0, 0.0));
    assert_eq!(roc_point(&[score_detections(&all, truth)]).unwrap(), (1.0, 1.0));
}

#[test]
fn hopping_raises_doppler_sidelobes() {
    let cfg = RadarConfig {
        range_min_m: 2000.0,
        range_max_m: 2200.0,
        include_noise: false,
        ..RadarConfig::default()
    };
    let link = LinkBudget::default();
    let target = TargetTrack {
        initial_range_m: 2100.3,
        radial_velocity_mps: 12.0,
        amplitude_scale: 1.0,
    };
    let n = 64;
    let quiet = vec![SubbandMask::empty(5); n];
    let fixed = vec![m("11000"); n];
    let hopping: Vec<SubbandMask> = (0..n).map(|p| if p % 2 == 0 { m("11000") } else { m("00011") }).collect();
    let f = simulate_cpi(&cfg, &link, &fixed, &quiet, Some(&target), 0).unwrap();
    let h = simulate_cpi(&cfg, &link, &hopping, &quiet, Some(&target), 0).unwrap();
    let gate = f.gate_of(2100.3).unwrap();
    let (rf, rh) = (f.doppler_sidelobe_ratio(gate), h.doppler_sidelobe_ratio(gate));
    assert!(rh > rf, "hopping {rh:e} vs fixed {rf:e}");
}

#[test]
fn sense_and_avoid_on_the_sweep_has_fixed_metrics() {
    let src = InterferenceSource::Sweep(SweepGenerator::new(5));
    let mut env = SpectrumEnv::new(EnvConfig::default(), src, 3).unwrap();
    let mut agent = SaaAgent::new(env.actions().clone());
    let log = run_online_evaluation(&mut agent, &mut env, 4, 125, false).unwrap();
    let row = aggregate_metrics(&log.steps, &EnvConfig::default().channel, &LinkBudget::default()).unwrap();
    assert_eq!(row.avg_bandwidth_mhz, 64.0);
    assert_eq!(row.pct_collision_steps, 60.0);
    assert_eq!(row.pct_adaptation_steps, 100.0);
    assert_eq!(row.pct_missed_opp_steps, 40.0);
}
