use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rangesim::ranging::*;

#[test]
fn batch_median_subset_reduces_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let (mut batch_err, mut single_err) = (0.0, 0.0);
    for _ in 0..1000 {
        let est: Vec<f64> = (0..10).map(|_| 10.0 + noise.sample(&mut rng)).collect();
        let b = batch_estimate(&est, 10).unwrap().unwrap();
        assert_eq!(b.subset.len(), 5);
        batch_err += (b.final_distance - 10.0).abs();
        single_err += est.iter().map(|e| (e - 10.0).abs()).sum::<f64>() / 10.0;
    }
    assert!(batch_err < single_err, "{batch_err} vs {single_err}");
}

#[test]
fn subset_size_follows_floor_rule() {
    for (n, sent, want) in [(3, 7, 3), (7, 7, 3), (1, 1, 1), (9, 10, 5), (2, 10, 2)] {
        let est: Vec<f64> = (0..n).map(|i| i as f64).collect();
        assert_eq!(batch_estimate(&est, sent).unwrap().unwrap().subset.len(), want, "{n}/{sent}");
    }
}

#[test]
fn median_ties_prefer_lower_index() {
    let b = batch_estimate(&[3.0, 1.0, 2.0, 0.0, 4.0], 5).unwrap().unwrap();
    assert_eq!(b.subset, vec![0, 2]);
    assert_eq!(b.final_distance, 2.5);
}

fn synthetic(n: usize, t_hw: f64, sigma: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    (0..n)
        .map(|_| {
            let d = rng.random_range(1.0..100.0);
            let jitter = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (d, d / SPEED_OF_LIGHT + t_hw / 2.0 + jitter)
        })
        .collect()
}

#[test]
fn latency_fit_noiseless() {
    let fit = calibrate_hardware_latency(&synthetic(50, 200e-9, 0.0, 1)).unwrap();
    assert!((fit.hardware_latency - 200e-9).abs() < 1e-12);
    assert!((fit.slope * SPEED_OF_LIGHT - 1.0).abs() < 1e-9);
}

#[test]
fn latency_fit_with_timing_noise() {
    let fit = calibrate_hardware_latency(&synthetic(1000, 200e-9, 1e-9, 2)).unwrap();
    assert!((fit.hardware_latency - 200e-9).abs() < 0.2e-9, "{}", fit.hardware_latency);
}

#[test]
fn latency_fit_rejects_degenerate_input() {
    assert!(calibrate_hardware_latency(&[(5.0f64, 1e-7)]).is_err());
    assert!(calibrate_hardware_latency(&[(5.0f64, 1e-7), (5.0, 1e-7), (5.0, 2e-7)]).is_err());
}

#[test]
fn timing_equations_invert_over_random_observations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = 1e-8;
    for _ in 0..100_000 {
        let tof: f64 = rng.random_range(0.0..1e-6);
        let obs = RangingObservation::from_tof(
            tof,
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1e-3),
            rng.random_range(1e-7..1e-5),
            rng.random_range(-t..t),
            rng.random_range(0.0..1e-6),
        );
        assert!(obs.received > obs.sent);
        assert!((compute_tof(&obs) - tof).abs() < 1e-15);
    }
}

#[test]
fn tof_partial_derivatives() {
    let base = RangingObservation {
        sent: 0.1f64,
        received: 0.1 + 3e-6,
        waiting: 1e-6,
        response_duration: 5e-7,
        timing_error: 2e-9,
        hardware_latency: 1e-7,
    };
    let h = 1e-9;
    let f0 = compute_tof(&base);
    let d = |o: RangingObservation<f64>| (compute_tof(&o) - f0) / h;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-5;
    assert!(close(d(RangingObservation { received: base.received + h, ..base }), 0.5));
    assert!(close(d(RangingObservation { sent: base.sent + h, ..base }), -0.5));
    assert!(close(d(RangingObservation { waiting: base.waiting + h, ..base }), -0.5));
    assert!(close(d(RangingObservation { response_duration: base.response_duration + h, ..base }), -0.5));
    assert!(close(d(RangingObservation { hardware_latency: base.hardware_latency + h, ..base }), -0.5));
    assert!(close(d(RangingObservation { timing_error: base.timing_error + h, ..base }), -1.0));
}

#[test]
fn negative_tof_passes_through() {
    let obs = RangingObservation::from_tof(-3e-9f64, 0.0, 1e-6, 1e-6, 0.0, 0.0);
    assert!((compute_tof(&obs) + 3e-9).abs() < 1e-18);
    assert!(tof_to_distance(compute_tof(&obs)) < 0.0);
}

#[test]
fn single_precision_arithmetic() {
    let obs = RangingObservation {
        sent: 0.0f32,
        received: 2000e-9,
        waiting: 500e-9,
        response_duration: 1000e-9,
        timing_error: 0.0,
        hardware_latency: 0.0,
    };
    assert!((compute_tof(&obs) - 250e-9).abs() < 1e-12);
    assert!((distance_to_tof(tof_to_distance(1e-8f32)) - 1e-8).abs() < 1e-13);
}
