use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sqr_core::array::{build_irregular_geometry, steering_vector, ArrayGeometry, Direction};
use sqr_core::cochlea::{compressed_envelope, to_cochleogram, CochleogramSpec};
use sqr_core::simulate::{synthesize_scene, Scene, SimConfig};
use sqr_core::waveform::{matched_filter, Signal, WaveformSpec};

const FS: f64 = 450e3;

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let s: f64 = b.iter().map(|y| y * y).sum();
    (d / s.max(1e-300)).sqrt()
}

fn scaled(geom: &ArrayGeometry, k: f64) -> ArrayGeometry {
    let mics = geom.mic_positions().iter().map(|p| p.map(|v| v * k)).collect();
    ArrayGeometry::new("scaled", mics, geom.emitter_position().map(|v| v * k)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn steering_depends_on_frequency_times_delay(
        seed in 0u64..500, az in -60.0f64..60.0, el in -40.0f64..40.0, f in 20e3f64..90e3,
    ) {
        let geom = build_irregular_geometry(seed, 32, 0.08).unwrap();
        let d = Direction::from_degrees(az, el).unwrap();
        let a = steering_vector(&geom, d, f, 343.0);
        let b = steering_vector(&scaled(&geom, 0.5), d, 2.0 * f, 343.0);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn steering_is_conjugate_symmetric_in_frequency(seed in 0u64..500, az in -60.0f64..60.0, f in 1e3f64..100e3) {
        let geom = build_irregular_geometry(seed, 32, 0.08).unwrap();
        let d = Direction::from_degrees(az, 10.0).unwrap();
        let pos = steering_vector(&geom, d, f, 343.0);
        let neg = steering_vector(&geom, d, -f, 343.0);
        for (p, n) in pos.iter().zip(&neg) {
            prop_assert!((p.conj() - n).norm() < 1e-12);
        }
    }

    #[test]
    fn matched_filter_equals_direct_correlation(seed in 0u64..1000, n in 64usize..4096, frac in 0.05f64..1.0) {
        let m = ((n as f64 * frac) as usize).max(1);
        let x = noise(seed, n);
        let t = noise(seed ^ 0xabc, m);
        let fast = matched_filter(&Signal::new(x.clone(), FS).unwrap(), &Signal::new(t.clone(), FS).unwrap()).unwrap();
        let direct: Vec<f64> = (0..n)
            .map(|k| t.iter().enumerate().filter(|(i, _)| k + i < n).map(|(i, v)| x[k + i] * v).sum())
            .collect();
        prop_assert!(rel_l2(fast.samples(), &direct) < 1e-9);
    }

    #[test]
    fn matched_filter_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (x, y, t) = (noise(seed, 1500), noise(seed + 1, 1500), noise(seed + 2, 300));
        let tpl = Signal::new(t, FS).unwrap();
        let mf = |v: Vec<f64>| matched_filter(&Signal::new(v, FS).unwrap(), &tpl).unwrap().into_samples();
        let combined = mf(x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect());
        let separate: Vec<f64> = mf(x).iter().zip(mf(y)).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(rel_l2(&combined, &separate) < 1e-9);
    }

    #[test]
    fn cochleogram_is_bounded_and_finite(seed in 0u64..1000, amp in 1e-6f64..1e3) {
        let x: Vec<f64> = noise(seed, 9000).into_iter().map(|v| v * amp).collect();
        let c = to_cochleogram(&Signal::new(x, FS).unwrap(), &CochleogramSpec::default()).unwrap();
        prop_assert!(c.values().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn louder_input_never_lowers_envelope(seed in 0u64..1000, alpha in 1.0f64..20.0) {
        let spec = CochleogramSpec::default();
        let x = noise(seed, 9000);
        let loud: Vec<f64> = x.iter().map(|v| v * alpha).collect();
        let a = compressed_envelope(&Signal::new(x, FS).unwrap(), &spec).unwrap();
        let b = compressed_envelope(&Signal::new(loud, FS).unwrap(), &spec).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(p, q)| q >= p));
    }
}

fn burst(onset: usize, n: usize) -> Signal {
    let mut x = vec![0.0; n];
    for (i, v) in x.iter_mut().skip(onset).take(300).enumerate() {
        let w = (std::f64::consts::PI * i as f64 / 300.0).sin().powi(2);
        *v = w * (2.0 * std::f64::consts::PI * 50e3 * i as f64 / FS).sin();
    }
    Signal::new(x, FS).unwrap()
}

#[test]
fn delaying_by_one_frame_moves_the_peak_one_column() {
    let spec = CochleogramSpec::default();
    let n = 9000;
    let frame = n / spec.n_frames;
    for onset in [1500, 3000, 4700, 6100] {
        let a = to_cochleogram(&burst(onset, n), &spec).unwrap().brightest_frame();
        let b = to_cochleogram(&burst(onset + frame, n), &spec).unwrap().brightest_frame();
        let shift = b as i64 - a as i64;
        assert!((0..=2).contains(&shift), "onset {onset}: {a} -> {b}");
    }
}

fn single(range: f64, offset: [f64; 2]) -> Scene {
    let cfg = SimConfig::default();
    Scene {
        reflectors: vec![cfg.reflector(3, offset)],
        constellation_id: 0,
        center_range: range,
        orientation: 0.0,
        noise_snr_db: None,
    }
}

fn energy(ch: &[f64]) -> f64 {
    ch.iter().map(|v| v * v).sum()
}

#[test]
fn echoes_superpose() {
    let cfg = SimConfig::default();
    let geom = build_irregular_geometry(4, 32, 0.08).unwrap();
    let wf = WaveformSpec::default();
    let a = single(1.2, [0.1, 0.0]);
    let b = single(1.2, [-0.05, 0.08]);
    let both = Scene {
        reflectors: vec![a.reflectors[0].clone(), b.reflectors[0].clone()],
        ..a.clone()
    };
    let ra = synthesize_scene(&a, &geom, &wf, &cfg, 0).unwrap();
    let rb = synthesize_scene(&b, &geom, &wf, &cfg, 0).unwrap();
    let rab = synthesize_scene(&both, &geom, &wf, &cfg, 0).unwrap();
    let sum = ra.add(&rb).unwrap();
    for (x, y) in rab.channels().iter().zip(sum.channels()) {
        let scale = energy(y).sqrt();
        let diff = energy(&x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>()).sqrt();
        assert!(diff <= 1e-9 * scale, "{diff} vs {scale}");
    }
}

#[test]
fn echo_energy_falls_as_fourth_power_of_range() {
    let cfg = SimConfig::default();
    let geom = build_irregular_geometry(4, 32, 0.08).unwrap();
    let wf = WaveformSpec::default();
    let e = |r: f64| energy(&synthesize_scene(&single(r, [0.0, 0.0]), &geom, &wf, &cfg, 0).unwrap().channels()[0]);
    for (r1, r2) in [(0.6, 1.2), (1.0, 2.5)] {
        let ratio = e(r1) / e(r2);
        assert_relative_eq!(ratio, (r2 / r1).powi(4), max_relative = 0.01);
    }
}

#[test]
fn farther_reflectors_arrive_later() {
    let cfg = SimConfig::default();
    let geom = build_irregular_geometry(4, 32, 0.08).unwrap();
    let wf = WaveformSpec::default();
    let first = |r: f64| {
        let rec = synthesize_scene(&single(r, [0.02, -0.03]), &geom, &wf, &cfg, 0).unwrap();
        let ch = &rec.channels()[5];
        let peak = ch.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ch.iter().position(|v| v.abs() > 1e-3 * peak).unwrap()
    };
    let idx: Vec<usize> = [0.5, 0.8, 1.3, 2.0, 2.9].iter().map(|&r| first(r)).collect();
    assert!(idx.windows(2).all(|w| w[1] > w[0]), "{idx:?}");
}
