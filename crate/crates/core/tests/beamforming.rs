use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sqr_core::array::{build_irregular_geometry, steering_vector, Direction};
use sqr_core::beamform::{
    beam_pattern, beam_weights, beamform, constraint_matrix, null_steered_weights, projection_matrix, BeamformConfig,
};
use sqr_core::simulate::{plane_wave_recording, MultiChannelRecording};
use sqr_core::waveform::{fm_sweep, WaveformSpec};
use sqr_core::Error;

fn dir() -> impl Strategy<Value = Direction> {
    (-60.0f64..60.0, -40.0f64..40.0).prop_map(|(a, e)| Direction::from_degrees(a, e).unwrap())
}

fn recording(seed: u64, n: usize) -> MultiChannelRecording {
    let geom = build_irregular_geometry(9, 32, 0.08).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = (0..32).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    MultiChannelRecording::new(ch, 450e3, &geom).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_bin_meets_the_null_constraints(
        seed in 0u64..200, steer in dir(), nulls in prop::collection::vec(dir(), 1..=3),
    ) {
        let geom = build_irregular_geometry(seed, 32, 0.08).unwrap();
        let freqs: Vec<f64> = (0..40).map(|k| 20e3 + k as f64 * 1.7e3).collect();
        match beam_weights(&geom, steer, &nulls, &freqs, &BeamformConfig::default()) {
            Ok(bw) => prop_assert!(bw.max_null_residual(&geom, 343.0) <= 1e-10),
            // random nulls can nearly coincide
            Err(Error::DegenerateNullSet { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn projector_is_hermitian_and_idempotent(
        seed in 0u64..200, nulls in prop::collection::vec(dir(), 1..=3), f in 25e3f64..80e3,
    ) {
        let geom = build_irregular_geometry(seed, 32, 0.08).unwrap();
        let c = constraint_matrix(&geom, &nulls, f, 343.0).unwrap();
        if let Ok(p) = projection_matrix(&c) {
            prop_assert!(p.adjoint().frobenius_distance(&p) <= 1e-10);
            prop_assert!(p.mul(&p).frobenius_distance(&p) <= 1e-10);
        }
    }

    #[test]
    fn beamforming_is_linear(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0, steer in dir(), null in dir()) {
        let (x, y) = (recording(seed, 1024), recording(seed + 7, 1024));
        let geom = build_irregular_geometry(9, 32, 0.08).unwrap();
        let mixed: Vec<Vec<f64>> = x
            .channels()
            .iter()
            .zip(y.channels())
            .map(|(p, q)| p.iter().zip(q).map(|(u, v)| a * u + b * v).collect())
            .collect();
        let z = MultiChannelRecording::new(mixed, 450e3, &geom).unwrap();
        let cfg = BeamformConfig::default();
        let nulls = if steer.angle_to(&null) > 0.1 { vec![null] } else { vec![] };
        let bf = |r: &MultiChannelRecording| beamform(r, &geom, steer, &nulls, &cfg).unwrap().into_samples();
        let lhs = bf(&z);
        let rhs: Vec<f64> = bf(&x).iter().zip(bf(&y)).map(|(u, v)| a * u + b * v).collect();
        let err: f64 = lhs.iter().zip(&rhs).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-9 * scale.max(1e-12));
    }
}

#[test]
fn steering_into_a_null_leaves_nothing() {
    let geom = build_irregular_geometry(1, 32, 0.08).unwrap();
    let d = Direction::from_degrees(12.0, -5.0).unwrap();
    let wd = steering_vector(&geom, d, 40e3, 343.0);
    let c = constraint_matrix(&geom, &[d], 40e3, 343.0).unwrap();
    let w = null_steered_weights(&wd, &c).unwrap();
    assert!(w.iter().all(|v| v.norm() < 1e-12));
}

#[test]
fn plane_wave_from_the_look_direction_passes_at_unit_gain() {
    let geom = build_irregular_geometry(2, 32, 0.08).unwrap();
    let chirp = fm_sweep(&WaveformSpec::default()).unwrap();
    // whole spectrum, so band-limiting does not reshape the pulse
    let cfg = BeamformConfig {
        band_low: 1.0,
        band_high: 225e3,
        ..BeamformConfig::default()
    };
    for (az, el) in [(0.0, 0.0), (25.0, 10.0), (-40.0, -15.0)] {
        let d = Direction::from_degrees(az, el).unwrap();
        let rec = plane_wave_recording(&geom, d, &chirp, 1e-3, 4096, 343.0).unwrap();
        let y = beamform(&rec, &geom, d, &[], &cfg).unwrap();
        let peak = |x: &[f64]| x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ratio = peak(y.samples()) / peak(&rec.channels()[0]);
        assert!((ratio - 1.0).abs() < 0.02, "({az}, {el}): gain {ratio}");
    }
}

#[test]
fn pattern_reads_zero_db_at_the_steer_direction() {
    let geom = build_irregular_geometry(5, 32, 0.08).unwrap();
    let steer = Direction::from_degrees(-20.0, 5.0).unwrap();
    let probes = [steer, Direction::from_degrees(30.0, 0.0).unwrap()];
    let r = beam_pattern(&geom, steer, &[], 60e3, &probes, 343.0).unwrap();
    assert!(r[0].abs() < 1e-9);
    assert!(r[1] < 0.0);
}
