//! Echo synthesis for reflector constellations.
//!
//! The backplate center sits on boresight at `center_range` and is rotated
//! by the horizontal orientation `γ` about the z-axis. Each hemispherical
//! reflector returns a rim echo plus a delayed cavity echo; the spacing of
//! the resulting spectral notches depends on the reflector radius, which is
//! what the classifiers learn to read.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::{self, ArrayGeometry, Direction, Vec3};
use crate::dsp;
use crate::error::{ensure, Error, Result};
use crate::waveform::{fm_sweep, Signal, WaveformSpec};

pub const N_REFLECTORS: usize = 4;
pub const N_CONSTELLATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Number of reflector size classes.
    pub n_classes: usize,
    /// Smallest and largest reflector radius (m); classes are log-spaced between.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Fraction of the sphere kept by the cut (depth / radius).
    pub cut_factor: f64,
    /// Relative strength of the cavity return.
    pub cavity_gain: f64,
    /// Floor on the aspect attenuation `cos(aspect)`.
    pub min_aspect_gain: f64,
    /// Inter-reflector spacing of the constellation layouts (m).
    pub spacing: f64,
    /// Recording window (s).
    pub window: f64,
    pub speed_of_sound: f64,
    pub max_orientation_deg: f64,
    /// Allow the same size class more than once in a constellation.
    pub allow_duplicates: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_classes: 7,
            radius_min: 0.010,
            radius_max: 0.040,
            cut_factor: 0.66,
            cavity_gain: 0.8,
            min_aspect_gain: 0.1,
            spacing: 0.12,
            window: 0.020,
            speed_of_sound: array::SPEED_OF_SOUND,
            max_orientation_deg: 60.0,
            allow_duplicates: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.n_classes >= 1, || "n_classes must be >= 1".into())?;
        ensure(self.allow_duplicates || self.n_classes >= N_REFLECTORS, || {
            format!(
                "distinct class policy needs n_classes >= {N_REFLECTORS}, got {}",
                self.n_classes
            )
        })?;
        ensure(self.radius_min > 0.0 && self.radius_max >= self.radius_min, || {
            "radii must satisfy 0 < radius_min <= radius_max".into()
        })?;
        ensure(self.cut_factor > 0.0 && self.cut_factor <= 1.0, || {
            format!("cut_factor {} outside (0, 1]", self.cut_factor)
        })?;
        ensure((0.0..=1.0).contains(&self.cavity_gain), || {
            format!("cavity_gain {} outside [0, 1]", self.cavity_gain)
        })?;
        ensure(self.min_aspect_gain > 0.0 && self.min_aspect_gain <= 1.0, || {
            "min_aspect_gain outside (0, 1]".into()
        })?;
        ensure(self.spacing > 0.0, || "spacing must be positive".into())?;
        ensure(self.window > 0.0, || "window must be positive".into())?;
        ensure(self.speed_of_sound > 0.0, || "speed_of_sound must be positive".into())?;
        ensure((0.0..90.0).contains(&self.max_orientation_deg), || {
            "max_orientation_deg must lie in [0, 90)".into()
        })?;
        Ok(())
    }

    /// Radius of size class `class` (log-spaced between the bounds).
    pub fn class_radius(&self, class: usize) -> f64 {
        if self.n_classes <= 1 {
            return self.radius_min;
        }
        let t = class as f64 / (self.n_classes - 1) as f64;
        self.radius_min * (self.radius_max / self.radius_min).powf(t)
    }

    pub fn reflector(&self, class: usize, offset: [f64; 2]) -> Reflector {
        Reflector {
            size_class: class,
            radius: self.class_radius(class),
            cut_factor: self.cut_factor,
            offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    pub size_class: usize,
    /// Sphere radius `d` (m).
    pub radius: f64,
    pub cut_factor: f64,
    /// Horizontal and vertical position on the backplate (m).
    pub offset: [f64; 2],
}

impl Reflector {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        ensure(self.radius > 0.0, || format!("radius {} must be positive", self.radius))?;
        ensure(self.cut_factor > 0.0 && self.cut_factor <= 1.0, || {
            format!("cut_factor {} outside (0, 1]", self.cut_factor)
        })?;
        ensure(self.size_class < n_classes, || {
            format!("size_class {} outside [0, {n_classes})", self.size_class)
        })?;
        ensure(self.offset.iter().all(|v| v.is_finite()), || "offset must be finite".into())
    }

    /// Round-trip delay between the rim and cavity returns.
    pub fn cavity_delay(&self, speed_of_sound: f64) -> f64 {
        2.0 * self.radius * self.cut_factor / speed_of_sound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub reflectors: Vec<Reflector>,
    pub constellation_id: usize,
    /// Distance from the array origin to the backplate center (m).
    pub center_range: f64,
    /// Horizontal rotation of the backplate (rad).
    pub orientation: f64,
    /// Noise level relative to the strongest echo; `None` is noiseless.
    pub noise_snr_db: Option<f64>,
}

impl Scene {
    /// A four-reflector constellation with `classes[i]` placed at layout slot `i`.
    pub fn constellation(
        classes: [usize; N_REFLECTORS],
        constellation_id: usize,
        center_range: f64,
        orientation: f64,
        noise_snr_db: Option<f64>,
        cfg: &SimConfig,
    ) -> Result<Self> {
        let layout = constellation_layout(constellation_id, cfg.spacing)?;
        let reflectors = classes
            .iter()
            .zip(layout)
            .map(|(&c, off)| cfg.reflector(c, off))
            .collect();
        let scene = Self {
            reflectors,
            constellation_id,
            center_range,
            orientation,
            noise_snr_db,
        };
        scene.validate(cfg)?;
        Ok(scene)
    }

    /// Full invariant check, including the four-reflector count and the
    /// distinct-class policy.
    pub fn validate(&self, cfg: &SimConfig) -> Result<()> {
        ensure(self.reflectors.len() == N_REFLECTORS, || {
            format!("constellation needs {N_REFLECTORS} reflectors, got {}", self.reflectors.len())
        })?;
        if !cfg.allow_duplicates {
            let mut classes: Vec<usize> = self.reflectors.iter().map(|r| r.size_class).collect();
            classes.sort_unstable();
            classes.dedup();
            ensure(classes.len() == N_REFLECTORS, || {
                "duplicate size classes in constellation".into()
            })?;
        }
        self.validate_geometry(cfg)
    }

    /// Checks everything except the reflector count; single-reflector and
    /// empty scenes are used for classifier training and tests.
    pub fn validate_geometry(&self, cfg: &SimConfig) -> Result<()> {
        ensure(self.constellation_id < N_CONSTELLATIONS, || {
            format!("constellation_id {} outside [0, {N_CONSTELLATIONS})", self.constellation_id)
        })?;
        ensure(self.center_range > 0.3 && self.center_range <= 3.0, || {
            format!("center_range {} outside (0.3, 3] m", self.center_range)
        })?;
        ensure(self.orientation.abs() <= cfg.max_orientation_deg.to_radians() + 1e-12, || {
            format!(
                "orientation {:.2} deg exceeds +/-{} deg",
                self.orientation.to_degrees(),
                cfg.max_orientation_deg
            )
        })?;
        if let Some(snr) = self.noise_snr_db {
            ensure(snr.is_finite(), || "noise_snr_db must be finite".into())?;
        }
        for r in &self.reflectors {
            r.validate(cfg.n_classes)?;
        }
        Ok(())
    }

    pub fn center_position(&self) -> Vec3 {
        [self.center_range, 0.0, 0.0]
    }

    /// World position of reflector `index`.
    pub fn reflector_position(&self, index: usize) -> Vec3 {
        let [u, v] = self.reflectors[index].offset;
        let (s, c) = self.orientation.sin_cos();
        [self.center_range - u * s, u * c, v]
    }

    /// Outward normal of the backplate (pointing back toward the sensor side).
    pub fn backplate_normal(&self) -> Vec3 {
        let (s, c) = self.orientation.sin_cos();
        [-c, -s, 0.0]
    }

    /// Angle between the backplate normal and the line from reflector
    /// `index` to `observer`.
    pub fn aspect_angle(&self, index: usize, observer: &Vec3) -> f64 {
        let p = self.reflector_position(index);
        let v = [observer[0] - p[0], observer[1] - p[1], observer[2] - p[2]];
        let n = self.backplate_normal();
        (array::dot(&n, &v) / array::norm(&v)).clamp(-1.0, 1.0).acos()
    }

    pub fn size_classes(&self) -> Vec<usize> {
        self.reflectors.iter().map(|r| r.size_class).collect()
    }
}

/// Four backplate offsets (m) for the five constellation shapes:
/// 0 square, 1 diamond, 2 T, 3 L, 4 line.
pub fn constellation_layout(constellation_id: usize, spacing: f64) -> Result<[[f64; 2]; N_REFLECTORS]> {
    let s = spacing;
    let h = s / 2.0;
    let layout = match constellation_id {
        0 => [[-h, h], [h, h], [-h, -h], [h, -h]],
        1 => {
            let r = s / 2f64.sqrt();
            [[0.0, r], [-r, 0.0], [r, 0.0], [0.0, -r]]
        }
        2 => [[-s, h], [0.0, h], [s, h], [0.0, -h]],
        3 => [[-h, s], [-h, 0.0], [-h, -s], [h, -s]],
        4 => [[-1.5 * s, 0.0], [-h, 0.0], [h, 0.0], [1.5 * s, 0.0]],
        _ => {
            return Err(Error::InvalidParameter(format!(
                "constellation_id {constellation_id} outside [0, {N_CONSTELLATIONS})"
            )))
        }
    };
    Ok(layout)
}

/// Azimuth and elevation of reflector `index` as seen from the array origin.
pub fn reflector_direction(scene: &Scene, index: usize) -> Result<Direction> {
    ensure(index < scene.reflectors.len(), || {
        format!("reflector index {index} outside scene of {}", scene.reflectors.len())
    })?;
    Ok(Direction::toward(&scene.reflector_position(index)))
}

/// Two-path echo response `a(aspect) (1 + β exp(-j 2π f τ))` of a reflector.
pub fn reflector_frequency_response(
    reflector: &Reflector,
    aspect: f64,
    freqs: &[f64],
    cfg: &SimConfig,
) -> Vec<Complex64> {
    let gain = aspect.cos().max(cfg.min_aspect_gain);
    let tau = reflector.cavity_delay(cfg.speed_of_sound);
    freqs
        .iter()
        .map(|&f| gain * (1.0 + cfg.cavity_gain * Complex64::from_polar(1.0, -2.0 * PI * f * tau)))
        .collect()
}

/// Time-domain samples for every microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelRecording {
    channels: Vec<Vec<f64>>,
    sample_rate: f64,
    geometry: String,
}

impl MultiChannelRecording {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: f64, geom: &ArrayGeometry) -> Result<Self> {
        ensure(channels.len() == geom.n_mics(), || {
            format!("{} channels for {} microphones", channels.len(), geom.n_mics())
        })?;
        let n = channels.first().map_or(0, Vec::len);
        ensure(n > 0 && channels.iter().all(|c| c.len() == n), || {
            "channels must be non-empty and of equal length".into()
        })?;
        ensure(channels.iter().flatten().all(|v| v.is_finite()), || {
            "recording holds non-finite samples".into()
        })?;
        ensure(sample_rate > 0.0, || "sample_rate must be positive".into())?;
        Ok(Self {
            channels,
            sample_rate,
            geometry: geom.name().to_string(),
        })
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channel(&self, m: usize) -> Signal {
        Signal::new(self.channels[m].clone(), self.sample_rate).expect("validated channel")
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn geometry_name(&self) -> &str {
        &self.geometry
    }

    /// Element-wise sum with another recording of the same shape.
    pub fn add(&self, other: &Self) -> Result<Self> {
        ensure(
            self.channels.len() == other.channels.len() && self.n_samples() == other.n_samples(),
            || "recording shapes differ".into(),
        )?;
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(Self {
            channels,
            sample_rate: self.sample_rate,
            geometry: self.geometry.clone(),
        })
    }
}

/// Adds `gain * H(f) * exp(-j 2π f delay)` times the source spectrum into `acc`
/// for the first `nfft/2 + 1` bins.
fn accumulate_delayed(
    acc: &mut [Complex64],
    source: &[Complex64],
    response: Option<&[Complex64]>,
    gain: f64,
    delay: f64,
    nfft: usize,
    sample_rate: f64,
) {
    let half = nfft / 2;
    let step = Complex64::from_polar(1.0, -2.0 * PI * delay * sample_rate / nfft as f64);
    let mut phasor = Complex64::new(gain, 0.0);
    for k in 0..=half {
        // refresh the recurrence periodically to bound round-off drift
        if k % 512 == 0 {
            phasor = Complex64::from_polar(gain, -2.0 * PI * delay * dsp::bin_frequency(k, nfft, sample_rate));
        }
        let h = response.map_or(Complex64::new(1.0, 0.0), |r| r[k]);
        acc[k] += source[k] * h * phasor;
        phasor *= step;
    }
}

fn spectrum_to_time(mut spec: Vec<Complex64>, n_out: usize) -> Vec<f64> {
    dsp::hermitian_fill(&mut spec);
    dsp::fft_inverse(&mut spec);
    spec[..n_out].iter().map(|c| c.re).collect()
}

/// Synthesizes the multi-channel recording of `scene`.
///
/// Each reflector echo is the emitted sweep filtered by the reflector
/// response, delayed by the emitter→reflector→microphone path and scaled by
/// `1 / (r_out r_back)`. White Gaussian noise at `scene.noise_snr_db`
/// relative to the strongest echo (mean power over the sweep duration on
/// microphone 0; unit reference power when there is no echo) is added.
pub fn synthesize_scene(
    scene: &Scene,
    geom: &ArrayGeometry,
    wf: &WaveformSpec,
    cfg: &SimConfig,
    seed: u64,
) -> Result<MultiChannelRecording> {
    scene.validate_geometry(cfg)?;
    cfg.validate()?;
    let chirp = fm_sweep(wf)?;
    let fs = wf.sample_rate;
    let n_win = (cfg.window * fs).round() as usize;
    let nfft = (n_win + chirp.len() + 512).next_power_of_two();
    let source = dsp::rfft_padded(chirp.samples(), nfft);
    let half = nfft / 2;
    let freqs: Vec<f64> = (0..=half).map(|k| dsp::bin_frequency(k, nfft, fs)).collect();
    let emitter = geom.emitter_position();

    let mut spectra = vec![vec![Complex64::new(0.0, 0.0); nfft]; geom.n_mics()];
    let mut strongest: Option<f64> = None;
    for (i, refl) in scene.reflectors.iter().enumerate() {
        let p = scene.reflector_position(i);
        let r_out = array::distance(&emitter, &p);
        let aspect = scene.aspect_angle(i, &emitter);
        let response = reflector_frequency_response(refl, aspect, &freqs, cfg);
        for (m, mic) in geom.mic_positions().iter().enumerate() {
            let r_back = array::distance(&p, mic);
            let delay = (r_out + r_back) / cfg.speed_of_sound;
            let onset = (delay * fs).floor() as usize;
            if onset >= n_win {
                return Err(Error::WindowTooShort {
                    arrival: onset,
                    window: n_win,
                });
            }
            let gain = 1.0 / (r_out * r_back);
            if m == 0 && scene.noise_snr_db.is_some() {
                // Parseval over the positive half-spectrum
                let energy: f64 = response
                    .iter()
                    .zip(&source)
                    .enumerate()
                    .map(|(k, (h, s))| {
                        let w = if k == 0 || k == half { 1.0 } else { 2.0 };
                        w * (h * s).norm_sqr()
                    })
                    .sum::<f64>()
                    * gain
                    * gain
                    / nfft as f64;
                let power = energy / chirp.len() as f64;
                strongest = Some(strongest.map_or(power, |s: f64| s.max(power)));
            }
            accumulate_delayed(&mut spectra[m], &source, Some(&response), gain, delay, nfft, fs);
        }
    }

    let mut channels: Vec<Vec<f64>> = spectra.into_iter().map(|s| spectrum_to_time(s, n_win)).collect();
    if let Some(snr) = scene.noise_snr_db {
        let reference = strongest.unwrap_or(1.0);
        let sigma = (reference / 10f64.powf(snr / 10.0)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ch in channels.iter_mut() {
            for v in ch.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
    }
    MultiChannelRecording::new(channels, fs, geom)
}

/// Far-field plane wave carrying `signal` from `dir`, arriving at the array
/// origin `onset` seconds into an `n_samples` recording. Noiseless.
pub fn plane_wave_recording(
    geom: &ArrayGeometry,
    dir: Direction,
    signal: &Signal,
    onset: f64,
    n_samples: usize,
    speed_of_sound: f64,
) -> Result<MultiChannelRecording> {
    ensure(n_samples > 0, || "n_samples must be positive".into())?;
    let fs = signal.sample_rate();
    let nfft = (n_samples + signal.len() + 512).next_power_of_two();
    let source = dsp::rfft_padded(signal.samples(), nfft);
    let channels = array::plane_wave_delays(geom, dir, speed_of_sound)
        .into_iter()
        .map(|tau| {
            let mut spec = vec![Complex64::new(0.0, 0.0); nfft];
            accumulate_delayed(&mut spec, &source, None, 1.0, onset + tau, nfft, fs);
            spectrum_to_time(spec, n_samples)
        })
        .collect();
    MultiChannelRecording::new(channels, fs, geom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::build_irregular_geometry;
    use approx::assert_relative_eq;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn class_radii_are_log_spaced() {
        let c = cfg();
        assert_relative_eq!(c.class_radius(0), 0.010, epsilon = 1e-15);
        assert_relative_eq!(c.class_radius(6), 0.040, epsilon = 1e-15);
        let r1 = c.class_radius(1) / c.class_radius(0);
        let r2 = c.class_radius(5) / c.class_radius(4);
        assert_relative_eq!(r1, r2, epsilon = 1e-12);
    }

    #[test]
    fn layouts() {
        let s = 0.12;
        let sq = constellation_layout(0, s).unwrap();
        for o in sq {
            assert_relative_eq!(o[0].abs(), 0.06, epsilon = 1e-15);
            assert_relative_eq!(o[1].abs(), 0.06, epsilon = 1e-15);
        }
        for id in 0..N_CONSTELLATIONS {
            let l = constellation_layout(id, s).unwrap();
            for i in 0..4 {
                for j in (i + 1)..4 {
                    assert!((l[i][0] - l[j][0]).hypot(l[i][1] - l[j][1]) > 1e-6);
                }
            }
        }
        let line = constellation_layout(4, s).unwrap();
        assert!(line.iter().all(|o| o[1] == 0.0));
        assert!(constellation_layout(5, s).is_err());
    }

    #[test]
    fn scene_validation() {
        let c = cfg();
        assert!(Scene::constellation([0, 1, 2, 3], 0, 1.0, 0.0, None, &c).is_ok());
        assert!(Scene::constellation([0, 0, 2, 3], 0, 1.0, 0.0, None, &c).is_err());
        assert!(Scene::constellation([0, 1, 2, 9], 0, 1.0, 0.0, None, &c).is_err());
        assert!(Scene::constellation([0, 1, 2, 3], 0, 3.5, 0.0, None, &c).is_err());
        assert!(Scene::constellation([0, 1, 2, 3], 0, 1.0, 1.2, None, &c).is_err());
        let dup = SimConfig { allow_duplicates: true, ..cfg() };
        assert!(Scene::constellation([0, 0, 2, 3], 0, 1.0, 0.0, None, &dup).is_ok());
    }

    #[test]
    fn flat_response_without_cavity() {
        let c = SimConfig { cavity_gain: 0.0, ..cfg() };
        let r = c.reflector(3, [0.0, 0.0]);
        let freqs: Vec<f64> = (0..100).map(|i| 20e3 + 700.0 * i as f64).collect();
        let h = reflector_frequency_response(&r, 0.3, &freqs, &c);
        for v in &h {
            assert_relative_eq!(v.norm(), 0.3f64.cos(), epsilon = 1e-12);
        }
        let clamped = reflector_frequency_response(&r, 1.55, &freqs, &c);
        assert_relative_eq!(clamped[0].norm(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn notches_at_half_integer_products() {
        let c = cfg();
        let r = c.reflector(2, [0.0, 0.0]);
        let tau = r.cavity_delay(c.speed_of_sound);
        let notch: Vec<f64> = (0..5).map(|k| (k as f64 + 0.5) / tau).collect();
        let h = reflector_frequency_response(&r, 0.0, &notch, &c);
        for v in h {
            assert_relative_eq!(v.norm(), 1.0 - c.cavity_gain, epsilon = 1e-9);
        }
    }

    #[test]
    fn reflector_direction_symmetry() {
        let c = cfg();
        let mut scene = Scene::constellation([0, 1, 2, 3], 0, 1.5, 0.0, None, &c).unwrap();
        // slots 0/1 are the mirrored top pair of the square layout
        let a = reflector_direction(&scene, 0).unwrap();
        let b = reflector_direction(&scene, 1).unwrap();
        assert_relative_eq!(a.azimuth, -b.azimuth, epsilon = 1e-15);
        assert_relative_eq!(a.elevation, b.elevation, epsilon = 1e-15);
        scene.reflectors[0].offset = [0.0, 0.0];
        let d = reflector_direction(&scene, 0).unwrap();
        assert_eq!((d.azimuth, d.elevation), (0.0, 0.0));
        assert!(reflector_direction(&scene, 4).is_err());
    }

    #[test]
    fn window_too_short() {
        let c = SimConfig { window: 0.005, ..cfg() };
        let g = build_irregular_geometry(1, 8, 0.08).unwrap();
        let scene = Scene::constellation([0, 1, 2, 3], 0, 2.0, 0.0, None, &c).unwrap();
        let err = synthesize_scene(&scene, &g, &WaveformSpec::default(), &c, 0).unwrap_err();
        assert!(err.to_string().contains("increase window"), "{err}");
    }
}
