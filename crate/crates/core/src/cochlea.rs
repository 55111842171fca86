//! Gammatone filterbank and cochleogram images.
//!
//! Each channel is a 4th-order gammatone realised as a cascade of complex
//! one-pole low-pass sections applied to the signal shifted down by the
//! channel center frequency, then shifted back up. The cochleogram chain is
//! filterbank → half-wave rectification → 1 ms envelope smoothing → mean
//! pooling into frames → `log(1 + κ x)` → min-max normalization.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::waveform::Signal;

/// Bandwidth of a 4th-order gammatone relative to the ERB of its channel.
const GAMMATONE_BW_FACTOR: f64 = 1.019;

/// Equivalent rectangular bandwidth rate (number of ERBs below `f`).
pub fn erb_rate(f: f64) -> f64 {
    21.4 * (4.37 * f / 1000.0 + 1.0).log10()
}

pub fn inverse_erb_rate(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) * 1000.0 / 4.37
}

/// Equivalent rectangular bandwidth (Hz) at `f`.
pub fn erb_bandwidth(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterbankSpec {
    pub n_channels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub order: usize,
    pub sample_rate: f64,
}

impl Default for FilterbankSpec {
    fn default() -> Self {
        Self {
            n_channels: 40,
            f_min: 25e3,
            f_max: 80e3,
            order: 4,
            sample_rate: 450e3,
        }
    }
}

impl FilterbankSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.n_channels >= 2, || "n_channels must be >= 2".into())?;
        ensure(self.f_min > 0.0 && self.f_min < self.f_max, || {
            format!("need 0 < f_min < f_max, got {} / {}", self.f_min, self.f_max)
        })?;
        ensure(self.f_max < self.sample_rate / 2.0, || {
            format!("f_max {} must be below Nyquist {}", self.f_max, self.sample_rate / 2.0)
        })?;
        ensure(self.order >= 1, || "filter order must be >= 1".into())
    }
}

/// `n` center frequencies equally spaced on the ERB-rate scale from `f_min`
/// to `f_max` inclusive.
pub fn erb_center_frequencies(n: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    if n == 1 {
        return vec![f_min];
    }
    let (lo, hi) = (erb_rate(f_min), erb_rate(f_max));
    (0..n)
        .map(|i| {
            if i == 0 {
                f_min
            } else if i == n - 1 {
                f_max
            } else {
                inverse_erb_rate(lo + (hi - lo) * i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

fn gammatone_channel(x: &[f64], fc: f64, order: usize, fs: f64) -> Vec<f64> {
    let b = GAMMATONE_BW_FACTOR * erb_bandwidth(fc);
    let pole = (-2.0 * PI * b / fs).exp();
    let gain = 1.0 - pole;
    let step = Complex64::from_polar(1.0, 2.0 * PI * fc / fs);
    let mut osc = Complex64::new(1.0, 0.0);
    let mut state = vec![Complex64::new(0.0, 0.0); order];
    let mut out = Vec::with_capacity(x.len());
    for (n, &v) in x.iter().enumerate() {
        if n % 1024 == 0 {
            osc = Complex64::from_polar(1.0, 2.0 * PI * fc * n as f64 / fs);
        }
        let mut s = v * osc.conj();
        for st in state.iter_mut() {
            *st = pole * *st + gain * s;
            s = *st;
        }
        out.push(2.0 * (s * osc).re);
        osc *= step;
    }
    out
}

/// Causal gammatone filterbank; row `k` is the output of channel `k`
/// (ascending center frequency). Each channel has unit gain at its center.
pub fn gammatone_filterbank(sig: &Signal, spec: &FilterbankSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if sig.sample_rate() != spec.sample_rate {
        return Err(Error::SampleRateMismatch {
            left: sig.sample_rate(),
            right: spec.sample_rate,
        });
    }
    let centers = erb_center_frequencies(spec.n_channels, spec.f_min, spec.f_max);
    Ok(centers
        .par_iter()
        .map(|&fc| gammatone_channel(sig.samples(), fc, spec.order, spec.sample_rate))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CochleogramSpec {
    pub filterbank: FilterbankSpec,
    pub n_frames: usize,
    /// Time constant of the envelope low-pass (s).
    pub envelope_tau: f64,
    /// κ in `log(1 + κ x)`.
    pub compression: f64,
    /// Pulse-compress the beamformed signal before the filterbank.
    pub matched_filter: bool,
}

impl Default for CochleogramSpec {
    fn default() -> Self {
        Self {
            filterbank: FilterbankSpec::default(),
            n_frames: 106,
            envelope_tau: 1e-3,
            compression: 1e3,
            matched_filter: true,
        }
    }
}

impl CochleogramSpec {
    pub fn validate(&self) -> Result<()> {
        self.filterbank.validate()?;
        ensure(self.n_frames >= 1, || "n_frames must be >= 1".into())?;
        ensure(self.envelope_tau > 0.0, || "envelope_tau must be positive".into())?;
        ensure(self.compression > 0.0, || "compression must be positive".into())
    }
}

/// Time-frequency image: one row per channel, one column per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Cochleogram {
    n_channels: usize,
    n_frames: usize,
    values: Vec<f64>,
    center_frequencies: Vec<f64>,
    frame_duration: f64,
}

impl Cochleogram {
    pub fn from_values(
        n_channels: usize,
        n_frames: usize,
        values: Vec<f64>,
        center_frequencies: Vec<f64>,
        frame_duration: f64,
    ) -> Result<Self> {
        if values.len() != n_channels * n_frames {
            return Err(Error::ShapeMismatch {
                expected: vec![n_channels, n_frames],
                actual: vec![values.len()],
            });
        }
        ensure(values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)), || {
            "cochleogram values must lie in [0, 1]".into()
        })?;
        Ok(Self {
            n_channels,
            n_frames,
            values,
            center_frequencies,
            frame_duration,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_channels, self.n_frames)
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Row-major values, channel by channel.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, channel: usize, frame: usize) -> f64 {
        self.values[channel * self.n_frames + frame]
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.center_frequencies
    }

    pub fn frame_duration(&self) -> f64 {
        self.frame_duration
    }

    /// Column with the largest summed intensity.
    pub fn brightest_frame(&self) -> usize {
        (0..self.n_frames)
            .map(|j| (j, (0..self.n_channels).map(|i| self.get(i, j)).sum::<f64>()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |(j, _)| j)
    }

    /// 8-bit binary PGM, highest-frequency channel on the top row.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.n_frames, self.n_channels).into_bytes();
        for ch in (0..self.n_channels).rev() {
            for f in 0..self.n_frames {
                buf.push((self.get(ch, f) * 255.0).round() as u8);
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

/// Cochleogram cells after log compression, before normalization.
pub fn compressed_envelope(sig: &Signal, spec: &CochleogramSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = sig.len();
    let frames = spec.n_frames;
    ensure(n >= frames, || {
        format!("signal of {n} samples is shorter than {frames} frames")
    })?;
    let bank = gammatone_filterbank(sig, &spec.filterbank)?;
    let alpha = (-1.0 / (spec.envelope_tau * sig.sample_rate())).exp();
    let bounds: Vec<usize> = (0..=frames).map(|j| j * n / frames).collect();
    let rows: Vec<Vec<f64>> = bank
        .par_iter()
        .map(|row| {
            let mut env = 0.0;
            let mut pooled = vec![0.0; frames];
            let mut frame = 0;
            for (i, &v) in row.iter().enumerate() {
                env = alpha * env + (1.0 - alpha) * v.max(0.0);
                while i >= bounds[frame + 1] {
                    frame += 1;
                }
                pooled[frame] += env;
            }
            pooled
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let mean = s / (bounds[j + 1] - bounds[j]) as f64;
                    (spec.compression * mean).ln_1p()
                })
                .collect()
        })
        .collect();
    Ok(rows.concat())
}

pub fn to_cochleogram(sig: &Signal, spec: &CochleogramSpec) -> Result<Cochleogram> {
    let mut values = compressed_envelope(sig, spec)?;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range > 0.0 && range.is_finite() {
        values.iter_mut().for_each(|v| *v = ((*v - lo) / range).clamp(0.0, 1.0));
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    let fb = &spec.filterbank;
    Cochleogram::from_values(
        fb.n_channels,
        spec.n_frames,
        values,
        erb_center_frequencies(fb.n_channels, fb.f_min, fb.f_max),
        sig.duration() / spec.n_frames as f64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn erb_endpoints_and_monotone() {
        assert_eq!(erb_center_frequencies(2, 25e3, 80e3), vec![25e3, 80e3]);
        let c = erb_center_frequencies(40, 25e3, 80e3);
        assert_eq!(c.len(), 40);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
        assert_relative_eq!(inverse_erb_rate(erb_rate(33e3)), 33e3, epsilon = 1e-6);
    }

    #[test]
    fn erb_midpoint() {
        let c = erb_center_frequencies(41, 25e3, 80e3);
        let mid = 0.5 * (erb_rate(25e3) + erb_rate(80e3));
        assert_relative_eq!(erb_rate(c[20]), mid, epsilon = 1e-10);
    }

    #[test]
    fn zero_in_zero_out() {
        let spec = CochleogramSpec::default();
        let sig = Signal::new(vec![0.0; 9000], 450e3).unwrap();
        let bank = gammatone_filterbank(&sig, &spec.filterbank).unwrap();
        assert!(bank.iter().flatten().all(|&v| v == 0.0));
        let c = to_cochleogram(&sig, &spec).unwrap();
        assert_eq!(c.shape(), (40, 106));
        assert!(c.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_rejected() {
        let sig = Signal::new(vec![0.0; 50], 450e3).unwrap();
        assert!(to_cochleogram(&sig, &CochleogramSpec::default()).is_err());
    }

    #[test]
    fn sample_rate_checked() {
        let sig = Signal::new(vec![0.0; 500], 400e3).unwrap();
        assert!(gammatone_filterbank(&sig, &FilterbankSpec::default()).is_err());
    }

    #[test]
    fn unit_gain_at_center() {
        let fs = 450e3;
        let fc = 40e3;
        let x: Vec<f64> = (0..20000).map(|n| (2.0 * PI * fc * n as f64 / fs).cos()).collect();
        let y = gammatone_channel(&x, fc, 4, fs);
        let tail = &y[10000..];
        let rms = (tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt();
        assert_relative_eq!(rms, std::f64::consts::FRAC_1_SQRT_2, epsilon = 2e-3);
    }

    #[test]
    fn pgm_export() {
        let dir = tempfile::tempdir().unwrap();
        let c = Cochleogram::from_values(2, 3, vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0], vec![1.0, 2.0], 0.1).unwrap();
        let p = dir.path().join("c.pgm");
        c.write_pgm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 128, 0, 0, 128, 255]);
    }
}
