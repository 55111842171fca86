//! Emitted FM sweep and matched filtering (pulse compression).

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{ensure, Error, Result};

/// Taper ratio of the Tukey window applied to the sweep.
pub const TUKEY_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveformSpec {
    pub f_start: f64,
    pub f_end: f64,
    pub duration: f64,
    pub sample_rate: f64,
    pub amplitude: f64,
}

impl Default for WaveformSpec {
    /// 2.5 ms linear up-sweep from 25 kHz to 80 kHz sampled at 450 kHz.
    fn default() -> Self {
        Self {
            f_start: 25e3,
            f_end: 80e3,
            duration: 2.5e-3,
            sample_rate: 450e3,
            amplitude: 1.0,
        }
    }
}

impl WaveformSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate / 2.0;
        ensure(self.sample_rate > 0.0 && self.sample_rate.is_finite(), || {
            format!("sample_rate must be positive, got {}", self.sample_rate)
        })?;
        for (name, f) in [("f_start", self.f_start), ("f_end", self.f_end)] {
            ensure(f > 0.0 && f < nyquist, || {
                format!("{name} = {f} Hz must lie in (0, {nyquist})")
            })?;
        }
        ensure(self.duration > 0.0 && self.duration.is_finite(), || {
            format!("duration must be positive, got {}", self.duration)
        })?;
        ensure(self.amplitude.is_finite() && self.amplitude > 0.0, || {
            format!("amplitude must be positive, got {}", self.amplitude)
        })?;
        ensure((self.duration * self.sample_rate).round() >= 1.0, || {
            "sweep shorter than one sample".into()
        })?;
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    /// Lower and upper band edges regardless of sweep direction.
    pub fn band(&self) -> (f64, f64) {
        (self.f_start.min(self.f_end), self.f_start.max(self.f_end))
    }
}

/// Real-valued time series with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        ensure(!samples.is_empty(), || "signal must hold at least one sample".into())?;
        ensure(sample_rate > 0.0 && sample_rate.is_finite(), || {
            format!("sample_rate must be positive, got {sample_rate}")
        })?;
        ensure(samples.iter().all(|v| v.is_finite()), || {
            "signal samples must be finite".into()
        })?;
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// Tukey (tapered cosine) window value for sample `i` of `n`.
fn tukey(i: usize, n: usize, ratio: f64) -> f64 {
    if n <= 1 || ratio <= 0.0 {
        return 1.0;
    }
    let x = i as f64 / (n - 1) as f64;
    let edge = ratio / 2.0;
    if x < edge {
        0.5 * (1.0 - (PI * x / edge).cos())
    } else if x > 1.0 - edge {
        0.5 * (1.0 - (PI * (1.0 - x) / edge).cos())
    } else {
        1.0
    }
}

/// Linear chirp from `f_start` to `f_end`, Tukey tapered and scaled so the
/// largest absolute sample equals `amplitude`.
pub fn fm_sweep(spec: &WaveformSpec) -> Result<Signal> {
    spec.validate()?;
    let n = spec.n_samples();
    let rate = (spec.f_end - spec.f_start) / spec.duration;
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / spec.sample_rate;
            let phase = 2.0 * PI * (spec.f_start * t + 0.5 * rate * t * t);
            tukey(i, n, TUKEY_RATIO) * phase.sin()
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = spec.amplitude / peak;
        samples.iter_mut().for_each(|v| *v *= scale);
    }
    Signal::new(samples, spec.sample_rate)
}

/// Cross-correlates `rec` with `template` via zero-padded FFTs.
///
/// Output sample `k` is `sum_i rec[k + i] * template[i]`, so an echo that
/// begins at sample `k` peaks at index `k`. The output has `rec.len()` samples.
pub fn matched_filter(rec: &Signal, template: &Signal) -> Result<Signal> {
    if rec.sample_rate() != template.sample_rate() {
        return Err(Error::SampleRateMismatch {
            left: rec.sample_rate(),
            right: template.sample_rate(),
        });
    }
    ensure(template.len() <= rec.len(), || {
        format!(
            "template ({} samples) longer than recording ({} samples)",
            template.len(),
            rec.len()
        )
    })?;
    let n = rec.len();
    let nfft = (n + template.len() - 1).next_power_of_two();
    let r = dsp::rfft_padded(rec.samples(), nfft);
    let t = dsp::rfft_padded(template.samples(), nfft);
    let mut prod: Vec<Complex64> = r.iter().zip(&t).map(|(a, b)| a * b.conj()).collect();
    dsp::fft_inverse(&mut prod);
    let out = prod[..n].iter().map(|c| c.re).collect();
    Signal::new(out, rec.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sweep_length() {
        let s = fm_sweep(&WaveformSpec::default()).unwrap();
        assert_eq!(s.len(), 1125);
        let peak = s.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_starts_at_f_start() {
        let spec = WaveformSpec::default();
        let s = fm_sweep(&spec).unwrap();
        let x = s.samples();
        // interpolated zero crossings after t = 0
        let crossings: Vec<f64> = (2..x.len())
            .filter(|&i| (x[i - 1] > 0.0) != (x[i] > 0.0))
            .map(|i| (i as f64 - 1.0 + x[i - 1] / (x[i - 1] - x[i])) / spec.sample_rate)
            .take(3)
            .collect();
        // half-period spacings give the frequency at each midpoint; the sweep
        // is linear, so extrapolate the two estimates back to t = 0
        let (fa, ta) = (0.5 / (crossings[1] - crossings[0]), 0.5 * (crossings[0] + crossings[1]));
        let (fb, tb) = (0.5 / (crossings[2] - crossings[1]), 0.5 * (crossings[1] + crossings[2]));
        let f_est = fa - (fb - fa) / (tb - ta) * ta;
        assert!((f_est - spec.f_start).abs() / spec.f_start < 0.01, "{f_est}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            WaveformSpec { f_end: 300e3, ..Default::default() },
            WaveformSpec { f_start: 0.0, ..Default::default() },
            WaveformSpec { duration: 0.0, ..Default::default() },
            WaveformSpec { sample_rate: -1.0, ..Default::default() },
        ];
        for spec in bad {
            assert!(fm_sweep(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn down_sweep_band() {
        let spec = WaveformSpec { f_start: 80e3, f_end: 25e3, ..Default::default() };
        assert_eq!(spec.band(), (25e3, 80e3));
        assert!(fm_sweep(&spec).is_ok());
    }

    #[test]
    fn matched_filter_finds_delay() {
        let tmpl = fm_sweep(&WaveformSpec::default()).unwrap();
        let mut rec = vec![0.0; 4000];
        rec[200..200 + tmpl.len()].copy_from_slice(tmpl.samples());
        let rec = Signal::new(rec, tmpl.sample_rate()).unwrap();
        let out = matched_filter(&rec, &tmpl).unwrap();
        assert_eq!(out.len(), rec.len());
        let argmax = out
            .samples()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(argmax.abs_diff(200) <= 1);
    }

    #[test]
    fn matched_filter_zero_and_errors() {
        let tmpl = fm_sweep(&WaveformSpec::default()).unwrap();
        let zero = Signal::new(vec![0.0; 2000], tmpl.sample_rate()).unwrap();
        let out = matched_filter(&zero, &tmpl).unwrap();
        assert!(out.samples().iter().all(|&v| v == 0.0));

        let other = Signal::new(vec![0.0; 2000], 44_100.0).unwrap();
        assert!(matches!(
            matched_filter(&other, &tmpl),
            Err(Error::SampleRateMismatch { .. })
        ));
        let short = Signal::new(vec![0.0; 10], tmpl.sample_rate()).unwrap();
        assert!(matched_filter(&short, &tmpl).is_err());
    }

    #[test]
    fn signal_validation() {
        assert!(Signal::new(vec![], 1.0).is_err());
        assert!(Signal::new(vec![f64::INFINITY], 1.0).is_err());
        assert!(Signal::new(vec![1.0], 0.0).is_err());
    }
}
