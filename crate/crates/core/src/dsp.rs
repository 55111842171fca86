//! FFT helpers shared by the signal-processing modules.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_forward(buf: &mut [Complex64]) {
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()));
    fft.process(buf);
}

/// Inverse FFT including the 1/N normalization.
pub(crate) fn fft_inverse(buf: &mut [Complex64]) {
    let n = buf.len();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    fft.process(buf);
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Forward FFT of a real sequence zero-padded to `n`.
pub(crate) fn rfft_padded(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (b, &v) in buf.iter_mut().zip(x) {
        b.re = v;
    }
    fft_forward(&mut buf);
    buf
}

/// Fills bins above n/2 with the conjugate of their mirror so the
/// inverse transform is real.
pub(crate) fn hermitian_fill(spec: &mut [Complex64]) {
    let n = spec.len();
    spec[0].im = 0.0;
    if n.is_multiple_of(2) {
        spec[n / 2].im = 0.0;
    }
    for k in 1..n.div_ceil(2) {
        spec[n - k] = spec[k].conj();
    }
}

/// Frequency (Hz) of bin `k` for an `n`-point transform; only meaningful for k <= n/2.
pub(crate) fn bin_frequency(k: usize, n: usize, sample_rate: f64) -> f64 {
    k as f64 * sample_rate / n as f64
}

/// One-sided magnitude spectrum in dB (floored at -300 dB) with bin frequencies.
pub(crate) fn magnitude_spectrum_db(x: &[f64], sample_rate: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len().max(1);
    let spec = rfft_padded(x, n);
    (0..=n / 2)
        .map(|k| (bin_frequency(k, n, sample_rate), 20.0 * spec[k].norm().max(1e-15).log10()))
        .unzip()
}
