//! Frequency-domain delay-and-sum beamforming with null-steering.
//!
//! For every FFT bin the desired weights `w_d` are the steering vector of the
//! look direction. The steering vectors of the null directions form the
//! columns of a constraint matrix `C`, and the null-steered weights are the
//! component of `w_d` orthogonal to `span(C)`:
//!
//! ```text
//! P_C = C (C^H C)^-1 C^H,     w^H = w_d^H (I - P_C)
//! ```
//!
//! `(C^H C)^-1` is never formed explicitly. An orthonormal basis `U` of
//! `span(C)` comes from a one-sided Jacobi SVD, so `P_C = U U^H` and the
//! singular values give the rank test.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{self, steering_vector, ArrayGeometry, Direction};
use crate::dsp;
use crate::error::{ensure, Error, Result};
use crate::simulate::MultiChannelRecording;
use crate::waveform::Signal;

/// Columns whose singular value falls below this fraction of the largest
/// make the null set degenerate.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Responses below this magnitude are reported at the floor in dB.
const DB_FLOOR_MAGNITUDE: f64 = 1e-15;
const MAX_JACOBI_SWEEPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamformConfig {
    /// Lower band edge (Hz); bins outside the band are zeroed.
    pub band_low: f64,
    pub band_high: f64,
    pub speed_of_sound: f64,
}

impl Default for BeamformConfig {
    fn default() -> Self {
        Self {
            band_low: 25e3,
            band_high: 80e3,
            speed_of_sound: array::SPEED_OF_SOUND,
        }
    }
}

impl BeamformConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.band_low > 0.0 && self.band_high > self.band_low, || {
            format!("invalid band [{}, {}]", self.band_low, self.band_high)
        })?;
        ensure(self.speed_of_sound > 0.0, || "speed_of_sound must be positive".into())
    }

    pub fn in_band(&self, freq: f64) -> bool {
        freq >= self.band_low && freq <= self.band_high
    }
}

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mul(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    pub fn adjoint(&self) -> ComplexMatrix {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Frobenius norm of `self - other`.
    pub fn frobenius_distance(&self, other: &ComplexMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Steering vectors of the null directions for one frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrix {
    n_mics: usize,
    columns: Vec<Vec<Complex64>>,
}

impl ConstraintMatrix {
    pub fn from_columns(n_mics: usize, columns: Vec<Vec<Complex64>>) -> Result<Self> {
        ensure(columns.iter().all(|c| c.len() == n_mics), || {
            format!("constraint columns must have {n_mics} entries")
        })?;
        if columns.len() >= n_mics {
            return Err(Error::UnderdeterminedArray {
                nulls: columns.len(),
                mics: n_mics,
            });
        }
        Ok(Self { n_mics, columns })
    }

    pub fn n_mics(&self) -> usize {
        self.n_mics
    }

    pub fn n_nulls(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<Complex64>] {
        &self.columns
    }

    pub fn to_matrix(&self) -> ComplexMatrix {
        let mut m = ComplexMatrix::zeros(self.n_mics, self.columns.len());
        for (j, col) in self.columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }
}

pub fn constraint_matrix(
    geom: &ArrayGeometry,
    nulls: &[Direction],
    freq: f64,
    speed_of_sound: f64,
) -> Result<ConstraintMatrix> {
    if nulls.len() >= geom.n_mics() {
        return Err(Error::UnderdeterminedArray {
            nulls: nulls.len(),
            mics: geom.n_mics(),
        });
    }
    let columns = nulls
        .iter()
        .map(|&d| steering_vector(geom, d, freq, speed_of_sound))
        .collect();
    ConstraintMatrix::from_columns(geom.n_mics(), columns)
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(Complex64::norm_sqr).sum()
}

/// Orthonormal basis of `span(C)` and the singular values of `C`.
///
/// One-sided (Hestenes) Jacobi: column pairs are rotated until mutually
/// orthogonal; the column norms are then the singular values.
pub fn range_basis(c: &ConstraintMatrix) -> Result<(Vec<Vec<Complex64>>, Vec<f64>)> {
    let mut cols = c.columns.clone();
    let k = cols.len();
    if k == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = norm_sqr(&cols[p]);
                let beta = norm_sqr(&cols[q]);
                let gamma = inner(&cols[p], &cols[q]);
                let g = gamma.norm();
                if g <= 1e-15 * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = cols.split_at_mut(q);
                let (ap, aq) = (&mut left[p], &mut right[0]);
                for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
                    let b = *y * phase.conj();
                    let xp = *x * cs - b * sn;
                    let bp = *x * sn + b * cs;
                    *x = xp;
                    *y = bp * phase;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = cols.iter().map(|c| norm_sqr(c).sqrt()).collect();
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let smin = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio <= RANK_TOLERANCE {
        return Err(Error::DegenerateNullSet { ratio });
    }
    let basis = cols
        .into_iter()
        .zip(&sigma)
        .map(|(c, s)| c.into_iter().map(|v| v / *s).collect())
        .collect();
    Ok((basis, sigma))
}

/// `P_C = C (C^H C)^-1 C^H`, evaluated as `U U^H`.
pub fn projection_matrix(c: &ConstraintMatrix) -> Result<ComplexMatrix> {
    let (basis, _) = range_basis(c)?;
    let n = c.n_mics;
    let mut p = ComplexMatrix::zeros(n, n);
    for u in &basis {
        for i in 0..n {
            for j in 0..n {
                p[(i, j)] += u[i] * u[j].conj();
            }
        }
    }
    Ok(p)
}

/// `w = (I - P_C) w_d`, i.e. `w^H = w_d^H (I - P_C)`; empty `C` returns `w_d`.
pub fn null_steered_weights(desired: &[Complex64], c: &ConstraintMatrix) -> Result<Vec<Complex64>> {
    ensure(desired.len() == c.n_mics, || {
        format!("weight length {} != {} microphones", desired.len(), c.n_mics)
    })?;
    let (basis, _) = range_basis(c)?;
    let mut w = desired.to_vec();
    for u in &basis {
        let coeff = inner(u, desired);
        for (wi, ui) in w.iter_mut().zip(u) {
            *wi -= ui * coeff;
        }
    }
    Ok(w)
}

/// Per-bin weights of one beamformer.
#[derive(Debug, Clone)]
pub struct BeamWeights {
    /// One row per frequency bin; out-of-band rows are all zero.
    pub weights: Vec<Vec<Complex64>>,
    pub freqs: Vec<f64>,
    pub steer: Direction,
    pub nulls: Vec<Direction>,
}

impl BeamWeights {
    /// Largest `|w^H C_i| / (||w_d|| ||C_i||)` over all bins and nulls.
    pub fn max_null_residual(&self, geom: &ArrayGeometry, speed_of_sound: f64) -> f64 {
        let m = geom.n_mics() as f64;
        let mut worst = 0.0f64;
        for (w, &f) in self.weights.iter().zip(&self.freqs) {
            if w.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
                continue;
            }
            for &d in &self.nulls {
                let c = steering_vector(geom, d, f, speed_of_sound);
                // ||w_d|| = ||C_i|| = sqrt(M) for unit-modulus steering vectors
                worst = worst.max(inner(w, &c).norm() / m);
            }
        }
        worst
    }
}

/// Null-steered weights for every bin in `freqs`; bins outside the band get zeros.
pub fn beam_weights(
    geom: &ArrayGeometry,
    steer: Direction,
    nulls: &[Direction],
    freqs: &[f64],
    cfg: &BeamformConfig,
) -> Result<BeamWeights> {
    cfg.validate()?;
    if nulls.len() >= geom.n_mics() {
        return Err(Error::UnderdeterminedArray {
            nulls: nulls.len(),
            mics: geom.n_mics(),
        });
    }
    let weights = freqs
        .par_iter()
        .map(|&f| -> Result<Vec<Complex64>> {
            if !cfg.in_band(f) {
                return Ok(vec![Complex64::new(0.0, 0.0); geom.n_mics()]);
            }
            let desired = steering_vector(geom, steer, f, cfg.speed_of_sound);
            if nulls.is_empty() {
                return Ok(desired);
            }
            let c = constraint_matrix(geom, nulls, f, cfg.speed_of_sound)?;
            null_steered_weights(&desired, &c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BeamWeights {
        weights,
        freqs: freqs.to_vec(),
        steer,
        nulls: nulls.to_vec(),
    })
}

/// Steers the array toward `steer` with nulls at `nulls`.
///
/// Per bin `Y(f) = w(f)^H X(f) / M`; the output is the real inverse FFT,
/// with the same length and sample rate as the recording. Delays are applied
/// circularly over the recording window.
pub fn beamform(
    rec: &MultiChannelRecording,
    geom: &ArrayGeometry,
    steer: Direction,
    nulls: &[Direction],
    cfg: &BeamformConfig,
) -> Result<Signal> {
    if rec.n_channels() != geom.n_mics() {
        return Err(Error::ShapeMismatch {
            expected: vec![geom.n_mics(), rec.n_samples()],
            actual: vec![rec.n_channels(), rec.n_samples()],
        });
    }
    let n = rec.n_samples();
    let fs = rec.sample_rate();
    let half = n / 2;
    let freqs: Vec<f64> = (0..=half).map(|k| dsp::bin_frequency(k, n, fs)).collect();
    let bw = beam_weights(geom, steer, nulls, &freqs, cfg)?;
    let spectra: Vec<Vec<Complex64>> = rec
        .channels()
        .par_iter()
        .map(|ch| dsp::rfft_padded(ch, n))
        .collect();
    let m = geom.n_mics() as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, w) in bw.weights.iter().enumerate() {
        if !cfg.in_band(freqs[k]) {
            continue;
        }
        out[k] = w
            .iter()
            .zip(&spectra)
            .map(|(wi, x)| wi.conj() * x[k])
            .sum::<Complex64>()
            / m;
    }
    dsp::hermitian_fill(&mut out);
    dsp::fft_inverse(&mut out);
    Signal::new(out.into_iter().map(|c| c.re).collect(), fs)
}

fn to_db(x: f64) -> f64 {
    20.0 * x.max(DB_FLOOR_MAGNITUDE).log10()
}

/// Narrowband response (dB) of the null-steered beamformer at `freq` for each
/// probe direction, normalized so the steer direction reads 0 dB whenever the
/// beamformer keeps any response there.
pub fn beam_pattern(
    geom: &ArrayGeometry,
    steer: Direction,
    nulls: &[Direction],
    freq: f64,
    probes: &[Direction],
    speed_of_sound: f64,
) -> Result<Vec<f64>> {
    let desired = steering_vector(geom, steer, freq, speed_of_sound);
    let c = constraint_matrix(geom, nulls, freq, speed_of_sound)?;
    let w = null_steered_weights(&desired, &c)?;
    let m = geom.n_mics() as f64;
    let at_steer = inner(&w, &desired).norm();
    let reference = if at_steer > 1e-12 * m { at_steer } else { m };
    Ok(probes
        .iter()
        .map(|&d| {
            let sv = steering_vector(geom, d, freq, speed_of_sound);
            to_db(inner(&w, &sv).norm() / reference)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::build_irregular_geometry;
    use approx::assert_relative_eq;

    fn c1(n: usize, idx: usize) -> ConstraintMatrix {
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        col[idx] = Complex64::new(1.0, 0.0);
        ConstraintMatrix::from_columns(n, vec![col]).unwrap()
    }

    #[test]
    fn projection_onto_axis() {
        let p = projection_matrix(&c1(4, 0)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == 0 && j == 0 { 1.0 } else { 0.0 };
                assert_relative_eq!(p[(i, j)].re, expect, epsilon = 1e-15);
                assert!(p[(i, j)].im.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_null_set() {
        let g = build_irregular_geometry(1, 8, 0.08).unwrap();
        let c = constraint_matrix(&g, &[], 40e3, 343.0).unwrap();
        assert_eq!(c.n_nulls(), 0);
        let wd = steering_vector(&g, Direction::boresight(), 40e3, 343.0);
        assert_eq!(null_steered_weights(&wd, &c).unwrap(), wd);
        let p = projection_matrix(&c).unwrap();
        assert!(p.frobenius_distance(&ComplexMatrix::zeros(8, 8)) == 0.0);
    }

    #[test]
    fn broadside_null_column_is_ones() {
        let g = build_irregular_geometry(1, 8, 0.08).unwrap();
        let c = constraint_matrix(&g, &[Direction::boresight()], 50e3, 343.0).unwrap();
        assert!(c.columns()[0].iter().all(|v| *v == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn too_many_nulls() {
        let g = build_irregular_geometry(1, 3, 0.08).unwrap();
        let nulls = vec![Direction::boresight(); 3];
        let err = constraint_matrix(&g, &nulls, 50e3, 343.0).unwrap_err();
        assert!(err.to_string().contains("underdetermined array"));
    }

    #[test]
    fn duplicate_nulls_are_degenerate() {
        let g = build_irregular_geometry(2, 32, 0.08).unwrap();
        let d = Direction::from_degrees(10.0, 5.0).unwrap();
        let c = constraint_matrix(&g, &[d, d], 50e3, 343.0).unwrap();
        let err = projection_matrix(&c).unwrap_err();
        assert!(err.to_string().contains("degenerate null set"), "{err}");
    }

    #[test]
    fn weights_orthogonal_and_in_span_cases() {
        let n = 5;
        let c = c1(n, 2);
        let mut wd = vec![Complex64::new(0.5, -0.25); n];
        wd[2] = Complex64::new(0.0, 0.0);
        assert_eq!(null_steered_weights(&wd, &c).unwrap(), wd);
        let mut inside = vec![Complex64::new(0.0, 0.0); n];
        inside[2] = Complex64::new(3.0, 1.0);
        let w = null_steered_weights(&inside, &c).unwrap();
        assert!(w.iter().all(|v| v.norm() < 1e-15));
    }

    #[test]
    fn beamform_channel_mismatch() {
        let g = build_irregular_geometry(1, 4, 0.08).unwrap();
        let g2 = build_irregular_geometry(1, 3, 0.08).unwrap();
        let rec = MultiChannelRecording::new(vec![vec![0.0; 64]; 3], 450e3, &g2).unwrap();
        assert!(beamform(&rec, &g, Direction::boresight(), &[], &BeamformConfig::default()).is_err());
    }

    #[test]
    fn pattern_at_steer_and_nulls() {
        let g = build_irregular_geometry(5, 32, 0.08).unwrap();
        let steer = Direction::from_degrees(5.0, 0.0).unwrap();
        let nulls = [
            Direction::from_degrees(-20.0, 0.0).unwrap(),
            Direction::from_degrees(25.0, 10.0).unwrap(),
        ];
        let mut probes = vec![steer];
        probes.extend_from_slice(&nulls);
        let plain = beam_pattern(&g, steer, &[], 50e3, &probes, 343.0).unwrap();
        assert!(plain[0].abs() < 1e-9);
        let nulled = beam_pattern(&g, steer, &nulls, 50e3, &probes, 343.0).unwrap();
        assert!(nulled[0].abs() < 1e-9);
        assert!(nulled[1] <= -100.0 && nulled[2] <= -100.0, "{nulled:?}");
    }
}
