//! Microphone-array geometry and far-field steering vectors.
//!
//! Coordinate convention: `+x` is boresight, azimuth rotates in the xy-plane
//! (positive toward `+y`) and elevation tilts toward `+z`. The generated
//! irregular layouts lie in the yz-plane, so boresight is broadside.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub type Vec3 = [f64; 3];

/// Speed of sound in air at 20 °C, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;
pub const DEFAULT_MIC_COUNT: usize = 32;
/// Aperture of the generated disc layout, meters.
pub const DEFAULT_APERTURE: f64 = 0.08;

const MIN_MIC_SEPARATION: f64 = 1e-6;
const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    name: String,
    mic_positions: Vec<Vec3>,
    emitter_position: Vec3,
}

impl ArrayGeometry {
    pub fn new(name: impl Into<String>, mic_positions: Vec<Vec3>, emitter_position: Vec3) -> Result<Self> {
        ensure(mic_positions.len() >= 2, || {
            format!("array needs at least 2 microphones, got {}", mic_positions.len())
        })?;
        let finite = |p: &Vec3| p.iter().all(|v| v.is_finite());
        ensure(mic_positions.iter().all(finite) && finite(&emitter_position), || {
            "array positions must be finite".into()
        })?;
        for i in 0..mic_positions.len() {
            for j in (i + 1)..mic_positions.len() {
                let d = distance(&mic_positions[i], &mic_positions[j]);
                ensure(d > MIN_MIC_SEPARATION, || {
                    format!("microphones {i} and {j} coincide (distance {d:.3e} m)")
                })?;
            }
        }
        Ok(Self {
            name: name.into(),
            mic_positions,
            emitter_position,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn mic_positions(&self) -> &[Vec3] {
        &self.mic_positions
    }

    pub fn emitter_position(&self) -> Vec3 {
        self.emitter_position
    }

    /// Largest pairwise microphone distance.
    pub fn aperture(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.mic_positions.iter().enumerate() {
            for b in &self.mic_positions[i + 1..] {
                best = best.max(distance(a, b));
            }
        }
        best
    }

    /// Smallest pairwise microphone distance.
    pub fn min_spacing(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.mic_positions.iter().enumerate() {
            for b in &self.mic_positions[i + 1..] {
                best = best.min(distance(a, b));
            }
        }
        best
    }

    /// Parses the plain-text layout: a `# emitter x y z` header followed by
    /// one `x y z` line per microphone. Blank lines are ignored.
    pub fn from_text(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Data("geometry file is empty".into()))?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() != 5 || tokens[0] != "#" || tokens[1] != "emitter" {
            return Err(Error::Data(format!(
                "line 1: expected header `# emitter x y z`, got `{header}`"
            )));
        }
        let emitter = parse_xyz(&tokens[2..], 1)?;
        let mut mics = Vec::new();
        for (idx, line) in lines {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != 3 {
                return Err(Error::Data(format!(
                    "line {}: expected 3 coordinates, got {}",
                    idx + 1,
                    tokens.len()
                )));
            }
            mics.push(parse_xyz(&tokens, idx + 1)?);
        }
        Self::new(name, mics, emitter)
    }

    pub fn to_text(&self) -> String {
        let e = self.emitter_position;
        let mut out = format!("# emitter {:e} {:e} {:e}\n", e[0], e[1], e[2]);
        for p in &self.mic_positions {
            let _ = writeln!(out, "{:e} {:e} {:e}", p[0], p[1], p[2]);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "geometry".into());
        Self::from_text(name, &text).map_err(|e| match e {
            Error::Data(d) => Error::format(path, d),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse_xyz(tokens: &[&str], line: usize) -> Result<Vec3> {
    let mut out = [0.0; 3];
    for (o, t) in out.iter_mut().zip(tokens) {
        *o = t
            .parse::<f64>()
            .map_err(|_| Error::Data(format!("line {line}: `{t}` is not a number")))?;
    }
    Ok(out)
}

pub(crate) fn distance(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// A look direction as seen from the array origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Direction {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        ensure((-PI..=PI).contains(&azimuth), || {
            format!("azimuth {azimuth} outside [-pi, pi]")
        })?;
        ensure((-PI / 2.0..=PI / 2.0).contains(&elevation), || {
            format!("elevation {elevation} outside [-pi/2, pi/2]")
        })?;
        Ok(Self { azimuth, elevation })
    }

    pub fn from_degrees(azimuth_deg: f64, elevation_deg: f64) -> Result<Self> {
        Self::new(azimuth_deg.to_radians(), elevation_deg.to_radians())
    }

    pub const fn boresight() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
        }
    }

    /// Direction of a point as seen from the origin.
    pub fn toward(p: &Vec3) -> Self {
        Self {
            azimuth: p[1].atan2(p[0]),
            elevation: p[2].atan2(p[0].hypot(p[1])),
        }
    }

    /// Great-circle angle between two directions, radians.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        let a = unit_propagation_vector(*self);
        let b = unit_propagation_vector(*other);
        dot(&a, &b).clamp(-1.0, 1.0).acos()
    }
}

/// Unit vector pointing from the array origin toward `dir`.
pub fn unit_propagation_vector(dir: Direction) -> Vec3 {
    let (se, ce) = dir.elevation.sin_cos();
    let (sa, ca) = dir.azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Far-field array manifold for a plane wave arriving from `dir`.
///
/// Element `m` is `exp(-j 2π f τ_m)` where `τ_m = -u·r_m / c` is the arrival
/// delay at microphone `m` relative to the origin. Negative frequencies are
/// accepted and yield the conjugate vector.
pub fn steering_vector(geom: &ArrayGeometry, dir: Direction, freq: f64, c: f64) -> Vec<Complex64> {
    debug_assert!(c > 0.0);
    let u = unit_propagation_vector(dir);
    geom.mic_positions
        .iter()
        .map(|r| {
            let tau = -dot(&u, r) / c;
            Complex64::from_polar(1.0, -2.0 * PI * freq * tau)
        })
        .collect()
}

/// Arrival delays (s) of a far-field plane wave from `dir` at each microphone.
pub fn plane_wave_delays(geom: &ArrayGeometry, dir: Direction, c: f64) -> Vec<f64> {
    let u = unit_propagation_vector(dir);
    geom.mic_positions.iter().map(|r| -dot(&u, r) / c).collect()
}

/// Seeded rejection sampling of `n_mics` positions on a yz-plane disc of
/// diameter `aperture`, with the emitter at the origin. Accepted points keep
/// at least `aperture / (4 sqrt(n_mics))` from each other.
/// Sequential rejection sampling of `n` points on the x = 0 disc.
fn place_on_disc(rng: &mut ChaCha8Rng, n: usize, radius: f64, min_spacing: f64, max_attempts: usize) -> Result<Vec<Vec3>> {
    let mut mics: Vec<Vec3> = Vec::with_capacity(n);
    let mut attempts = 0;
    while mics.len() < n {
        if attempts >= max_attempts {
            return Err(Error::CannotSatisfySpacing {
                placed: mics.len(),
                requested: n,
                attempts,
            });
        }
        attempts += 1;
        let y = rng.random_range(-radius..=radius);
        let z = rng.random_range(-radius..=radius);
        if y * y + z * z > radius * radius {
            continue;
        }
        let p = [0.0, y, z];
        if mics.iter().all(|q| distance(&p, q) >= min_spacing) {
            mics.push(p);
        }
    }
    Ok(mics)
}

pub fn build_irregular_geometry(seed: u64, n_mics: usize, aperture: f64) -> Result<ArrayGeometry> {
    ensure(n_mics >= 2, || format!("n_mics must be >= 2, got {n_mics}"))?;
    ensure(aperture > 0.0 && aperture.is_finite(), || {
        format!("aperture must be positive, got {aperture}")
    })?;
    let min_spacing = aperture / (4.0 * (n_mics as f64).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mics = place_on_disc(&mut rng, n_mics, aperture / 2.0, min_spacing, MAX_PLACEMENT_ATTEMPTS)?;
    ArrayGeometry::new(format!("irregular-s{seed}-n{n_mics}"), mics, [0.0; 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn irregular_geometry_is_deterministic() {
        let a = build_irregular_geometry(7, 32, 0.08).unwrap();
        let b = build_irregular_geometry(7, 32, 0.08).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_mics(), 32);
        let bits = |g: &ArrayGeometry| {
            g.mic_positions()
                .iter()
                .flat_map(|p| p.iter().map(|v| v.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, build_irregular_geometry(8, 32, 0.08).unwrap());
    }

    #[test]
    fn irregular_geometry_respects_disc_and_spacing() {
        let g = build_irregular_geometry(7, 32, 0.08).unwrap();
        for p in g.mic_positions() {
            assert_eq!(p[0], 0.0);
            assert!(p[1].hypot(p[2]) <= 0.04 + 1e-15);
        }
        assert!(g.min_spacing() >= 0.08 / (4.0 * 32f64.sqrt()));
        assert!(g.aperture() > 0.0 && g.aperture() <= 0.08);

        let two = build_irregular_geometry(7, 2, 0.08).unwrap();
        assert!(two.min_spacing() >= 0.01);
    }

    #[test]
    fn irregular_geometry_rejects_bad_input() {
        assert!(build_irregular_geometry(1, 1, 0.08).is_err());
        assert!(build_irregular_geometry(1, 4, 0.0).is_err());
    }

    #[test]
    fn impossible_spacing_reports_error() {
        // five points pairwise 0.06 apart do not fit on a 0.04 m radius disc
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = place_on_disc(&mut rng, 5, 0.04, 0.06, 10_000).unwrap_err();
        assert!(err.to_string().contains("cannot satisfy spacing"), "{err}");
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::new("x", vec![[0.0; 3]], [0.0; 3]).is_err());
        assert!(ArrayGeometry::new("x", vec![[0.0; 3], [0.0; 3]], [0.0; 3]).is_err());
        assert!(ArrayGeometry::new("x", vec![[0.0; 3], [f64::NAN, 0.0, 0.0]], [0.0; 3]).is_err());
        assert!(ArrayGeometry::new("x", vec![[0.0; 3], [0.01, 0.0, 0.0]], [0.0; 3]).is_ok());
    }

    #[test]
    fn unit_vectors() {
        let b = unit_propagation_vector(Direction::boresight());
        assert_eq!(b, [1.0, 0.0, 0.0]);
        let side = unit_propagation_vector(Direction::new(PI / 2.0, 0.0).unwrap());
        assert!(dot(&side, &b).abs() < 1e-15);
        assert_relative_eq!(norm(&side), 1.0, epsilon = 1e-12);
        for (az, el) in [(0.3, -0.2), (-3.0, 1.5), (2.0, -1.5)] {
            let u = unit_propagation_vector(Direction::new(az, el).unwrap());
            assert_relative_eq!(norm(&u), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn direction_ranges() {
        assert!(Direction::new(4.0, 0.0).is_err());
        assert!(Direction::new(0.0, 1.6).is_err());
        let d = Direction::toward(&[1.0, 1.0, 0.0]);
        assert_relative_eq!(d.azimuth, PI / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn broadside_steering_is_all_ones() {
        let mics = vec![[0.01, 0.02, 0.0], [-0.03, 0.0, 0.0], [0.0, -0.02, 0.0]];
        let g = ArrayGeometry::new("planar", mics, [0.0; 3]).unwrap();
        let normal = Direction::new(0.0, PI / 2.0).unwrap();
        for v in steering_vector(&g, normal, 40e3, SPEED_OF_SOUND) {
            assert_relative_eq!(v.re, 1.0, epsilon = 1e-12);
            assert!(v.im.abs() < 1e-12);
        }
        // default layout lives in the yz-plane so boresight is broadside
        let g = build_irregular_geometry(3, 32, 0.08).unwrap();
        for v in steering_vector(&g, Direction::boresight(), 61e3, SPEED_OF_SOUND) {
            assert_eq!(v, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn two_mic_phase_difference() {
        let d = 0.004;
        let f = 30e3;
        let g = ArrayGeometry::new("pair", vec![[0.0; 3], [d, 0.0, 0.0]], [0.0; 3]).unwrap();
        let sv = steering_vector(&g, Direction::boresight(), f, SPEED_OF_SOUND);
        let expected = 2.0 * PI * f * d / SPEED_OF_SOUND;
        let dphi = (sv[1] / sv[0]).arg();
        assert_relative_eq!(dphi, expected, epsilon = 1e-12);
    }

    #[test]
    fn geometry_text_round_trip_and_errors() {
        let g = build_irregular_geometry(11, 8, 0.05).unwrap();
        let back = ArrayGeometry::from_text(g.name(), &g.to_text()).unwrap();
        assert_eq!(back, g);

        assert!(ArrayGeometry::from_text("x", "").is_err());
        assert!(ArrayGeometry::from_text("x", "0 0 0\n1 1 1\n").is_err());
        let err = ArrayGeometry::from_text("x", "# emitter 0 0 0\n0 0 0\n0.1 0\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = ArrayGeometry::from_text("x", "# emitter 0 0 0\n0 0 0\n0.1 a 0\n").unwrap_err();
        assert!(err.to_string().contains("not a number"), "{err}");
    }
}
