//! Run configuration: one TOML document with a section per stage.
//!
//! Every section has defaults, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::{self, build_irregular_geometry, ArrayGeometry};
use crate::beamform::BeamformConfig;
use crate::cochlea::CochleogramSpec;
use crate::error::{Error, Result};
use crate::nn::ArchitectureConfig;
use crate::simulate::SimConfig;
use crate::waveform::WaveformSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Geometry text file; when unset an irregular disc array is generated.
    pub file: Option<PathBuf>,
    pub seed: u64,
    pub n_mics: usize,
    pub aperture: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            file: None,
            seed: 1,
            n_mics: array::DEFAULT_MIC_COUNT,
            aperture: array::DEFAULT_APERTURE,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ArrayGeometry> {
        match &self.file {
            Some(path) => ArrayGeometry::load(path),
            None => build_irregular_geometry(self.seed, self.n_mics, self.aperture),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Four-reflector constellations with 4-hot label vectors.
    Multi,
    /// One reflector per scene with a class index.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub label_mode: LabelMode,
    /// Uniform SNR range (dB) relative to the strongest echo.
    pub snr_db: [f64; 2],
    pub noiseless: bool,
    /// Uniform backplate range (m).
    pub range: [f64; 2],
    /// Orientation is uniform in `[-max, max]` degrees.
    pub orientation_max_deg: f64,
    /// Single-label scenes: the reflector's backplate offset is uniform in
    /// `[-r tan(spread), r tan(spread)]` on both axes, narrowed where needed
    /// so the echo still starts inside the recording window.
    pub single_spread_deg: f64,
    /// Single-label samples are beamformed with 0 to `single_nulls` nulls
    /// placed at random directions around the reflector.
    pub single_nulls: usize,
    /// Angular distance range (deg) of those nulls from the look direction.
    pub single_null_offset_deg: [f64; 2],
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            label_mode: LabelMode::Multi,
            snr_db: [20.0, 20.0],
            noiseless: false,
            range: [0.5, 3.0],
            orientation_max_deg: 60.0,
            single_spread_deg: 25.0,
            single_nulls: 0,
            single_null_offset_deg: [3.0, 50.0],
            split: [0.64, 0.16, 0.20],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, sim: &SimConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("dataset: {m}")));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if !(self.snr_db[0].is_finite() && self.snr_db[1].is_finite() && self.snr_db[0] <= self.snr_db[1]) {
            return bad(format!("snr_db {:?} is not an ordered finite range", self.snr_db));
        }
        if !(self.range[0] > 0.3 && self.range[0] <= self.range[1] && self.range[1] <= 3.0) {
            return bad(format!("range {:?} must be ordered within (0.3, 3] m", self.range));
        }
        if !(0.0..=sim.max_orientation_deg).contains(&self.orientation_max_deg) {
            return bad(format!(
                "orientation_max_deg {} outside [0, {}]",
                self.orientation_max_deg, sim.max_orientation_deg
            ));
        }
        if !(0.0..60.0).contains(&self.single_spread_deg) {
            return bad(format!("single_spread_deg {} outside [0, 60)", self.single_spread_deg));
        }
        let [lo, hi] = self.single_null_offset_deg;
        if self.single_nulls > 3 || !(lo > 0.0 && lo <= hi && hi < 90.0) {
            return bad(format!(
                "single_nulls {} must be at most 3 with offsets {:?} ordered within (0, 90) deg",
                self.single_nulls, self.single_null_offset_deg
            ));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must lie in [0, 1] and sum to 1", self.split));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Explicit per-class loss weights; computed from label frequencies when unset.
    pub class_weights: Option<Vec<f64>>,
    /// Disable frequency-based class weighting (all weights 1).
    pub uniform_weights: bool,
    pub threshold: f64,
    pub seed: u64,
    /// Largest random time shift (cochleogram columns) applied to training
    /// images; 0 disables the augmentation.
    pub shift_augment: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 20,
            batch_size: 32,
            class_weights: None,
            uniform_weights: false,
            threshold: 0.6,
            seed: 7,
            shift_augment: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("class_weights must be finite and non-negative".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of thresholds in the `--sweep` curve (evenly spaced in [0, 1]).
    pub sweep_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sweep_points: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeampatternConfig {
    /// Steering direction (degrees azimuth, elevation).
    pub steer_deg: [f64; 2],
    /// Null directions (degrees azimuth, elevation).
    pub nulls_deg: Vec<[f64; 2]>,
    pub frequency: f64,
    /// Azimuth grid in degrees: start, stop, step. Elevation is 0.
    pub azimuth_grid: [f64; 3],
}

impl Default for BeampatternConfig {
    fn default() -> Self {
        Self {
            steer_deg: [0.0, 0.0],
            nulls_deg: vec![[20.0, 0.0], [-35.0, 0.0]],
            frequency: 50e3,
            azimuth_grid: [-90.0, 90.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Scenes per separation setting.
    pub n_scenes: usize,
    /// Angular separation (deg) between neighbouring reflectors, one
    /// experiment per entry.
    pub separations_deg: Vec<f64>,
    /// Backplate range (m).
    pub range: f64,
    /// `None` runs noiseless.
    pub snr_db: Option<f64>,
    /// Isolated-reflector training samples for the single-label classifier.
    pub train_samples: usize,
    /// Force both arms to run without nulls (sanity check of the report).
    pub force_equal_arms: bool,
    /// Number of scenes whose beamformed traces are exported.
    pub n_traces: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            n_scenes: 25,
            separations_deg: vec![35.0, 5.0],
            range: 1.5,
            snr_db: None,
            train_samples: 700,
            force_equal_arms: false,
            n_traces: 2,
        }
    }
}

/// Merged configuration for every command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub geometry: GeometryConfig,
    pub waveform: WaveformSpec,
    pub simulator: SimConfig,
    pub beamform: BeamformConfig,
    pub cochleogram: CochleogramSpec,
    pub model: ArchitectureConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub beampattern: BeampatternConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidParameter(m) => Error::Config(m),
            other => other,
        };
        self.waveform.validate().map_err(cfg_err)?;
        self.simulator.validate().map_err(cfg_err)?;
        self.beamform.validate().map_err(cfg_err)?;
        self.cochleogram.validate().map_err(cfg_err)?;
        if (self.cochleogram.filterbank.sample_rate - self.waveform.sample_rate).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "cochleogram.filterbank.sample_rate {} differs from waveform.sample_rate {}",
                self.cochleogram.filterbank.sample_rate, self.waveform.sample_rate
            )));
        }
        self.dataset.validate(&self.simulator)?;
        self.train.validate()?;
        if let Some(w) = &self.train.class_weights {
            if w.len() != self.simulator.n_classes {
                return Err(Error::Config(format!(
                    "train.class_weights has {} entries for {} classes",
                    w.len(),
                    self.simulator.n_classes
                )));
            }
        }
        if self.geometry.file.is_none() && self.geometry.n_mics < 2 {
            return Err(Error::Config("geometry.n_mics must be >= 2".into()));
        }
        if self.eval.sweep_points < 2 {
            return Err(Error::Config("eval.sweep_points must be >= 2".into()));
        }
        if self.ablation.separations_deg.iter().any(|s| !(*s > 0.0 && *s < 90.0)) {
            return Err(Error::Config("ablation.separations_deg must lie in (0, 90)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.max_epochs, 100);
        assert_eq!(cfg.train.patience, 20);
        assert_eq!(cfg.train.threshold, 0.6);
    }

    #[test]
    fn round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.dataset.n_samples = 17;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let err = RunConfig::from_toml("seed = 1\n[train]\nlearning_rat = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rat"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            "[train]\npatience = 200\n",
            "[train]\nthreshold = 1.0\n",
            "[dataset]\nsplit = [0.5, 0.5, 0.5]\n",
            "[waveform]\nf_end = 300000.0\n",
        ] {
            assert!(matches!(RunConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }
}
