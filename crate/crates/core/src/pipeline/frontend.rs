use crate::array::{ArrayGeometry, Direction};
use crate::beamform::{beamform, BeamformConfig};
use crate::cochlea::{to_cochleogram, Cochleogram, CochleogramSpec};
use crate::config::RunConfig;
use crate::error::Result;
use crate::simulate::{synthesize_scene, MultiChannelRecording, Scene, SimConfig};
use crate::waveform::{fm_sweep, matched_filter, Signal, WaveformSpec};

/// Everything needed to turn a scene into a cochleogram.
#[derive(Debug, Clone)]
pub struct Frontend {
    pub geometry: ArrayGeometry,
    pub waveform: WaveformSpec,
    pub sim: SimConfig,
    pub beamform: BeamformConfig,
    pub cochleogram: CochleogramSpec,
    template: Signal,
}

impl Frontend {
    pub fn new(
        geometry: ArrayGeometry,
        waveform: WaveformSpec,
        sim: SimConfig,
        beamform: BeamformConfig,
        cochleogram: CochleogramSpec,
    ) -> Result<Self> {
        sim.validate()?;
        beamform.validate()?;
        cochleogram.validate()?;
        let template = fm_sweep(&waveform)?;
        Ok(Self {
            geometry,
            waveform,
            sim,
            beamform,
            cochleogram,
            template,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg.geometry.build()?, cfg.waveform, cfg.simulator.clone(), cfg.beamform, cfg.cochleogram)
    }

    pub fn template(&self) -> &Signal {
        &self.template
    }

    pub fn record(&self, scene: &Scene, seed: u64) -> Result<MultiChannelRecording> {
        synthesize_scene(scene, &self.geometry, &self.waveform, &self.sim, seed)
    }

    /// Beamformed (and, if enabled, pulse-compressed) signal.
    pub fn beam_signal(&self, rec: &MultiChannelRecording, steer: Direction, nulls: &[Direction]) -> Result<Signal> {
        let y = beamform(rec, &self.geometry, steer, nulls, &self.beamform)?;
        if self.cochleogram.matched_filter {
            matched_filter(&y, &self.template)
        } else {
            Ok(y)
        }
    }

    pub fn cochleogram(&self, rec: &MultiChannelRecording, steer: Direction, nulls: &[Direction]) -> Result<Cochleogram> {
        to_cochleogram(&self.beam_signal(rec, steer, nulls)?, &self.cochleogram)
    }
}
