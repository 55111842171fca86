use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::array::Direction;
use crate::cochlea::Cochleogram;
use crate::config::{LabelMode, RunConfig};
use crate::error::{Error, Result};
use crate::nn::{CnnModel, Tensor};
use crate::simulate::{reflector_direction, MultiChannelRecording, Scene, SimConfig, N_REFLECTORS};

use super::metrics::argmax;
use super::Frontend;

/// Leading comment block of every ablation CSV.
pub const ABLATION_NOTE: &str = "\
Simulated point-reflector recordings with exact far-field steering vectors.
In this setting null constraints remove the competing echoes almost entirely,
so the with-nulls arm is expected to match or beat the without-nulls arm.
Physical measurements add near-field curvature, reflector extent, multipath
and calibration error, all of which this simulation omits; the accuracy gap
between the two arms observed here should not be read as a prediction of the
gap on real sensor data, which may be negligible.";

/// Half the side of a square reflector layout at `range` whose closest pair of
/// reflectors subtends `separation` (rad) at the array origin.
pub fn square_half_side(separation: f64, range: f64) -> f64 {
    range * ((1.0 / separation.cos() - 1.0) / 2.0).sqrt()
}

/// Square constellation facing the array whose adjacent reflectors are
/// `separation` apart in direction.
pub fn isolation_scene(classes: [usize; N_REFLECTORS], separation: f64, range: f64, snr_db: Option<f64>, sim: &SimConfig) -> Result<Scene> {
    if !(separation > 0.0 && separation < std::f64::consts::FRAC_PI_2) {
        return Err(Error::InvalidParameter(format!(
            "separation {:.2} deg outside (0, 90)",
            separation.to_degrees()
        )));
    }
    let h = square_half_side(separation, range);
    let offsets = [[-h, h], [h, h], [-h, -h], [h, -h]];
    let scene = Scene {
        reflectors: classes.iter().zip(offsets).map(|(&c, o)| sim.reflector(c, o)).collect(),
        constellation_id: 0,
        center_range: range,
        orientation: 0.0,
        noise_snr_db: snr_db,
    };
    scene.validate(sim)?;
    Ok(scene)
}

pub fn reflector_directions(scene: &Scene) -> Result<Vec<Direction>> {
    (0..scene.reflectors.len()).map(|i| reflector_direction(scene, i)).collect()
}

/// One reflector seen through the isolation beamformer.
#[derive(Debug, Clone)]
pub struct Isolated {
    pub predicted: usize,
    pub probs: Vec<f64>,
    /// Energy of the beamformed, pulse-compressed signal (dB).
    pub energy_db: f64,
    pub cochleogram: Cochleogram,
}

fn energy_db(x: &[f64]) -> f64 {
    10.0 * x.iter().map(|v| v * v).sum::<f64>().max(1e-300).log10()
}

/// Classifies a cochleogram with a single-label model.
pub fn classify(model: &CnnModel<f32>, c: &Cochleogram) -> Result<(usize, Vec<f64>)> {
    let (h, w) = c.shape();
    let x = Tensor::new(vec![1, h, w, 1], c.values().iter().map(|&v| v as f32).collect())?;
    let probs: Vec<f64> = model.predict(&x)?.data().iter().map(|&p| p as f64).collect();
    Ok((argmax(&probs), probs))
}

/// Steers at each direction in turn, optionally nulling the others, and
/// classifies the resulting cochleogram. Failures (e.g. a degenerate null
/// set) are reported per reflector.
pub fn isolate_and_classify(
    frontend: &Frontend,
    rec: &MultiChannelRecording,
    dirs: &[Direction],
    model: &CnnModel<f32>,
    use_nulls: bool,
) -> Vec<Result<Isolated>> {
    (0..dirs.len())
        .map(|i| {
            let nulls: Vec<Direction> = if use_nulls {
                dirs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).collect()
            } else {
                Vec::new()
            };
            let y = frontend.beam_signal(rec, dirs[i], &nulls)?;
            let cochleogram = crate::cochlea::to_cochleogram(&y, &frontend.cochleogram)?;
            let (predicted, probs) = classify(model, &cochleogram)?;
            Ok(Isolated {
                predicted,
                probs,
                energy_db: energy_db(y.samples()),
                cochleogram,
            })
        })
        .collect()
}

/// One reflector of one scene, both arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub scene: usize,
    pub reflector: usize,
    pub separation_deg: f64,
    pub true_class: usize,
    pub pred_nulls: usize,
    pub pred_plain: usize,
    pub energy_nulls_db: f64,
    pub energy_plain_db: f64,
}

/// Beamformer output of one example in both arms (time envelope and
/// magnitude spectrum).
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTrace {
    pub scene: usize,
    pub reflector: usize,
    pub time: Vec<f64>,
    pub nulls: Vec<f64>,
    pub plain: Vec<f64>,
    pub freqs: Vec<f64>,
    pub spectrum_nulls_db: Vec<f64>,
    pub spectrum_plain_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub separation_deg: f64,
    pub rows: Vec<AblationRow>,
    pub traces: Vec<AblationTrace>,
    pub forced_equal_arms: bool,
}

impl AblationReport {
    pub fn accuracy_nulls(&self) -> f64 {
        self.fraction(|r| r.pred_nulls == r.true_class)
    }

    pub fn accuracy_plain(&self) -> f64 {
        self.fraction(|r| r.pred_plain == r.true_class)
    }

    /// Mean of `energy_nulls_db - energy_plain_db` over reflectors.
    pub fn mean_energy_diff_db(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.energy_nulls_db - r.energy_plain_db).sum::<f64>() / self.rows.len() as f64
    }

    fn fraction(&self, f: impl Fn(&AblationRow) -> bool) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| f(r)).count() as f64 / self.rows.len() as f64
    }
}

/// Scenes for the ablation at one separation: random distinct classes,
/// one derived seed per scene.
pub fn ablation_scenes(cfg: &RunConfig, separation_deg: f64, seed: u64) -> Result<Vec<(Scene, u64)>> {
    let sim = &cfg.simulator;
    if sim.n_classes < N_REFLECTORS {
        return Err(Error::Config(format!(
            "ablation needs at least {N_REFLECTORS} classes, got {}",
            sim.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.ablation.n_scenes)
        .map(|_| {
            let classes: [usize; N_REFLECTORS] = sample(&mut rng, sim.n_classes, N_REFLECTORS)
                .into_vec()
                .try_into()
                .expect("four classes");
            let scene = isolation_scene(classes, separation_deg.to_radians(), cfg.ablation.range, cfg.ablation.snr_db, sim)?;
            Ok((scene, rand::Rng::random(&mut rng)))
        })
        .collect()
}

fn trace(frontend: &Frontend, rec: &MultiChannelRecording, dirs: &[Direction], i: usize, scene: usize, equal: bool) -> Result<AblationTrace> {
    let nulls: Vec<Direction> = if equal {
        Vec::new()
    } else {
        dirs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).collect()
    };
    let a = frontend.beam_signal(rec, dirs[i], &nulls)?;
    let b = frontend.beam_signal(rec, dirs[i], &[])?;
    let fs = a.sample_rate();
    let (freqs, sa) = crate::dsp::magnitude_spectrum_db(a.samples(), fs);
    let (_, sb) = crate::dsp::magnitude_spectrum_db(b.samples(), fs);
    Ok(AblationTrace {
        scene,
        reflector: i,
        time: (0..a.len()).map(|k| k as f64 / fs).collect(),
        nulls: a.samples().to_vec(),
        plain: b.samples().to_vec(),
        freqs,
        spectrum_nulls_db: sa,
        spectrum_plain_db: sb,
    })
}

/// Runs both arms of the isolation experiment on `scenes`. With
/// `force_equal_arms` the null list is empty in both arms.
pub fn ablate_nulls(
    frontend: &Frontend,
    scenes: &[(Scene, u64)],
    model: &CnnModel<f32>,
    force_equal_arms: bool,
    n_traces: usize,
) -> Result<AblationReport> {
    let per_scene = scenes
        .par_iter()
        .enumerate()
        .map(|(s, (scene, seed))| {
            let rec = frontend.record(scene, *seed)?;
            let dirs = reflector_directions(scene)?;
            let with = isolate_and_classify(frontend, &rec, &dirs, model, !force_equal_arms);
            let without = isolate_and_classify(frontend, &rec, &dirs, model, false);
            let sep = min_separation(&dirs).to_degrees();
            let rows = with
                .into_iter()
                .zip(without)
                .enumerate()
                .map(|(i, (a, b))| {
                    let (a, b) = (a?, b?);
                    Ok(AblationRow {
                        scene: s,
                        reflector: i,
                        separation_deg: sep,
                        true_class: scene.reflectors[i].size_class,
                        pred_nulls: a.predicted,
                        pred_plain: b.predicted,
                        energy_nulls_db: a.energy_db,
                        energy_plain_db: b.energy_db,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let traces = if s < n_traces {
                vec![trace(frontend, &rec, &dirs, 0, s, force_equal_arms)?]
            } else {
                Vec::new()
            };
            Ok((rows, traces))
        })
        .collect::<Result<Vec<_>>>()?;
    let separation_deg = per_scene
        .iter()
        .flat_map(|(r, _)| r.iter().map(|row| row.separation_deg))
        .fold(f64::INFINITY, f64::min);
    let (rows, traces): (Vec<_>, Vec<_>) = per_scene.into_iter().unzip();
    Ok(AblationReport {
        separation_deg,
        rows: rows.concat(),
        traces: traces.concat(),
        forced_equal_arms: force_equal_arms,
    })
}

/// Smallest pairwise angle between directions (rad).
pub fn min_separation(dirs: &[Direction]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in dirs.iter().enumerate() {
        for b in &dirs[i + 1..] {
            best = best.min(a.angle_to(b));
        }
    }
    best
}

/// Run config for the isolated-reflector training set of the ablation:
/// single reflectors near the ablation range, labelled by class.
pub fn single_label_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    let r = cfg.ablation.range;
    c.dataset.label_mode = LabelMode::Single;
    c.dataset.n_samples = cfg.ablation.train_samples;
    c.dataset.range = [(r * 0.95).max(0.31), (r * 1.05).min(3.0)];
    c.dataset.orientation_max_deg = 0.0;
    c.dataset.single_nulls = 3;
    match cfg.ablation.snr_db {
        Some(s) => {
            c.dataset.noiseless = false;
            c.dataset.snr_db = [s, s];
        }
        None => c.dataset.noiseless = true,
    }
    c
}

fn comment_block(w: &mut impl Write, lines: &str) -> std::io::Result<()> {
    for line in lines.lines() {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}

/// Writes the per-reflector rows with a commented header (config hash,
/// arm accuracies, the simulation caveat).
pub fn write_ablation_csv(report: &AblationReport, config_hash: &str, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    comment_block(&mut f, ABLATION_NOTE).map_err(io)?;
    writeln!(f, "# config_hash: {config_hash}").map_err(io)?;
    writeln!(
        f,
        "# separation_deg: {:.3}  accuracy_nulls: {:.4}  accuracy_plain: {:.4}  mean_energy_diff_db: {:.3}  forced_equal_arms: {}",
        report.separation_deg,
        report.accuracy_nulls(),
        report.accuracy_plain(),
        report.mean_energy_diff_db(),
        report.forced_equal_arms
    )
    .map_err(io)?;
    let mut w = csv::Writer::from_writer(f);
    for row in &report.rows {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(io)
}

#[derive(Serialize)]
struct TraceRow {
    kind: &'static str,
    x: f64,
    nulls: f64,
    plain: f64,
}

/// Time and spectrum traces of one example; `kind` is `time` (x in s) or
/// `spectrum` (x in Hz, values in dB).
pub fn write_trace_csv(trace: &AblationTrace, config_hash: &str, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "# config_hash: {config_hash}").map_err(io)?;
    writeln!(f, "# scene: {}  reflector: {}", trace.scene, trace.reflector).map_err(io)?;
    let mut w = csv::Writer::from_writer(f);
    let time = trace.time.iter().zip(&trace.nulls).zip(&trace.plain).map(|((&x, &a), &b)| TraceRow {
        kind: "time",
        x,
        nulls: a,
        plain: b,
    });
    let spec = trace
        .freqs
        .iter()
        .zip(&trace.spectrum_nulls_db)
        .zip(&trace.spectrum_plain_db)
        .map(|((&x, &a), &b)| TraceRow {
            kind: "spectrum",
            x,
            nulls: a,
            plain: b,
        });
    for row in time.chain(spec) {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(io)
}
