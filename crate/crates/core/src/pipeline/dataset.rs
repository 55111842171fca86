use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{unit_propagation_vector, Direction, Vec3};
use crate::cochlea::{erb_center_frequencies, Cochleogram};
use crate::config::{DatasetConfig, LabelMode, RunConfig};
use crate::error::{Error, Result};
use crate::simulate::{reflector_direction, Scene, SimConfig, N_CONSTELLATIONS, N_REFLECTORS};

use super::Frontend;

pub const DATASET_MAGIC: &[u8; 4] = b"SQRD";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.toml";
const DTYPE_F32_LE: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub range: f64,
    pub orientation_deg: f64,
    pub constellation_id: usize,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    /// Presence flag per class.
    Multi(Vec<bool>),
    /// Class index.
    Single(usize),
}

impl Label {
    /// Positive classes in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        match self {
            Label::Multi(v) => v.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect(),
            Label::Single(c) => vec![*c],
        }
    }

    /// 0/1 target vector of length `n_classes`.
    pub fn target(&self, n_classes: usize) -> Vec<f64> {
        let mut t = vec![0.0; n_classes];
        for c in self.classes() {
            t[c] = 1.0;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub cochleogram: Cochleogram,
    pub label: Label,
    pub meta: SampleMeta,
}

/// Disjoint index lists covering the dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub split: Split,
    pub n_classes: usize,
    pub label_mode: LabelMode,
    pub config: RunConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 2] {
        let s = self.samples.first().map_or((0, 0), |s| s.cochleogram.shape());
        [s.0, s.1]
    }

    /// Positive count per class over `indices`.
    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &i in indices {
            for c in self.samples[i].label.classes() {
                h[c] += 1;
            }
        }
        h
    }
}

/// Draws a four-reflector constellation scene.
pub fn sample_scene(rng: &mut impl Rng, ds: &DatasetConfig, sim: &SimConfig) -> Result<Scene> {
    let classes: Vec<usize> = if sim.allow_duplicates {
        (0..N_REFLECTORS).map(|_| rng.random_range(0..sim.n_classes)).collect()
    } else {
        sample(rng, sim.n_classes, N_REFLECTORS).into_vec()
    };
    let id = rng.random_range(0..N_CONSTELLATIONS);
    let range = rng.random_range(ds.range[0]..=ds.range[1]);
    let gamma = rng.random_range(-ds.orientation_max_deg..=ds.orientation_max_deg).to_radians();
    let snr = draw_snr(rng, ds);
    Scene::constellation(classes.try_into().expect("four classes"), id, range, gamma, snr, sim)
}

/// Draws a scene holding one reflector somewhere on the backplate.
pub fn sample_single_scene(rng: &mut impl Rng, ds: &DatasetConfig, sim: &SimConfig) -> Result<Scene> {
    let class = rng.random_range(0..sim.n_classes);
    let range = rng.random_range(ds.range[0]..=ds.range[1]);
    let gamma = rng.random_range(-ds.orientation_max_deg..=ds.orientation_max_deg).to_radians();
    // keep the farthest corner inside the recording window, with 5 cm to spare
    let max_dist = sim.speed_of_sound * sim.window / 2.0 - 0.05;
    let fit = ((max_dist * max_dist - range * range).max(0.0) / 2.0).sqrt();
    let half = (range * ds.single_spread_deg.to_radians().tan()).min(fit);
    let offset = [rng.random_range(-half..=half), rng.random_range(-half..=half)];
    let snr = draw_snr(rng, ds);
    let scene = Scene {
        reflectors: vec![sim.reflector(class, offset)],
        constellation_id: 0,
        center_range: range,
        orientation: gamma,
        noise_snr_db: snr,
    };
    scene.validate_geometry(sim)?;
    Ok(scene)
}

fn draw_snr(rng: &mut impl Rng, ds: &DatasetConfig) -> Option<f64> {
    (!ds.noiseless).then(|| rng.random_range(ds.snr_db[0]..=ds.snr_db[1]))
}

/// Scene, steering direction and label for sample seed `seed`.
pub fn sample_for_seed(seed: u64, ds: &DatasetConfig, sim: &SimConfig, mode: LabelMode) -> Result<(Scene, Direction, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        LabelMode::Multi => {
            let scene = sample_scene(&mut rng, ds, sim)?;
            let mut flags = vec![false; sim.n_classes];
            for c in scene.size_classes() {
                flags[c] = true;
            }
            Ok((scene, Direction::boresight(), Label::Multi(flags)))
        }
        LabelMode::Single => {
            let scene = sample_single_scene(&mut rng, ds, sim)?;
            let dir = reflector_direction(&scene, 0)?;
            let class = scene.reflectors[0].size_class;
            Ok((scene, dir, Label::Single(class)))
        }
    }
}

fn synthesize_sample(frontend: &Frontend, cfg: &RunConfig, seed: u64) -> Result<LabeledSample> {
    let (scene, steer, label) = sample_for_seed(seed, &cfg.dataset, &cfg.simulator, cfg.dataset.label_mode)?;
    let rec = frontend.record(&scene, seed.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15)?;
    let nulls = match cfg.dataset.label_mode {
        LabelMode::Single => random_nulls(seed, steer, &cfg.dataset),
        LabelMode::Multi => Vec::new(),
    };
    let cochleogram = frontend.cochleogram(&rec, steer, &nulls)?;
    Ok(LabeledSample {
        cochleogram,
        label,
        meta: SampleMeta {
            seed,
            range: scene.center_range,
            orientation_deg: scene.orientation.to_degrees(),
            constellation_id: scene.constellation_id,
            snr_db: scene.noise_snr_db,
        },
    })
}

/// Up to `ds.single_nulls` directions at random angular offsets from `steer`.
fn random_nulls(seed: u64, steer: Direction, ds: &DatasetConfig) -> Vec<Direction> {
    if ds.single_nulls == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e75_6c6c);
    let u = unit_propagation_vector(steer);
    // any unit vector not parallel to u seeds the perpendicular basis
    let seed_axis = if u[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e1 = normalize(cross(&u, &seed_axis));
    let e2 = cross(&u, &e1);
    let [lo, hi] = ds.single_null_offset_deg.map(f64::to_radians);
    let count = rng.random_range(0..=ds.single_nulls);
    (0..count)
        .map(|_| {
            let a = rng.random_range(lo..=hi);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (sa, ca) = a.sin_cos();
            let (sp, cp) = phi.sin_cos();
            let v: Vec3 = std::array::from_fn(|k| ca * u[k] + sa * (cp * e1[k] + sp * e2[k]));
            Direction::toward(&v)
        })
        .collect()
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|v| v / n)
}

/// Per-sample seeds and the split seed derived from the master seed.
fn derive_seeds(master: u64, n: usize) -> (Vec<u64>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let seeds = (0..n).map(|_| rng.random()).collect();
    (seeds, rng.random())
}

/// Synthesizes `cfg.dataset.n_samples` labeled cochleograms and splits them.
/// The result depends only on `cfg` (including `cfg.seed`).
pub fn synthesize_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let frontend = Frontend::from_config(cfg)?;
    let (seeds, split_seed) = derive_seeds(cfg.seed, cfg.dataset.n_samples);
    let samples = seeds
        .par_iter()
        .map(|&s| synthesize_sample(&frontend, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let split = split_dataset(samples.len(), cfg.dataset.split, split_seed)?;
    Ok(Dataset {
        samples,
        split,
        n_classes: cfg.simulator.n_classes,
        label_mode: cfg.dataset.label_mode,
        config: cfg.clone(),
    })
}

/// Seeded shuffle followed by contiguous train / validation / test blocks
/// of `round(f n)` samples; the test block takes the remainder.
pub fn split_dataset(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    file: String,
    classes: Vec<usize>,
    #[serde(flatten)]
    meta: SampleMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    master_seed: u64,
    config_hash: String,
    n_classes: usize,
    label_mode: LabelMode,
    image_shape: [usize; 2],
    frame_duration: f64,
    split: Split,
    samples: Vec<ManifestEntry>,
    config: RunConfig,
}

/// Writes one `SQRD` tensor file.
pub fn write_tensor_file(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * dims.len() + 4 * data.len());
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.push(DTYPE_F32_LE);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads one `SQRD` tensor file into `(dims, data)`.
pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format(path, d);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated tensor file"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != DATASET_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let version = u32_at(take(4)?);
    if version != DATASET_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    if take(1)?[0] != DTYPE_F32_LE {
        return Err(bad("unsupported dtype"));
    }
    let ndims = u32_at(take(4)?) as usize;
    if ndims > 8 {
        return Err(bad("too many dimensions"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(u32_at(take(4)?) as usize);
    }
    let n: usize = dims.iter().product();
    let data = take(n * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((dims, data))
}

/// Writes the dataset into a new directory `dir`. Refuses to touch an
/// existing non-empty directory.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
        return Err(Error::Data(format!("{} already exists and is not empty", dir.display())));
    }
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let file = format!("samples/{i:06}.sqrd");
        let (h, w) = s.cochleogram.shape();
        let data: Vec<f32> = s.cochleogram.values().iter().map(|&v| v as f32).collect();
        write_tensor_file(&dir.join(&file), &[h, w], &data)?;
        entries.push(ManifestEntry {
            file,
            classes: s.label.classes(),
            meta: s.meta.clone(),
        });
    }
    let manifest = Manifest {
        format_version: DATASET_VERSION,
        master_seed: ds.config.seed,
        config_hash: ds.config.hash(),
        n_classes: ds.n_classes,
        label_mode: ds.label_mode,
        image_shape: ds.image_shape(),
        frame_duration: ds.samples.first().map_or(0.0, |s| s.cochleogram.frame_duration()),
        split: ds.split.clone(),
        samples: entries,
        config: ds.config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    let path = dir.join(MANIFEST_NAME);
    let tmp = dir.join(format!(".{MANIFEST_NAME}.tmp"));
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format_version != DATASET_VERSION {
        return Err(Error::format(&path, format!("unsupported format version {}", m.format_version)));
    }
    let fb = &m.config.cochleogram.filterbank;
    let centers = erb_center_frequencies(fb.n_channels, fb.f_min, fb.f_max);
    let samples = m
        .samples
        .par_iter()
        .map(|e| -> Result<LabeledSample> {
            let file: PathBuf = dir.join(&e.file);
            let (dims, data) = read_tensor_file(&file)?;
            if dims != m.image_shape {
                return Err(Error::format(&file, format!("shape {dims:?} differs from manifest {:?}", m.image_shape)));
            }
            let cochleogram = Cochleogram::from_values(
                dims[0],
                dims[1],
                data.into_iter().map(f64::from).collect(),
                centers.clone(),
                m.frame_duration,
            )
            .map_err(|err| Error::format(&file, err.to_string()))?;
            if e.classes.iter().any(|&c| c >= m.n_classes) {
                return Err(Error::format(&path, format!("{}: class out of range", e.file)));
            }
            let label = match m.label_mode {
                LabelMode::Multi => {
                    let mut flags = vec![false; m.n_classes];
                    e.classes.iter().for_each(|&c| flags[c] = true);
                    Label::Multi(flags)
                }
                LabelMode::Single => match e.classes.as_slice() {
                    [c] => Label::Single(*c),
                    _ => return Err(Error::format(&path, format!("{}: single-label entry needs one class", e.file))),
                },
            };
            Ok(LabeledSample {
                cochleogram,
                label,
                meta: e.meta.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<usize> = m.split.train.iter().chain(&m.split.val).chain(&m.split.test).copied().collect();
    all.sort_unstable();
    if all != (0..samples.len()).collect::<Vec<_>>() {
        return Err(Error::format(&path, "split lists are not a partition of the samples"));
    }
    Ok(Dataset {
        samples,
        split: m.split,
        n_classes: m.n_classes,
        label_mode: m.label_mode,
        config: m.config,
    })
}
