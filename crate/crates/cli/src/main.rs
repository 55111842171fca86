use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sqr_core::array::Direction;
use sqr_core::beamform::beam_pattern;
use sqr_core::config::{LabelMode, RunConfig};
use sqr_core::nn::{load_checkpoint, save_checkpoint, CnnModel};
use sqr_core::pipeline::{
    ablate_nulls, ablation_scenes, load_dataset, predict_probs, save_dataset, single_label_accuracy,
    single_label_config, synthesize_dataset, threshold_labels, threshold_sweep, train_model_with, write_ablation_csv,
    write_trace_csv, Dataset, Frontend, History, MultiLabelMetrics,
};
use sqr_core::{Error, ErrorCategory, Result};

#[derive(Parser)]
#[command(name = "sqr", version, about = "Reflector-constellation sonar experiments")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single-threaded execution with deterministic reduction order.
    #[arg(long, global = true)]
    reproducible: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labelled cochleogram dataset.
    Synth(SynthArgs),
    /// Train a classifier on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Narrowband beam pattern of the null-steered beamformer.
    Beampattern(OutArgs),
    /// Null-steering ablation of the reflector isolation pipeline.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Multi,
    Single,
}

impl From<HeadArg> for LabelMode {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Multi => LabelMode::Multi,
            HeadArg::Single => LabelMode::Single,
        }
    }
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; a numbered sibling is used if it already has content.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of reflector size classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Multi-label constellations or single isolated reflectors.
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Expected head; must match the dataset's label mode.
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Positive-class threshold (strict).
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write the threshold sweep.
    #[arg(long)]
    sweep: bool,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Single-label checkpoint; one is trained when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Use an empty null list in both arms.
    #[arg(long)]
    force_equal_arms: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.reproducible {
        // the global pool can only be built once; ignore the error if it exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(base, a),
        Command::Train(a) => train(base, cli.config.is_some(), a),
        Command::Eval(a) => eval(base, a),
        Command::Beampattern(a) => beampattern(base, a),
        Command::Ablate(a) => ablate(base, a),
    }
}

/// `requested` if it is missing or empty, otherwise the first free
/// `requested-N`.
fn fresh_dir(requested: &Path) -> Result<PathBuf> {
    let is_free = |p: &Path| match fs::read_dir(p) {
        Ok(mut it) => it.next().is_none(),
        Err(_) => !p.exists(),
    };
    let mut candidate = requested.to_path_buf();
    let mut n = 1;
    while !is_free(&candidate) {
        n += 1;
        let mut name = requested.file_name().unwrap_or_default().to_os_string();
        name.push(format!("-{n}"));
        candidate = requested.with_file_name(name);
    }
    fs::create_dir_all(&candidate).map_err(|e| Error::io(&candidate, e))?;
    Ok(candidate)
}

fn out_dir(args: &OutArgs, cfg: &RunConfig, default: &str) -> Result<PathBuf> {
    let requested = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(|d| d.join(default)))
        .unwrap_or_else(|| PathBuf::from(default));
    fresh_dir(&requested)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_run_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = format!("# config_hash: {}\n{}", cfg.hash(), cfg.to_toml());
    write_file(&dir.join("config.toml"), &text)
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    if let Some(n) = a.n {
        cfg.dataset.n_samples = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.classes {
        cfg.simulator.n_classes = k;
    }
    if let Some(h) = a.head {
        cfg.dataset.label_mode = h.into();
    }
    cfg.validate()?;
    let dir = out_dir(&a.out, &cfg, "dataset")?;
    let ds = synthesize_dataset(&cfg)?;
    save_dataset(&ds, &dir)?;
    let hist = ds.label_histogram(&(0..ds.len()).collect::<Vec<_>>());
    println!("wrote {} samples to {}", ds.len(), dir.display());
    println!("label histogram: {hist:?}");
    println!("config hash: {}", cfg.hash());
    Ok(())
}

/// Dataset config with the model and training sections taken from the
/// explicit config file, when one was given.
fn training_config(base: &RunConfig, explicit: bool, ds: &Dataset) -> RunConfig {
    let mut cfg = ds.config.clone();
    if explicit {
        cfg.model = base.model.clone();
        cfg.train = base.train.clone();
        cfg.eval = base.eval.clone();
    }
    cfg
}

fn write_history(path: &Path, h: &History, cfg: &RunConfig) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    let t = &cfg.train;
    writeln!(
        f,
        "# learning_rate: {}  max_epochs: {}  patience: {}  batch_size: {}  seed: {}",
        t.learning_rate, t.max_epochs, t.patience, t.batch_size, t.seed
    )
    .map_err(io)?;
    writeln!(f, "# best_epoch: {}  stopped_early: {}", h.best_epoch, h.stopped_early).map_err(io)?;
    writeln!(f, "# class_weights: {:?}", h.class_weights).map_err(io)?;
    writeln!(f, "# config_hash: {}", cfg.hash()).map_err(io)?;
    writeln!(f, "epoch,train_loss,val_loss,val_f1").map_err(io)?;
    for r in &h.epochs {
        writeln!(f, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_score).map_err(io)?;
    }
    f.flush().map_err(io)
}

fn train(base: RunConfig, explicit: bool, a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut cfg = training_config(&base, explicit, &ds);
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
        cfg.train.patience = cfg.train.patience.min(e);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(h) = a.head {
        let want: LabelMode = h.into();
        if want != ds.label_mode {
            return Err(Error::Config(format!(
                "--head {want:?} does not match the {:?} dataset at {}",
                ds.label_mode,
                a.data.display()
            )));
        }
    }
    cfg.validate()?;
    let dir = out_dir(&a.out, &cfg, "model")?;
    let (model, history) = train_model_with(&ds, &cfg.model, &cfg.train, |r| {
        eprintln!(
            "epoch {:3}  train {:.5}  val {:.5}  score {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_score
        )
    })?;
    save_checkpoint(&model, &dir.join("model.sqrm"))?;
    write_history(&dir.join("history.csv"), &history, &cfg)?;
    save_run_config(&dir, &cfg)?;
    println!("best epoch {} of {}", history.best_epoch, history.epochs.len());
    println!("wrote {}", dir.display());
    Ok(())
}

fn split_indices(ds: &Dataset, s: SplitArg) -> &[usize] {
    match s {
        SplitArg::Train => &ds.split.train,
        SplitArg::Val => &ds.split.val,
        SplitArg::Test => &ds.split.test,
    }
}

fn write_metrics(dir: &Path, m: &MultiLabelMetrics, threshold: f64, hash: &str) -> Result<()> {
    let text = format!(
        "# config_hash: {hash}\nthreshold,n_samples,micro_f1,macro_f1,jaccard\n{threshold},{},{},{},{}\n",
        m.n_samples, m.micro_f1, m.macro_f1, m.jaccard
    );
    write_file(&dir.join("metrics.csv"), &text)?;
    let mut conf = format!("# config_hash: {hash}\nclass,tp,fp,fn,tn,precision,recall,f1\n");
    for (c, cc) in m.per_class.iter().enumerate() {
        conf.push_str(&format!(
            "{c},{},{},{},{},{},{},{}\n",
            cc.tp,
            cc.fp,
            cc.fn_,
            cc.tn,
            cc.precision(),
            cc.recall(),
            cc.f1()
        ));
    }
    write_file(&dir.join("confusion.csv"), &conf)
}

fn eval(base: RunConfig, a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let model: CnnModel<f32> = load_checkpoint(&a.model)?;
    if model.n_outputs() != ds.n_classes {
        return Err(Error::Data(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            model.n_outputs(),
            ds.n_classes
        )));
    }
    let threshold = a.threshold.unwrap_or(base.train.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let idx = split_indices(&ds, a.split);
    if idx.is_empty() {
        return Err(Error::Data("selected split is empty".into()));
    }
    let hash = ds.config.hash();
    let dir = out_dir(&a.out, &base, "eval")?;
    if ds.label_mode == LabelMode::Single {
        let acc = single_label_accuracy(&model, &ds, idx)?;
        println!("accuracy {acc:.4}");
        return write_file(&dir.join("metrics.csv"), &format!("# config_hash: {hash}\nn_samples,accuracy\n{},{acc}\n", idx.len()));
    }
    let probs = predict_probs(&model, &ds, idx)?;
    let truth: Vec<Vec<bool>> = idx
        .iter()
        .map(|&i| ds.samples[i].label.target(ds.n_classes).iter().map(|&t| t > 0.5).collect())
        .collect();
    let m = sqr_core::pipeline::multilabel_metrics(&threshold_labels(&probs, threshold), &truth)?;
    println!("micro_f1 {:.4}", m.micro_f1);
    println!("macro_f1 {:.4}", m.macro_f1);
    println!("jaccard {:.4}", m.jaccard);
    write_metrics(&dir, &m, threshold, &hash)?;
    if a.sweep {
        let mut text = format!("# config_hash: {hash}\nthreshold,micro_f1,jaccard,positives\n");
        for p in threshold_sweep(&probs, &truth, base.eval.sweep_points)? {
            text.push_str(&format!("{},{},{},{}\n", p.threshold, p.micro_f1, p.jaccard, p.positives));
        }
        write_file(&dir.join("sweep.csv"), &text)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn beampattern(cfg: RunConfig, a: OutArgs) -> Result<()> {
    let bp = &cfg.beampattern;
    let geom = cfg.geometry.build()?;
    let steer = Direction::from_degrees(bp.steer_deg[0], bp.steer_deg[1])?;
    let nulls = bp
        .nulls_deg
        .iter()
        .map(|d| Direction::from_degrees(d[0], d[1]))
        .collect::<Result<Vec<_>>>()?;
    let [start, stop, step] = bp.azimuth_grid;
    if !(step > 0.0 && stop >= start) {
        return Err(Error::Config("beampattern.azimuth_grid must be [start, stop, step>0]".into()));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    let mut az: Vec<f64> = (0..n).map(|i| start + i as f64 * step).collect();
    // make the null azimuths appear exactly on the grid
    for d in bp.nulls_deg.iter().filter(|d| d[1] == bp.steer_deg[1]) {
        if !az.contains(&d[0]) {
            az.push(d[0]);
        }
    }
    az.sort_by(f64::total_cmp);
    let probes = az
        .iter()
        .map(|&x| Direction::from_degrees(x, bp.steer_deg[1]))
        .collect::<Result<Vec<_>>>()?;
    let with = beam_pattern(&geom, steer, &nulls, bp.frequency, &probes, cfg.beamform.speed_of_sound)?;
    let without = beam_pattern(&geom, steer, &[], bp.frequency, &probes, cfg.beamform.speed_of_sound)?;
    let dir = out_dir(&a, &cfg, "beampattern")?;
    for (name, response, nulls_deg) in [
        ("beampattern.csv", &with, bp.nulls_deg.as_slice()),
        ("beampattern_no_nulls.csv", &without, &[][..]),
    ] {
        let mut text = format!(
            "# config_hash: {}\n# frequency_hz: {}  steer_deg: {:?}  nulls_deg: {:?}\nazimuth_deg,elevation_deg,response_db\n",
            cfg.hash(),
            bp.frequency,
            bp.steer_deg,
            nulls_deg
        );
        for (x, r) in az.iter().zip(response.iter()) {
            text.push_str(&format!("{x},{},{r}\n", bp.steer_deg[1]));
        }
        write_file(&dir.join(name), &text)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn ablate(mut cfg: RunConfig, a: AblateArgs) -> Result<()> {
    if a.force_equal_arms {
        cfg.ablation.force_equal_arms = true;
    }
    cfg.validate()?;
    let dir = out_dir(&a.out, &cfg, "ablation")?;
    let hash = cfg.hash();
    let model: CnnModel<f32> = match &a.model {
        Some(p) => load_checkpoint(p)?,
        None => {
            let sc = single_label_config(&cfg);
            eprintln!("training single-label model on {} isolated reflectors", sc.dataset.n_samples);
            let ds = synthesize_dataset(&sc)?;
            let (m, h) = train_model_with(&ds, &sc.model, &sc.train, |r| {
                eprintln!("epoch {:3}  train {:.5}  val {:.5}  acc {:.4}", r.epoch, r.train_loss, r.val_loss, r.val_score)
            })?;
            save_checkpoint(&m, &dir.join("single.sqrm"))?;
            write_history(&dir.join("single_history.csv"), &h, &sc)?;
            m
        }
    };
    if model.n_outputs() != cfg.simulator.n_classes {
        return Err(Error::Data(format!(
            "checkpoint predicts {} classes, config has {}",
            model.n_outputs(),
            cfg.simulator.n_classes
        )));
    }
    let frontend = Frontend::from_config(&cfg)?;
    let mut summary = format!("# config_hash: {hash}\nseparation_deg,n_reflectors,accuracy_nulls,accuracy_plain,mean_energy_diff_db\n");
    for (i, &sep) in cfg.ablation.separations_deg.iter().enumerate() {
        let scenes = ablation_scenes(&cfg, sep, cfg.seed.wrapping_add(i as u64))?;
        let report = ablate_nulls(&frontend, &scenes, &model, cfg.ablation.force_equal_arms, cfg.ablation.n_traces)?;
        write_ablation_csv(&report, &hash, &dir.join(format!("ablation_sep{sep}.csv")))?;
        for t in &report.traces {
            write_trace_csv(t, &hash, &dir.join(format!("trace_sep{sep}_scene{}.csv", t.scene)))?;
        }
        println!(
            "separation {sep} deg: accuracy with nulls {:.3}, without {:.3}, energy difference {:.2} dB",
            report.accuracy_nulls(),
            report.accuracy_plain(),
            report.mean_energy_diff_db()
        );
        summary.push_str(&format!(
            "{sep},{},{},{},{}\n",
            report.rows.len(),
            report.accuracy_nulls(),
            report.accuracy_plain(),
            report.mean_energy_diff_db()
        ));
    }
    write_file(&dir.join("summary.csv"), &summary)?;
    save_run_config(&dir, &cfg)?;
    println!("wrote {}", dir.display());
    Ok(())
}
