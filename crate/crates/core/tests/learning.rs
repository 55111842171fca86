use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sqr_core::config::{LabelMode, RunConfig};
use sqr_core::nn::{
    bce_loss_with_logits, load_checkpoint, save_checkpoint, Adam, ArchitectureConfig, CnnModel, Head, Tensor,
};
use sqr_core::pipeline::*;

fn toy_set(seed: u64, n: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * 8 * 12).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut t = vec![0.0; n * 7];
    for row in t.chunks_mut(7) {
        for c in rand::seq::index::sample(&mut rng, 7, 4) {
            row[c] = 1.0;
        }
    }
    (Tensor::from_f64(vec![n, 8, 12, 1], &x).unwrap(), Tensor::from_f64(vec![n, 7], &t).unwrap())
}

#[test]
fn small_network_memorizes_fifty_samples() {
    let arch = ArchitectureConfig {
        blocks: vec![8],
        kernel: 3,
        pool: 2,
        hidden: vec![32],
    };
    let mut model = CnnModel::<f32>::new(arch.to_model_config([8, 12, 1], 7, Head::Sigmoid).unwrap(), 1).unwrap();
    let (x, t) = toy_set(2, 50);
    let mut opt = Adam::new(1e-3);
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let z = model.forward_logits(&x).unwrap();
        let (l, g) = bce_loss_with_logits(&z, &t, &[1.0; 7]).unwrap();
        loss = l;
        if loss < 0.05 {
            break;
        }
        model.zero_grad();
        model.backward_logits(&g).unwrap();
        opt.step(&mut model.params_mut());
    }
    assert!(loss < 0.05, "training loss stuck at {loss}");
}

fn tiny_config(seed: u64, mode: LabelMode) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.dataset.n_samples = 24;
    cfg.dataset.label_mode = mode;
    cfg.train.max_epochs = 2;
    cfg.train.patience = 2;
    cfg.train.batch_size = 8;
    cfg.model = ArchitectureConfig {
        blocks: vec![4, 8],
        kernel: 3,
        pool: 2,
        hidden: vec![16],
    };
    cfg
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

#[test]
fn fixed_seed_gives_bit_identical_parameters() {
    let cfg = tiny_config(5, LabelMode::Multi);
    let ds = single_threaded(|| synthesize_dataset(&cfg).unwrap());
    let run = || single_threaded(|| train_model(&ds, &cfg.model, &cfg.train).unwrap());
    let ((a, ha), (b, hb)) = (run(), run());
    assert_eq!(ha, hb);
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    assert_eq!(a.buffers(), b.buffers());
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let cfg = tiny_config(8, LabelMode::Single);
    let ds = synthesize_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.split, ds.split);
    assert_eq!(back.label_mode, LabelMode::Single);
    assert_eq!(back.config, ds.config);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.meta, b.meta);
        // stored as f32
        for (x, y) in a.cochleogram.values().iter().zip(b.cochleogram.values()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
    assert!(save_dataset(&ds, &path).is_err(), "existing dataset must not be overwritten");
}

#[test]
fn damaged_tensor_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.sqrd");
    write_tensor_file(&path, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let (dims, data) = read_tensor_file(&path).unwrap();
    assert_eq!((dims, data.len()), (vec![2, 3], 6));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_tensor_file(&path).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'Z';
    std::fs::write(&path, bad_magic).unwrap();
    assert!(read_tensor_file(&path).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let cfg = ArchitectureConfig::default().to_model_config([40, 106, 1], 7, Head::Softmax).unwrap();
    let model = CnnModel::<f32>::new(cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sqrm");
    save_checkpoint(&model, &path).unwrap();
    let back: CnnModel<f32> = load_checkpoint(&path).unwrap();
    let img = Tensor::from_f64(vec![1, 40, 106, 1], &vec![0.5; 40 * 106]).unwrap();
    assert_eq!(model.predict(&img).unwrap(), back.predict(&img).unwrap());
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<bool>>> {
    prop::collection::vec(prop::collection::vec(any::<bool>(), k), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_a_recount((pred, truth) in (1usize..100, 1usize..9).prop_flat_map(|(n, k)| (labels(n, k), labels(n, k)))) {
        let m = multilabel_metrics(&pred, &truth).unwrap();
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        let mut jac = 0.0;
        for (p, t) in pred.iter().zip(&truth) {
            let inter = p.iter().zip(t).filter(|(a, b)| **a && **b).count();
            let union = p.iter().zip(t).filter(|(a, b)| **a || **b).count();
            tp += inter;
            fp += p.iter().zip(t).filter(|(a, b)| **a && !**b).count();
            fneg += p.iter().zip(t).filter(|(a, b)| !**a && **b).count();
            jac += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        }
        let den = 2 * tp + fp + fneg;
        let f1 = if den == 0 { 1.0 } else { 2.0 * tp as f64 / den as f64 };
        prop_assert_eq!(m.micro_f1, f1);
        prop_assert_eq!(m.jaccard, jac / pred.len() as f64);
        prop_assert!((0.0..=1.0).contains(&m.macro_f1));
    }

    #[test]
    fn class_weights_preserve_the_label_total(hist in prop::collection::vec(0usize..5000, 1..12)) {
        let w = class_weights(&hist);
        let total: usize = hist.iter().sum();
        let weighted: f64 = w.iter().zip(&hist).map(|(w, &n)| w * n as f64).sum();
        prop_assert!((weighted - total as f64).abs() <= 1e-9 * (total.max(1) as f64));
    }

    #[test]
    fn splits_partition_the_indices(n in 1usize..500, seed in any::<u64>()) {
        let s = split_dataset(n, [0.64, 0.16, 0.20], seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
