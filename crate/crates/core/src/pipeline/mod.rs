//! End-to-end workflows built on the signal chain and the network engine.

mod dataset;
mod frontend;
mod isolate;
mod metrics;
mod train;

pub use dataset::{
    load_dataset, read_tensor_file, sample_for_seed, sample_scene, sample_single_scene, save_dataset, split_dataset,
    synthesize_dataset, write_tensor_file, Dataset, Label, LabeledSample, SampleMeta, Split, DATASET_MAGIC,
    DATASET_VERSION, MANIFEST_NAME,
};
pub use frontend::Frontend;
pub use isolate::{
    ablate_nulls, ablation_scenes, classify, isolate_and_classify, isolation_scene, min_separation, reflector_directions,
    single_label_config, square_half_side, write_ablation_csv, write_trace_csv, AblationReport, AblationRow, AblationTrace,
    Isolated, ABLATION_NOTE,
};
pub use metrics::{
    evaluate_multilabel, input_tensor, multilabel_metrics, predict_probs, single_label_accuracy, target_tensor,
    threshold_labels, threshold_sweep, ClassConfusion, MultiLabelMetrics, SweepPoint,
};
pub use train::{class_weights, head_for, train_model, train_model_with, EpochRecord, History};
