//! Synthetic data, record files and dataset assembly.

pub mod dataset;
pub mod records;
pub mod synthetic;

pub use dataset::{
    condition_all, condition_record, eval_segments, fold_from_tags, make_dataset, model_input, raw_segment_bpm,
    reference_bpm, segment_bpm, standardized_target, training_windows, ConditionedRecord, EvalSegment, Fold, Protocol,
    SplitSpec, Window, WindowConfig,
};
pub use records::{
    load_manifest_splits, load_record, load_records, parse_record, read_manifest, record_to_csv, save_record,
    write_manifest, LabeledRecord, ManifestEntry, SplitTag,
};
pub use synthetic::{generate_synthetic, generate_synthetic_parts, SyntheticConfig, SyntheticParts};
