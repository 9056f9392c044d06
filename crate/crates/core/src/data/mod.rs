//! Tabular data ingestion, preprocessing and splitting.

pub mod preprocess;
pub mod split;
pub mod synthetic;
pub mod table;

pub use preprocess::{
    encode_target, preprocess, preprocess_with, FeatureMatrix, FeatureTransform, FeatureTransformKind,
    LabelVector, PreprocessState, TargetEncoding, Task, TaskHint,
};
pub use split::{class_weights, prepare, split, split_indices, transfer_split, DatasetSplit, SplitIndices};
pub use table::{load_csv, read_csv, Column, ColumnData, ColumnKind, RawTable};
