//! Sample and annotation types, the on-disk format, batching and folds.

mod batch;
mod folds;
mod io;
pub mod tns;
mod types;

pub use batch::{collate, normalize, normalize_sample, Batch, ModalityBatch, PAD_DATE};
pub use folds::make_folds;
pub use io::{load_sample, load_sample_from, save_sample, ChannelStats, DatasetManifest, MANIFEST_FILE};
pub use types::{
    background_label, modality_name, void_label, AnnotationSet, ModalitySeries, MultimodalSample, MODALITY_NAMES,
};
