//! Task heads, training and evaluation for parcel classification and
//! semantic segmentation.

mod data;
mod train;

use rand::Rng;

pub use data::{semantic_targets, ParcelRef, TaskData};
pub use train::{
    evaluate, evaluate_model, output_names, train, train_with, Checkpoint, EpochRecord, EvalSummary, OptimizerKind,
    OptimizerState, StepContext, TrainConfig, CHECKPOINT_DIR, HISTORY_FILE,
};

use crate::autograd::ParamStore;
use crate::fusion::Head;

/// 2-layer MLP producing `classes` logits per parcel.
pub fn classification_head(store: &mut ParamStore, name: &str, input: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Head {
    Head::classification(store, name, input, hidden, classes, rng)
}

/// 2-layer 1×1 convolution producing `classes` logits per pixel.
pub fn segmentation_head(store: &mut ParamStore, name: &str, input: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Head {
    Head::segmentation(store, name, input, hidden, classes, rng)
}
