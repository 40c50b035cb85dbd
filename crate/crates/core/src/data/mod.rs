//! Dual-factor datasets whose train and test label combinations are
//! disjoint while every factor value is seen in training.

mod pair;
mod source;
mod split;
mod synth2d;

pub use pair::{random_input, sample_pair, MergeMode, PairDataset, Role};
pub use source::{
    load_cifar_binary, load_idx, synth_patterns, FactorSource, SourceOrigin, PatternStyle,
};
pub use split::{LabelSplit, SplitScheme};
pub use synth2d::{
    blob_labels, quadrant_class, synth2d, synth2d_split, Synth2dCase, OPPOSITE_SIGN, SAME_SIGN,
};
