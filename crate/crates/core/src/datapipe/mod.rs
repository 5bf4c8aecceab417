//! Volume I/O, preprocessing, data splits, patch sampling, augmentation and
//! synthetic corpora.

pub mod case;
pub mod manifest;
pub mod nrrd;
pub mod sampling;
pub mod split;
pub mod synth;

pub use case::{load_case, load_nrrd, preprocess, Case, PreprocessConfig};
pub use manifest::{write_dataset, Manifest, ManifestEntry, SplitTag};
pub use sampling::{augment, sample_patch, Augmentation, PatchSpec};
pub use split::{split, split_train, Split, SplitSpec};
pub use synth::{synth_generate, SynthConfig};
