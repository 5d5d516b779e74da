//! Corpora: the synthetic toy world, vocabularies, feature files, manifests and batching.

pub mod batch;
pub mod features;
pub mod manifest;
pub mod vocab;
pub mod world;

pub use batch::{Batch, Dataset, EncodedSample};
pub use features::{load_features, save_features, FeatureSet};
pub use manifest::{DatasetManifest, VideoRecord};
pub use vocab::{build_vocab, tokenize, ObjectVocab, Vocab};
pub use world::{synth_corpus, Corpus, WorldSpec};
