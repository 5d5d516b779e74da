//! Object-oriented non-autoregressive controllable video captioning.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`optim`], [`params`], [`checkpoint`]: a small f64
//!   tensor library with reverse-mode autodiff and Adam.
//! * [`nn`]: transformer decoder blocks (multi-head attention, feed-forward,
//!   the self-attention → source-attention → feed-forward layer) and sequence
//!   embeddings.
//! * [`model`]: feature projection, object predictor, length predictor,
//!   object generator, caption generator and the joint training loss.
//! * [`decode`]: object selection with user overrides, three-step parallel
//!   generation, confidence-based refinement, de-duplication and length-beam
//!   candidate selection; [`ar`] holds the autoregressive baseline.
//! * [`data`]: synthetic corpus, vocabulary, feature files and batching.
//! * [`metrics`]: BLEU, ROUGE-L, CIDEr, diversity and throughput.

pub mod ar;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{AttnLayout, Tape, Var};
pub use tensor::Tensor;
