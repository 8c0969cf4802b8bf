//! Compositional discrete codes for contextual word vectors.
//!
//! Dense context vectors are compressed into short discrete codes by a
//! Gumbel-softmax autoencoder (`codec`), stored per lemma in binary sparse
//! associative memories (`sam`), and retrieved by Winner-Takes-All connection
//! counting to disambiguate word senses (`wsd`). Binary file formats live in
//! `io`.

pub mod codec;
pub mod core;
pub mod io;
pub mod sam;
pub mod wsd;

pub use crate::core::{CodeConfig, CompositionalCode, ContextVector, LabeledInstance};
pub use codec::{CodecModel, TrainConfig};
pub use sam::{QueryPattern, RetrievalResult, SparseMemory};
pub use wsd::{LemmaIndex, Prediction, Provenance};
