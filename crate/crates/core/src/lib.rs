//! Course-review text classification benchmark.
//!
//! The crate covers the whole comparative pipeline: review ingestion and
//! labeling ([`corpus`]), vocabulary and TF-IDF features ([`vectorizer`]),
//! bag-of-words classifiers ([`classic`]), a small reverse-mode autodiff core
//! ([`tensor`]), CBOW word embeddings ([`embeddings`]), CNN and LSTM text
//! classifiers ([`neural`]), a toy transformer encoder ([`transformer`]) and
//! the stratified cross-validation harness with reporting ([`eval`]).

pub mod classic;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod neural;
pub mod tensor;
pub mod transformer;
pub mod vectorizer;

mod util;

pub use error::{Error, Result};
