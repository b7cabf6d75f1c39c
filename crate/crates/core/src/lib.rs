//! Cross-lingual word sense disambiguation by mapping contextual embeddings into a shared
//! space and labelling tokens against dense or sparse sense representations.

pub mod alignment;
pub mod anchors;
mod binio;
pub mod embstore;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod sensemodel;
pub mod sparsecode;
pub mod special;

pub use error::{Error, Result};
