//! Subword-unit knowledge graph embeddings.
//!
//! Entities and relations are byte-pair encoded, their subword embeddings
//! are looked up in one shared table and linearly projected into the space
//! where a multiplicative scorer (DistMult, ComplEx, QMult, Keci) compares
//! them. Strings never seen during training still get an embedding.

pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod optim;
pub mod params;
pub mod scorer;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
