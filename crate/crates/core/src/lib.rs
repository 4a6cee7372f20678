//! Query-conditioned re-ranking on frozen toy dual encoders.
//!
//! A small trainable MLP maps a text query to a handful of visual prompt
//! tokens that are injected into a frozen image transformer, so candidate
//! images can be re-encoded "through the eyes" of the query and re-scored.

pub mod curation;
pub mod encoders;
pub mod error;
pub mod io;
pub mod mapper;
pub mod numkit;
pub mod objectives;
pub mod retrieval;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
