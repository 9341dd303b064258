pub mod align1;
pub mod align2;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod proxystore;
pub mod ranker;

pub use error::{Error, Result};

/// Item id to proxy vector, ordered by id.
pub type ProxyMap = std::collections::BTreeMap<u32, Vec<f64>>;
