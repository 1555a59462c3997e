//! Text-to-voxel generation guided by a text–shape knowledge graph.

pub mod causal;
pub mod config;
pub mod diversity;
pub mod error;
pub mod eval;
pub mod genfuse;
pub mod kgraph;
pub mod repnet;
pub mod synthdata;

pub use error::{CoreError, Result};
