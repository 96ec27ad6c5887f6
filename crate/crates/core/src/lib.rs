//! Variational information bottleneck compression of contextual embeddings
//! into stochastic tags, trained jointly with a graph-based dependency parser.

pub mod analysis;
pub mod annealing;
pub mod checkpoint;
pub mod data;
pub mod dists;
pub mod encoders;
pub mod error;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod params;
pub mod parser;
pub mod synthetic;
pub mod tape;

pub use error::{Error, ErrorKind, Result};
pub use model::{ModelKind, ModelParams};
pub use objective::{train, VIBConfig};
pub use tape::{Mat, Tape, Var};
