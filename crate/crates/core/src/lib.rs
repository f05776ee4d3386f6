pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode_eval;
pub mod depgraph;
pub mod encoder;
pub mod error;
pub mod gat;
pub mod gradcheck;
pub mod heads;
pub mod labelsem;
pub mod model;
pub mod params;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
