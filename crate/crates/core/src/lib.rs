pub mod align;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod head;
pub mod losses;
pub mod model;
pub mod params;
pub mod pqca;
pub mod query;
pub mod sample;
pub mod scalar;
pub mod scene;

pub use error::{Error, Result};
pub use grid::GridSpec;
pub use scalar::Scalar;
