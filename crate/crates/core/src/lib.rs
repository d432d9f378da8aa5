//! Random dyadic cubes on finite quasimetric measure spaces, martingale
//! difference decompositions adapted to accretive functions, and numerical
//! diagnostics for local Tb theorems on non-doubling measures.

pub mod ball_cover;
pub mod corpus;
pub mod cz;
pub mod dyadic;
pub mod error;
pub mod linalg;
pub mod martingale;
pub mod measure;
pub mod random_dyadic;
pub mod rng;
pub mod space;
pub mod stats;
pub mod tb;

pub use error::{Error, Result};
