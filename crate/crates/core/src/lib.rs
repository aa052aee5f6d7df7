pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod grouping;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod routing;
pub mod sparse_exec;
pub mod training;

pub use error::{LteError, Result};
