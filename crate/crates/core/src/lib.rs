pub mod aggregation;
pub mod ckptplan;
pub mod cli;
pub mod detection;
pub mod diagnosis;
pub mod error;
pub mod recovery;
pub mod report;
pub mod scenario;
pub mod simkernel;
pub mod topology;

pub use error::{Error, Result};
