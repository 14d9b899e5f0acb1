pub mod annotation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod crosslingual;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod guidance;
pub mod metrics;
pub mod motion;
pub mod oracle;
pub mod reward;
pub mod schedule;

pub use error::{Error, Result};
