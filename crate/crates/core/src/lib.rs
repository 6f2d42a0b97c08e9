pub mod config;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod retriever;
pub mod seed;

pub use error::{Error, Result};
