pub mod alignment;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
