pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod connector;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod inference;
pub mod ipcn;
pub mod models;
pub mod nn;
pub mod optim;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
