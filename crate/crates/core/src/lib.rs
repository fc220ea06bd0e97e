//! Joint training of a dense prediction task with a self-supervised
//! auxiliary objective on procedurally generated scenes.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck_suite;
pub mod nn;
pub mod seed;
pub mod ssl;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
