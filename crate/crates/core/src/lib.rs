//! Hydra attention and comparator attention mechanisms inside a small
//! encoder-only sequential recommender, with cloze training, leave-one-out
//! evaluation and a complexity benchmark harness.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
