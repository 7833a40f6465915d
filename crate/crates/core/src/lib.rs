//! Detection transformer with content-initialized box queries and
//! horizontal-vertical encoder attention, sized to train on a CPU.

pub mod attention;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod query;
pub mod run;
pub mod synthdata;

pub use error::{Error, Result};
