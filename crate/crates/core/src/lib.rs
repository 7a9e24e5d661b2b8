//! Role-based agents in a partially observable workflow, trained with
//! group-relative policy optimization against a four-part joint reward.

pub mod buffer;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod guards;
pub mod harness;
pub mod kv;
pub mod par;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod trace;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
