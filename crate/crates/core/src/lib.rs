pub mod ensemble;
pub mod error;
pub mod harness;
pub mod mdpc;
pub mod pmp;
pub mod sdre;
pub mod surrogate;

pub use error::{Error, Result};
