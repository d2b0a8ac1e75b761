//! Learngene pool construction for vision transformers: distill an ancestry
//! model into compact auxiliary models, harvest their blocks as reusable
//! instances, and assemble descendant models along stitched paths.
//!
//! Everything is deterministic: fixed seeds give bitwise identical results
//! across runs on the same target.

pub mod checkpoint;
pub mod data;
pub mod descendant;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod pool;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
