//! Joint source-target translation with locally constrained self-attention.

pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod masking;
pub mod model;
pub mod tensor;
pub mod training;
