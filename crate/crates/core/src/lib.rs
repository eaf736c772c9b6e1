//! Biaffine graph-based dependency parsing with cross-variety transfer.

pub mod autodiff;
pub mod checkpoint;
pub mod conllu;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod scorer;
pub mod synth;
pub mod trainer;
pub mod vocab;
