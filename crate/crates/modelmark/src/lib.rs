pub mod bundle;
pub mod cli;
pub mod dataset;
pub mod engine;
pub mod fixture;
pub mod format;
pub mod linalg;
pub mod package;
pub mod reweight;
pub mod rooting;
mod seeds;
pub mod verify;
