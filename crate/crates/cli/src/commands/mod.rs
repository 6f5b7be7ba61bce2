pub mod detect;
pub mod eval;
mod shared;
pub mod sweep;
pub mod synth;
pub mod train;
