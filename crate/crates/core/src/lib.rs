pub mod boxes;
pub mod cam;
pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod head;
pub mod lae;
pub mod loss;
pub mod msfm;
pub mod network;
pub mod nn;
pub mod profile;
pub mod rfa;
pub mod synth;
pub mod testing;
pub mod train;

pub use error::{Error, Result};
