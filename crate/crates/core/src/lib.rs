pub mod bench;
pub mod encoders;
pub mod error;
pub mod numerics;
pub mod synth;
pub mod train;
pub mod ttm;

pub use encoders::{Encoder, EncoderConfig, TokenGrid, Variant, VideoTokens};
pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Tensor, Var};
