//! Dense tensors, a reverse-mode tape, and the layers the encoders are
//! assembled from.

mod gemm;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod timestamp;

pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use nn::{
    AttentionParams, LayerNormParams, LinearParams, MlpParams, TransformerBlockParams,
    TransformerStack,
};
pub use params::{xavier_uniform, ParamId, ParamStore};
pub use tensor::Tensor;
pub use timestamp::TimestampEncoding;
