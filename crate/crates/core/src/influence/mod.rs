//! Influence kernels, the tiled evaluation engine, and the influence tensor.

mod engine;
mod kernels;
mod tensor;

pub use engine::{compute_influence, InfluenceOptions, TilingPlan, TokenIndex};
pub use kernels::{cosine, datainf_scores, shared_tokens, tracin, tracin_f64, tracin_we, tracin_we_topk, DataInfConfig, EmbeddingRows};
pub use tensor::{read_tensor_dump, write_tensor_dump, InfluenceTensor, Method, TensorManifest};
