//! The two conditioning inputs of the denoiser: an embedded prompt over a
//! closed vocabulary and a per-pixel edge map.

mod edges;
mod prompt;
mod vocab;

pub use edges::{edges_from_mask, extract_edges, EdgeConfig, EdgeExtractor, EdgeMap};
pub(crate) use edges::boundary;
pub use prompt::{encode_prompt, EmbeddingTable, PromptTriplet, TextEmbedding};
pub use vocab::{Role, Vocabulary};
