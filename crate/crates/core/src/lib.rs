//! Extracts a smaller single-language model from a multilingual
//! SentencePiece-tokenized transformer checkpoint.
//!
//! The flow is: count piece frequencies over target- and secondary-language
//! corpora with the original tokenizer ([`corpus`], [`tokenizer`]), choose a
//! fixed-size vocabulary ([`select`]), rewrite the tokenizer model
//! ([`sp_model`]) and drop the unused rows of every vocabulary-axis tensor
//! in the checkpoint ([`surgery`]). [`pipeline`] runs the stages end to end
//! with persisted, digest-stamped artifacts.

pub mod corpus;
pub mod pipeline;
pub mod select;
pub mod sp_model;
pub mod surgery;
pub mod tokenizer;
mod wire;

pub use corpus::{count_frequencies, coverage_curve, overlap, read_corpus, used_fraction, FrequencyTable};
pub use select::{predict_param_reduction, select_vocabulary, top_k, ModelDims, SelectionParams, VocabPlan};
pub use sp_model::{parse_sp_model, serialize_sp_model, Piece, PieceId, PieceKind, SpModel};
pub use surgery::{prune_checkpoint, read_tensor_index, slice_rows, verify_checkpoint};
pub use tokenizer::{build_tokenizer, normalize, Tokenizer};
pub use wire::WireError;
