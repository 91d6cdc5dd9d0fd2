//! Corpus ingestion, subword segmentation and vocabularies.

pub mod bpe;
mod corpus;
pub mod text;
pub mod toy;
mod vocab;

pub use bpe::{detokenize, BpeModel};
pub use corpus::{read_lines, FilterOptions, LanguageData, ParallelCorpus, Provenance};
pub use text::{normalize, tokenize};
pub use toy::ToyTask;
pub use vocab::{Vocabulary, RESERVED};
