//! Tokenizer, corpus and feature file formats, and the synthetic corpus.

pub mod corpus;
pub mod features;
pub mod synth;
pub mod text;

pub use corpus::{
    load_corpus, parse_corpus, prepare_items, render_corpus, save_corpus, Corpus, CorpusItem,
};
pub use features::{
    read_feature_file, read_features, write_features, FeatureSet, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synth::{generate_split, synth_dataset, SynthConfig, SynthFiles};
pub use text::{normalize, tokenize, Vocabulary};
