//! Inputs: vocabulary, tag extraction, the synthetic scene generator, the
//! dataset file format and the cue encoders.

mod dataset;
mod encode;
mod synth;
mod tags;
mod vocab;

pub use dataset::{CueBundle, Dataset};
pub use encode::{
    encode_caption, encode_image, encode_place, encode_sequences, encode_tags, feature_rows, TagEncoder,
};
pub use synth::{
    synth_example, synth_generate, synth_tag_lexicon, synth_vocabulary, SceneSpec, SynthConfig, ATTRIBUTES,
    IMAGE_SLOTS, OBJECTS, PLACES, QUESTIONS_PER_SCENE, SUBJECTS, VERBS,
};
pub use tags::{extract_tags, Pos, TagLexicon, TagSet, QUESTION_WORDS, TAGS_PER_CATEGORY};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset not found: {0}")]
    NotFound(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("invalid generator settings: {0}")]
    Config(String),
}
