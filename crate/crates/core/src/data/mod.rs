//! Synthetic image-caption corpus, vocabulary and patch codebook.

pub mod codebook;
pub mod scene;
pub mod vocab;

pub use codebook::{fit_codebook, Codebook, KMeansFit};
pub use scene::{
    caption_of, generate_corpus, generate_pair, grammar_terminals, parse_caption, Color, Image, PairRecord, Qa,
    Scene, SceneObject, Shape, ANSWERS,
};
pub use vocab::{EncodedText, Vocabulary};
