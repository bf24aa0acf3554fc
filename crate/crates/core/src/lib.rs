//! Trajectory sampling, instruction generation with multi-stage verification,
//! and pretext dataset construction for vision-and-language navigation.

pub mod dataset;
pub mod config;
pub mod frames;
pub mod gateway;
pub mod grounding;
pub mod lexicon;
pub mod model;
pub mod pipeline;
pub mod pretext;
pub mod prompt;
pub mod render;
pub mod sampler;
pub mod verify;

pub use lexicon::{ActionSynonyms, Canonical, RoomLexicon, RoomType, Vocabulary};
pub use model::*;
