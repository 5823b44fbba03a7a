//! Narrative-video tasks as interleaved multimodal sequences: a desk-scale
//! decoder-only language model with a frozen base, LoRA adapters, and a
//! temporal visual projector, trained on instruction data built from four
//! context sources (character photos, plots, subtitles, clip history) and
//! evaluated through generative task adapters and captioning/retrieval
//! metrics.

pub mod adapters;
pub mod encoders;
pub mod harness;
pub mod instructions;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod seqcore;
pub mod store;
