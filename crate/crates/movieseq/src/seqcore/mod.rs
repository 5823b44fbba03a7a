//! Interleaved-sequence data model: vocabulary, segments, samples, and the
//! packed slot/mask layout fed to the model.

mod pack;
mod vocab;

pub use pack::{pack, pack_prefix, truncate_context, Keep, PackedSequence, Slot};
pub use vocab::{
    TokenId, Vocabulary, BOS, EOS, PAD, SCAFFOLD_ASSISTANT, SCAFFOLD_USER, UNK,
};

use crate::encoders::VisualPayload;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("packed sequence needs {needed} slots but max length is {max}")]
    OverLength { needed: usize, max: usize },
    #[error("answer is empty in training mode")]
    EmptyAnswer,
    #[error("token id {0} is out of range")]
    InvalidId(u32),
    #[error("invalid vocabulary file: {0}")]
    BadVocabFile(String),
    #[error("image segment must reference exactly one frame, got {0}")]
    BadImageFrames(usize),
    #[error("video segment must reference at least one frame")]
    EmptyVideo,
    #[error("answer segments must be text")]
    NonTextAnswer,
    #[error("{0}: {1}")]
    Io(String, String),
}

/// What a segment is for. Answer-role segments are text-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Context,
    Question,
    Answer,
}

/// Which context source produced a segment. Drives the overflow-truncation
/// order in `pack`: plots shrink first (keep head), then subtitles (keep
/// tail), then whole history clip/narration pairs drop oldest-first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentTag {
    General,
    Character,
    Plot,
    Subtitle,
    History,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Text,
    Image,
    Video,
}

#[derive(Debug, Clone)]
pub enum SegmentPayload {
    Text(Vec<TokenId>),
    Visual(VisualPayload),
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub kind: SegmentKind,
    pub role: Role,
    pub tag: SegmentTag,
    pub payload: SegmentPayload,
}

impl Segment {
    pub fn text(role: Role, tag: SegmentTag, tokens: Vec<TokenId>) -> Self {
        Self {
            kind: SegmentKind::Text,
            role,
            tag,
            payload: SegmentPayload::Text(tokens),
        }
    }

    pub fn image(role: Role, tag: SegmentTag, payload: VisualPayload) -> Result<Self, SeqError> {
        if role == Role::Answer {
            return Err(SeqError::NonTextAnswer);
        }
        if payload.num_frames() != 1 {
            return Err(SeqError::BadImageFrames(payload.num_frames()));
        }
        Ok(Self {
            kind: SegmentKind::Image,
            role,
            tag,
            payload: SegmentPayload::Visual(payload),
        })
    }

    pub fn video(role: Role, tag: SegmentTag, payload: VisualPayload) -> Result<Self, SeqError> {
        if role == Role::Answer {
            return Err(SeqError::NonTextAnswer);
        }
        if payload.num_frames() == 0 {
            return Err(SeqError::EmptyVideo);
        }
        Ok(Self {
            kind: SegmentKind::Video,
            role,
            tag,
            payload: SegmentPayload::Visual(payload),
        })
    }

    pub fn num_frames(&self) -> usize {
        match &self.payload {
            SegmentPayload::Text(_) => 0,
            SegmentPayload::Visual(p) => p.num_frames(),
        }
    }
}

/// One instruction instance: ordered context segments, question tokens, and
/// answer tokens.
#[derive(Debug, Clone)]
pub struct InterleavedSample {
    pub id: String,
    pub context: Vec<Segment>,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

impl InterleavedSample {
    pub fn new(
        id: impl Into<String>,
        context: Vec<Segment>,
        question: Vec<TokenId>,
        answer: Vec<TokenId>,
    ) -> Self {
        debug_assert!(context.iter().all(|s| s.role == Role::Context));
        Self {
            id: id.into(),
            context,
            question,
            answer,
        }
    }
}
