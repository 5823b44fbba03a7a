//! Task adapters that turn the generative model into predictors:
//! classification by label generation, multi-label name generation,
//! caption-then-retrieve, and multiple-choice scoring.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::encoders::text::{cosine, TextEmbedder};
use crate::encoders::{EncError, FrameEncoder, VisualPayload};
use crate::instructions::{build_character_instruction, CharacterBank, CharacterMode, InstrError};
use crate::lm::{answer_loglik, generate, LmError, TrainState};
use crate::metrics::{geometric_mean, recall_at_k, MetricError};
use crate::seqcore::{pack_prefix, InterleavedSample, SeqError, Vocabulary};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("prediction and truth lists differ in length: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label set is empty")]
    EmptyLabels,
    #[error("labels {0:?} and {1:?} collide after normalization")]
    DuplicateLabel(String, String),
    #[error("multiple-choice questions need exactly 5 options, got {0}")]
    NotFiveOptions(usize),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Instr(#[from] InstrError),
    #[error(transparent)]
    Enc(#[from] EncError),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Ordered candidate labels, distinct after whitespace/case normalization.
#[derive(Debug, Clone)]
pub struct LabelSet {
    labels: Vec<String>,
}

pub(crate) fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self, AdaptError> {
        if labels.is_empty() {
            return Err(AdaptError::EmptyLabels);
        }
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                if normalize(&labels[i]) == normalize(&labels[j]) {
                    return Err(AdaptError::DuplicateLabel(
                        labels[i].clone(),
                        labels[j].clone(),
                    ));
                }
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Highest score wins; exact ties go to the earliest index.
pub(crate) fn argmax_tie_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Classification by label generation: greedy-decode, return the label the
/// text matches exactly (after normalization); otherwise fall back to the
/// label with the highest length-normalized teacher-forced log-likelihood.
pub fn classify(
    state: &TrainState,
    sample: &InterleavedSample,
    labels: &LabelSet,
    vocab: &Vocabulary,
    encoder: &FrameEncoder,
) -> Result<String, AdaptError> {
    let prefix = pack_prefix(sample, vocab, state.cfg.max_len)?;
    let budget = state
        .cfg
        .max_new_tokens
        .min(state.cfg.max_len.saturating_sub(prefix.len()));
    let decoded = vocab.decode(&generate(state, &prefix, encoder, budget)?)?;
    let text = normalize(&decoded);
    if let Some(hit) = labels.labels.iter().find(|l| normalize(l) == text) {
        return Ok(hit.clone());
    }
    let mut scores = Vec::with_capacity(labels.labels.len());
    for label in &labels.labels {
        scores.push(answer_loglik(state, &prefix, &vocab.tokenize(label), encoder)?);
    }
    Ok(labels.labels[argmax_tie_lowest(&scores)].clone())
}

/// Names parsed from a generated identification answer: split on ", ", keep
/// only bank names; "None" (or junk) parses to the empty set.
pub fn parse_identified_names(text: &str, bank: &CharacterBank) -> BTreeSet<String> {
    if text.trim() == crate::instructions::NONE_ANSWER {
        return BTreeSet::new();
    }
    text.split(", ")
        .map(str::trim)
        .filter(|t| bank.contains(t))
        .map(str::to_string)
        .collect()
}

/// Threshold-free character identification: build the identification
/// instruction over the whole bank, generate, and keep the names that parse.
pub fn identify_characters(
    state: &TrainState,
    bank: &CharacterBank,
    clip: &VisualPayload,
    vocab: &Vocabulary,
    encoder: &FrameEncoder,
) -> Result<BTreeSet<String>, AdaptError> {
    let sample = build_character_instruction(
        bank,
        clip,
        CharacterMode::Identify,
        &[],
        None,
        vocab,
        "identify",
    )?;
    let prefix = pack_prefix(&sample, vocab, state.cfg.max_len)?;
    let budget = state
        .cfg
        .max_new_tokens
        .min(state.cfg.max_len.saturating_sub(prefix.len()));
    let decoded = vocab.decode(&generate(state, &prefix, encoder, budget)?)?;
    Ok(parse_identified_names(&decoded, bank))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiLabelScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Micro-averaged precision/recall/F1 over per-sample name sets. Empty
/// denominators score 0.
pub fn score_multilabel(
    pred: &[BTreeSet<String>],
    truth: &[BTreeSet<String>],
) -> Result<MultiLabelScore, AdaptError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(AdaptError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut hit = 0usize;
    let mut n_pred = 0usize;
    let mut n_truth = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        hit += p.intersection(t).count();
        n_pred += p.len();
        n_truth += t.len();
    }
    let precision = if n_pred == 0 { 0.0 } else { hit as f64 / n_pred as f64 };
    let recall = if n_truth == 0 { 0.0 } else { hit as f64 / n_truth as f64 };
    Ok(MultiLabelScore {
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// Per-sample-averaged (macro) variant of `score_multilabel`.
pub fn score_multilabel_macro(
    pred: &[BTreeSet<String>],
    truth: &[BTreeSet<String>],
) -> Result<MultiLabelScore, AdaptError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(AdaptError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let n = pred.len() as f64;
    let mut precision = 0.0;
    let mut recall = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let hit = p.intersection(t).count() as f64;
        precision += if p.is_empty() { 0.0 } else { hit / p.len() as f64 };
        recall += if t.is_empty() { 0.0 } else { hit / t.len() as f64 };
    }
    precision /= n;
    recall /= n;
    Ok(MultiLabelScore {
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalResult {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub geometric_mean: f64,
}

impl RetrievalResult {
    pub fn from_recalls(r1: f64, r5: f64, r10: f64) -> Result<Self, AdaptError> {
        Ok(Self {
            r1,
            r5,
            r10,
            geometric_mean: geometric_mean(&[r1, r5, r10])?,
        })
    }
}

/// Rank ground-truth queries against caption embeddings. Row i's true match
/// is column i; R@k clamps k to the corpus size on tiny sets.
pub fn retrieve_from_captions(
    captions: &[String],
    queries: &[String],
    embedder: &dyn TextEmbedder,
) -> Result<RetrievalResult, AdaptError> {
    if captions.len() != queries.len() || captions.is_empty() {
        return Err(AdaptError::LengthMismatch {
            pred: captions.len(),
            truth: queries.len(),
        });
    }
    let n = captions.len();
    let cap_vecs: Vec<Vec<f64>> = captions
        .iter()
        .map(|c| embedder.embed(c))
        .collect::<Result<_, _>>()?;
    let query_vecs: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| embedder.embed(q))
        .collect::<Result<_, _>>()?;
    let sim: Vec<Vec<f64>> = cap_vecs
        .iter()
        .map(|c| query_vecs.iter().map(|q| cosine(c, q)).collect())
        .collect();
    let r = |k: usize| recall_at_k(&sim, k.min(n));
    let (r1, r5, r10) = (r(1)?, r(5)?, r(10)?);
    // Recalls can be zero; fall back to 0 rather than erroring the geo mean.
    let geo = geometric_mean(&[r1, r5, r10]).unwrap_or(0.0);
    Ok(RetrievalResult {
        r1,
        r5,
        r10,
        geometric_mean: geo,
    })
}

/// Caption every video with the model, then retrieve. Returns the result and
/// the generated captions.
pub fn caption_then_retrieve(
    state: &TrainState,
    videos: &[InterleavedSample],
    queries: &[String],
    vocab: &Vocabulary,
    encoder: &FrameEncoder,
    embedder: &dyn TextEmbedder,
) -> Result<(RetrievalResult, Vec<String>), AdaptError> {
    if videos.len() != queries.len() || videos.is_empty() {
        return Err(AdaptError::LengthMismatch {
            pred: videos.len(),
            truth: queries.len(),
        });
    }
    let mut captions = Vec::with_capacity(videos.len());
    for sample in videos {
        let prefix = pack_prefix(sample, vocab, state.cfg.max_len)?;
        let budget = state
            .cfg
            .max_new_tokens
            .min(state.cfg.max_len.saturating_sub(prefix.len()));
        captions.push(vocab.decode(&generate(state, &prefix, encoder, budget)?)?);
    }
    let result = retrieve_from_captions(&captions, queries, embedder)?;
    Ok((result, captions))
}

/// Multiple-choice answering: score each option as the length-normalized
/// log-likelihood of the option teacher-forced as the answer; ties go to the
/// lowest index.
pub fn answer_mcq(
    state: &TrainState,
    sample: &InterleavedSample,
    options: &[String],
    vocab: &Vocabulary,
    encoder: &FrameEncoder,
) -> Result<usize, AdaptError> {
    if options.len() != 5 {
        return Err(AdaptError::NotFiveOptions(options.len()));
    }
    let prefix = pack_prefix(sample, vocab, state.cfg.max_len)?;
    let mut scores = Vec::with_capacity(5);
    for opt in options {
        scores.push(answer_loglik(state, &prefix, &vocab.tokenize(opt), encoder)?);
    }
    Ok(argmax_tie_lowest(&scores))
}
