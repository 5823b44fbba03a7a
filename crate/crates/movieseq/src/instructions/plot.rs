//! Movie plots and the two paragraph-sampling strategies: embedding
//! retrieval for pointed questions, and timestamp-ratio windows for general
//! queries. Plot files are UTF-8, one sentence per line, with blank lines
//! separating paragraphs.

use std::path::Path;

use super::InstrError;
use crate::encoders::text::{cosine, TextEmbedder};

#[derive(Debug, Clone)]
pub struct Plot {
    sentences: Vec<String>,
    /// Half-open (start, end) sentence ranges; a covering, non-overlapping
    /// partition of the sentence list.
    paragraph_bounds: Vec<(usize, usize)>,
}

impl Plot {
    pub fn new(sentences: Vec<String>, paragraph_bounds: Vec<(usize, usize)>) -> Result<Self, InstrError> {
        if sentences.is_empty() || paragraph_bounds.is_empty() {
            return Err(InstrError::EmptyPlot);
        }
        let mut expect = 0usize;
        for &(s, e) in &paragraph_bounds {
            if s != expect || e <= s {
                return Err(InstrError::BadParagraphBounds(format!(
                    "bounds ({s}, {e}) break the partition at sentence {expect}"
                )));
            }
            expect = e;
        }
        if expect != sentences.len() {
            return Err(InstrError::BadParagraphBounds(format!(
                "bounds cover {expect} sentences, plot has {}",
                sentences.len()
            )));
        }
        Ok(Self {
            sentences,
            paragraph_bounds,
        })
    }

    pub fn parse(text: &str) -> Result<Self, InstrError> {
        let mut sentences = Vec::new();
        let mut bounds = Vec::new();
        let mut start = 0usize;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                if sentences.len() > start {
                    bounds.push((start, sentences.len()));
                    start = sentences.len();
                }
            } else {
                sentences.push(line.to_string());
            }
        }
        if sentences.len() > start {
            bounds.push((start, sentences.len()));
        }
        Self::new(sentences, bounds)
    }

    pub fn load(path: &Path) -> Result<Self, InstrError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InstrError::Io(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_paragraphs(&self) -> usize {
        self.paragraph_bounds.len()
    }

    pub fn sentence(&self, i: usize) -> &str {
        &self.sentences[i]
    }

    pub fn paragraph_sentences(&self, p: usize) -> &[String] {
        let (s, e) = self.paragraph_bounds[p];
        &self.sentences[s..e]
    }

    pub fn paragraph_text(&self, p: usize) -> String {
        self.paragraph_sentences(p).join(" ")
    }
}

/// How a paragraph is scored against the query during retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RagAggregation {
    /// Best single sentence wins (robust to paragraph length).
    #[default]
    MaxSentence,
    /// Cosine against the mean of the paragraph's sentence embeddings.
    MeanSentence,
}

/// Top-1 paragraph by query/sentence cosine similarity; ties break to the
/// earliest paragraph.
pub fn sample_plot_rag(
    plot: &Plot,
    query: &str,
    embedder: &dyn TextEmbedder,
) -> Result<String, InstrError> {
    sample_plot_rag_with(plot, query, embedder, RagAggregation::MaxSentence)
}

pub fn sample_plot_rag_with(
    plot: &Plot,
    query: &str,
    embedder: &dyn TextEmbedder,
    agg: RagAggregation,
) -> Result<String, InstrError> {
    let q = embedder.embed(query)?;
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for p in 0..plot.num_paragraphs() {
        let score = match agg {
            RagAggregation::MaxSentence => {
                let mut s = f64::NEG_INFINITY;
                for sent in plot.paragraph_sentences(p) {
                    s = s.max(cosine(&q, &embedder.embed(sent)?));
                }
                s
            }
            RagAggregation::MeanSentence => {
                let sents = plot.paragraph_sentences(p);
                let mut mean = vec![0.0; q.len()];
                for sent in sents {
                    for (m, v) in mean.iter_mut().zip(embedder.embed(sent)?) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= sents.len() as f64);
                cosine(&q, &mean)
            }
        };
        if score > best_score {
            best_score = score;
            best = p;
        }
    }
    Ok(plot.paragraph_text(best))
}

/// Window of up to `w` sentences centered on the sentence the clip's
/// timestamp ratio points at: r = floor((t/T) * S) clipped to [0, S-1], the
/// window [r - w/2, r - w/2 + w) clipped to the sentence range.
pub fn sample_plot_temporal(plot: &Plot, t: f64, total: f64, w: usize) -> String {
    assert!(total > 0.0 && w >= 1);
    let s = plot.num_sentences();
    let ratio = (t / total).clamp(0.0, 1.0);
    let r = ((ratio * s as f64).floor() as usize).min(s - 1);
    let a = r as isize - (w / 2) as isize;
    let start = a.max(0) as usize;
    let end = ((a + w as isize).max(1) as usize).min(s);
    plot.sentences[start..end].join(" ")
}
