//! Sentence embedders used for plot retrieval and caption-based retrieval:
//! a hermetic bag-of-words hash embedder, and a file-backed table of
//! externally computed sentence vectors.

use std::collections::HashMap;
use std::path::Path;

use super::{EmbeddingTable, EncError};
use crate::rng::{hash_bytes, stream, Rng};

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EncError>;
}

/// Cosine similarity; zero if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Deterministic toy embedder: mean of per-word hash vectors, normalized.
/// Identical texts map to identical vectors; unrelated texts are nearly
/// orthogonal in expectation.
#[derive(Debug, Clone)]
pub struct HashTextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn word_vec(&self, word: &str) -> Vec<f64> {
        let mut rng = Rng::new(stream(self.seed, hash_bytes(word.as_bytes())));
        (0..self.dim).map(|_| rng.gauss()).collect()
    }
}

impl TextEmbedder for HashTextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EncError> {
        let mut acc = vec![0.0; self.dim];
        let mut count = 0usize;
        for word in text.split_whitespace() {
            for (a, w) in acc.iter_mut().zip(self.word_vec(word)) {
                *a += w;
            }
            count += 1;
        }
        if count == 0 {
            return Ok(acc);
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        acc.iter_mut().for_each(|x| *x /= norm);
        Ok(acc)
    }
}

/// Externally computed sentence vectors: a binary embedding table plus a
/// sidecar text file with one sentence per line, row i matching line i.
#[derive(Debug, Clone)]
pub struct FileTextEmbedder {
    table: EmbeddingTable,
    index: HashMap<String, usize>,
}

impl FileTextEmbedder {
    pub fn load(table_path: &Path, sentences_path: &Path) -> Result<Self, EncError> {
        let table = EmbeddingTable::load(table_path)?;
        let text = std::fs::read_to_string(sentences_path)
            .map_err(|e| EncError::Io(sentences_path.display().to_string(), e.to_string()))?;
        let mut index = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            index.entry(line.to_string()).or_insert(i);
        }
        if index.len() > table.len() {
            return Err(EncError::BadFile(format!(
                "{} sentences but only {} embedding rows",
                index.len(),
                table.len()
            )));
        }
        Ok(Self { table, index })
    }
}

impl TextEmbedder for FileTextEmbedder {
    fn dim(&self) -> usize {
        self.table.d_v
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EncError> {
        let row = self
            .index
            .get(text)
            .ok_or_else(|| EncError::MissingSentence(text.to_string()))?;
        Ok(self.table.row(*row as u64).cloned().unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_embed_identically() {
        let e = HashTextEmbedder::new(16, 3);
        assert_eq!(e.embed("the old man").unwrap(), e.embed("the old man").unwrap());
    }

    #[test]
    fn verbatim_match_has_cosine_one() {
        let e = HashTextEmbedder::new(32, 3);
        let a = e.embed("a flashlight in the trunk").unwrap();
        let b = e.embed("a flashlight in the trunk").unwrap();
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
        let c = e.embed("a completely different sentence here").unwrap();
        assert!(cosine(&a, &c) < 0.9);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let e = HashTextEmbedder::new(8, 3);
        let z = e.embed("").unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        assert_eq!(cosine(&z, &z), 0.0);
    }
}
