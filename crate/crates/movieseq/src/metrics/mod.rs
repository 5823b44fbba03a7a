//! Text-generation and retrieval metrics: Rep@4, corpus BLEU4, ROUGE-L,
//! CIDEr, Recall@k, and the geometric mean.
//!
//! Metric tokenization is pinned so scores reproduce bit-for-bit: lowercase,
//! every non-alphanumeric character becomes a space, split on whitespace.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("corpus needs at least 2 ids for idf; got {0}")]
    DegenerateCorpus(usize),
    #[error("k = {k} is out of range for an {n}x{n} similarity matrix")]
    BadK { k: usize, n: usize },
    #[error("similarity matrix is not square")]
    NotSquare,
    #[error("geometric mean needs positive values")]
    NonPositive,
    #[error("candidate {0:?} has no references")]
    NoReference(String),
}

/// Lowercase, strip punctuation to spaces, split on whitespace.
pub fn metric_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Candidate/reference pairs keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    items: BTreeMap<String, (String, Vec<String>)>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        id: &str,
        candidate: &str,
        references: Vec<String>,
    ) -> Result<(), MetricError> {
        if references.is_empty() {
            return Err(MetricError::NoReference(id.to_string()));
        }
        self.items
            .insert(id.to_string(), (candidate.to_string(), references));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &[String])> {
        self.items
            .iter()
            .map(|(id, (c, r))| (id.as_str(), c.as_str(), r.as_slice()))
    }
}

/// Generated sentences grouped by source (e.g. one movie per group), in
/// narration order.
#[derive(Debug, Clone, Default)]
pub struct ParagraphGroup {
    groups: BTreeMap<String, Vec<String>>,
}

impl ParagraphGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, group: &str, sentence: &str) {
        self.groups
            .entry(group.to_string())
            .or_default()
            .push(sentence.to_string());
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Fraction of 4-gram occurrences that repeat an earlier 4-gram within the
/// same group, averaged over groups. Groups shorter than one 4-gram score 0.
pub fn rep4(groups: &ParagraphGroup) -> f64 {
    if groups.groups.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for sentences in groups.groups.values() {
        let stream: Vec<String> = sentences.iter().flat_map(|s| metric_tokenize(s)).collect();
        let grams = ngrams(&stream, 4);
        if grams.is_empty() {
            continue; // contributes 0
        }
        let mut seen = HashMap::new();
        let mut repeats = 0usize;
        for g in &grams {
            let c = seen.entry(g.clone()).or_insert(0usize);
            if *c > 0 {
                repeats += 1;
            }
            *c += 1;
        }
        total += repeats as f64 / grams.len() as f64;
    }
    total / groups.groups.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BleuSmoothing {
    /// Any zero n-gram precision zeroes the score.
    #[default]
    Off,
    /// Add one to each precision's numerator and denominator (for tiny corpora).
    AddOne,
}

/// Corpus-level BLEU with uniform weights over 1..4-grams, clipped counts,
/// and the brevity penalty. Reference length is the closest to the candidate
/// (ties to the shorter).
pub fn bleu4(corpus: &Corpus) -> f64 {
    bleu4_with(corpus, BleuSmoothing::Off)
}

pub fn bleu4_with(corpus: &Corpus, smoothing: BleuSmoothing) -> f64 {
    let mut clipped = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (_, candidate, references) in corpus.iter() {
        let cand = metric_tokenize(candidate);
        let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokenize(r)).collect();
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), &refs);
        for n in 1..=4 {
            let cand_counts = ngram_counts(&cand, n);
            let mut max_ref: HashMap<&Vec<String>, usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let g_ref = cand_counts.get_key_value(&g).map(|(k, _)| k);
                    if let Some(k) = g_ref {
                        let e = max_ref.entry(k).or_insert(0);
                        *e = (*e).max(c);
                    }
                }
            }
            for (g, c) in &cand_counts {
                totals[n - 1] += c;
                clipped[n - 1] += (*c).min(*max_ref.get(g).unwrap_or(&0));
            }
        }
    }
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (num, den) = match smoothing {
            BleuSmoothing::Off => (clipped[n] as f64, totals[n] as f64),
            BleuSmoothing::AddOne => (clipped[n] as f64 + 1.0, totals[n] as f64 + 1.0),
        };
        if num == 0.0 || den == 0.0 {
            return 0.0;
        }
        log_sum += 0.25 * (num / den).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    let mut best = refs[0].len();
    for r in refs {
        let d = r.len().abs_diff(cand_len);
        let bd = best.abs_diff(cand_len);
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    best
}

const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with beta = 1.2 (recall-weighted).
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokenize(candidate);
    let r = metric_tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rr = lcs / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * rr * p / (rr + b2 * p)
}

/// Mean over ids of the best reference's ROUGE-L.
pub fn rouge_l_corpus(corpus: &Corpus) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let total: f64 = corpus
        .iter()
        .map(|(_, c, refs)| {
            refs.iter()
                .map(|r| rouge_l(c, r))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / corpus.len() as f64
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for ai in a {
        let mut prev = 0usize;
        for (j, bj) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if ai == bj {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// Plain CIDEr: TF-IDF vectors over 1..4-grams with corpus-level document
/// frequency, per-n cosine against each reference, averaged over n and
/// references, scaled by 10, mean over ids. Needs at least two ids so idf
/// is non-degenerate.
pub fn cider(corpus: &Corpus) -> Result<f64, MetricError> {
    let n_docs = corpus.len();
    if n_docs < 2 {
        return Err(MetricError::DegenerateCorpus(n_docs));
    }
    // Document frequency: how many ids mention the gram in any reference.
    let mut df: HashMap<(usize, Vec<String>), usize> = HashMap::new();
    for (_, _, refs) in corpus.iter() {
        let mut seen: HashMap<(usize, Vec<String>), ()> = HashMap::new();
        for r in refs {
            let toks = metric_tokenize(r);
            for n in 1..=4 {
                for g in ngrams(&toks, n) {
                    seen.insert((n, g), ());
                }
            }
        }
        for key in seen.into_keys() {
            *df.entry(key).or_insert(0) += 1;
        }
    }
    let log_n = (n_docs as f64).ln();
    let idf = |n: usize, g: &Vec<String>| -> f64 {
        let d = df.get(&(n, g.clone())).copied().unwrap_or(0).max(1);
        log_n - (d as f64).ln()
    };
    let tfidf = |toks: &[String], n: usize| -> HashMap<Vec<String>, f64> {
        ngram_counts(toks, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * idf(n, &g);
                (g, w)
            })
            .collect()
    };
    let cos = |a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>| -> f64 {
        let dot: f64 = a
            .iter()
            .filter_map(|(g, w)| b.get(g).map(|v| w * v))
            .sum();
        let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
        let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut total = 0.0;
    for (_, candidate, refs) in corpus.iter() {
        let cand = metric_tokenize(candidate);
        let mut score = 0.0;
        for n in 1..=4 {
            let vc = tfidf(&cand, n);
            let mut per_ref = 0.0;
            for r in refs {
                let vr = tfidf(&metric_tokenize(r), n);
                per_ref += cos(&vc, &vr);
            }
            score += per_ref / refs.len() as f64;
        }
        total += 10.0 * score / 4.0;
    }
    Ok(total / n_docs as f64)
}

/// Fraction of rows whose diagonal entry ranks within the top-k of its row.
/// Ties break toward the lower column index.
pub fn recall_at_k(sim: &[Vec<f64>], k: usize) -> Result<f64, MetricError> {
    let n = sim.len();
    if sim.iter().any(|row| row.len() != n) {
        return Err(MetricError::NotSquare);
    }
    if k == 0 || k > n {
        return Err(MetricError::BadK { k, n });
    }
    let mut hits = 0usize;
    for (i, row) in sim.iter().enumerate() {
        let mut better = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[i] || (v == row[i] && j < i) {
                better += 1;
            }
        }
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// (v1 * v2 * ... * vn)^(1/n) for positive values.
pub fn geometric_mean(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return Err(MetricError::NonPositive);
    }
    let mean_ln = values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64;
    Ok(mean_ln.exp())
}
