//! Caption and retrieval evaluation metrics: BLEU-N, METEOR, ROUGE-L, CIDEr,
//! SPICE-F1 over externally supplied triples, and R@k.
//!
//! Scores are sentence-level. Natural log throughout.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Lowercase, split on Unicode whitespace, trim ASCII punctuation from both
/// ends of each token, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.to_lowercase()
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_string()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub raw: String,
    pub tokens: Vec<String>,
}

impl Caption {
    pub fn new(raw: &str) -> Self {
        Self {
            raw: raw.to_string(),
            tokens: tokenize(raw),
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Self {
            raw: tokens.join(" "),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Nonempty set of nonempty reference captions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefSet {
    references: Vec<Caption>,
}

impl RefSet {
    pub fn new(references: Vec<Caption>) -> Result<Self> {
        if references.is_empty() {
            return Err(invalid!("reference set is empty"));
        }
        if references.iter().any(Caption::is_empty) {
            return Err(invalid!("reference caption has no tokens"));
        }
        Ok(Self { references })
    }

    pub fn references(&self) -> &[Caption] {
        &self.references
    }
}

pub type Triple = (String, String, String);

/// Set of lowercase (subject, relation, object) triples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleSet {
    pub triples: BTreeSet<Triple>,
}

impl TripleSet {
    pub fn new<I, S>(triples: I) -> Self
    where
        I: IntoIterator<Item = (S, S, S)>,
        S: AsRef<str>,
    {
        Self {
            triples: triples
                .into_iter()
                .map(|(s, r, o)| {
                    (
                        s.as_ref().to_lowercase(),
                        r.as_ref().to_lowercase(),
                        o.as_ref().to_lowercase(),
                    )
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Counts of every contiguous n-gram of length `n`.
pub fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with clipped n-gram precisions and the closest-reference
/// brevity penalty. `weights` defaults to uniform `1/N`.
pub fn bleu(
    candidate: &Caption,
    refs: &RefSet,
    n_max: usize,
    weights: Option<&[f64]>,
) -> Result<f64> {
    if candidate.is_empty() {
        return Err(invalid!("bleu candidate is empty"));
    }
    if !(1..=4).contains(&n_max) {
        return Err(invalid!("bleu order must be in 1..=4, got {n_max}"));
    }
    let uniform = vec![1.0 / n_max as f64; n_max];
    let w = weights.unwrap_or(&uniform);
    if w.len() != n_max {
        return Err(invalid!("bleu needs {n_max} weights, got {}", w.len()));
    }

    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let cand = ngram_counts(&candidate.tokens, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let ref_counts: Vec<_> = refs
            .references
            .iter()
            .map(|r| ngram_counts(&r.tokens, n))
            .collect();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += w[n - 1] * (clipped as f64 / total as f64).ln();
    }

    let c = candidate.len();
    let r = closest_ref_len(c, refs);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

/// Reference length closest to `c`; ties go to the shorter reference.
pub fn closest_ref_len(c: usize, refs: &RefSet) -> usize {
    refs.references
        .iter()
        .map(Caption::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("refset is nonempty")
}

/// Decides whether two tokens match for METEOR alignment.
pub trait TokenMatcher {
    fn matches(&self, candidate: &str, reference: &str) -> bool;
}

/// Exact string equality.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatcher;

impl TokenMatcher for ExactMatcher {
    fn matches(&self, candidate: &str, reference: &str) -> bool {
        candidate == reference
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeteorStats {
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
}

/// One-to-one greedy alignment: each candidate token, left to right, takes
/// the first unused matching reference token.
pub fn meteor_alignment<M: TokenMatcher>(
    candidate: &Caption,
    reference: &Caption,
    matcher: &M,
) -> MeteorStats {
    let mut used = vec![false; reference.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in candidate.tokens.iter().enumerate() {
        if let Some(j) =
            (0..reference.len()).find(|&j| !used[j] && matcher.matches(tok, &reference.tokens[j]))
        {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    let chunks = if pairs.is_empty() {
        0
    } else {
        1 + pairs
            .windows(2)
            .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
            .count()
    };
    let m = pairs.len();
    MeteorStats {
        matches: m,
        chunks,
        precision: if candidate.is_empty() {
            0.0
        } else {
            m as f64 / candidate.len() as f64
        },
        recall: if reference.is_empty() {
            0.0
        } else {
            m as f64 / reference.len() as f64
        },
    }
}

/// `F_mean = 10PR / (R + 9P)`, score `F_mean * (1 - pen)`.
pub fn meteor_from_stats(precision: f64, recall: f64, penalty: f64) -> f64 {
    if precision <= 0.0 || recall <= 0.0 {
        return 0.0;
    }
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    f_mean * (1.0 - penalty)
}

/// Fragmentation penalty `0.5 * (chunks / matches)^3`.
pub fn fragmentation_penalty(chunks: usize, matches: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    0.5 * (chunks as f64 / matches as f64).powi(3)
}

pub fn meteor_with<M: TokenMatcher>(candidate: &Caption, reference: &Caption, matcher: &M) -> f64 {
    let s = meteor_alignment(candidate, reference, matcher);
    if s.matches == 0 {
        return 0.0;
    }
    meteor_from_stats(
        s.precision,
        s.recall,
        fragmentation_penalty(s.chunks, s.matches),
    )
}

pub fn meteor(candidate: &Caption, reference: &Caption) -> f64 {
    meteor_with(candidate, reference, &ExactMatcher)
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with candidate as X and reference as Y.
pub fn rouge_l(candidate: &Caption, reference: &Caption, beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&candidate.tokens, &reference.tokens);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Document frequencies for CIDEr, built once per corpus.
#[derive(Debug, Clone)]
pub struct CiderCorpus {
    images: usize,
    n_max: usize,
    doc_freq: HashMap<Vec<String>, usize>,
}

impl CiderCorpus {
    /// `corpus` holds one reference set per image.
    pub fn new(corpus: &[RefSet], n_max: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(invalid!("cider corpus is empty"));
        }
        if n_max == 0 {
            return Err(invalid!("cider order must be >= 1"));
        }
        let mut doc_freq: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in corpus {
            let mut seen: BTreeSet<&[String]> = BTreeSet::new();
            for r in &refs.references {
                for n in 1..=n_max {
                    seen.extend(ngram_counts(&r.tokens, n).into_keys());
                }
            }
            for g in seen {
                *doc_freq.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        Ok(Self {
            images: corpus.len(),
            n_max,
            doc_freq,
        })
    }

    /// `max(0, ln(|corpus| / (1 + df)))`.
    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.doc_freq.get(gram).copied().unwrap_or(0);
        (self.images as f64 / (1.0 + df as f64)).ln().max(0.0)
    }

    fn vector<'a>(&self, tokens: &'a [String], n: usize) -> HashMap<&'a [String], f64> {
        let counts = ngram_counts(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| (g, c as f64 / total as f64 * self.idf(g)))
            .collect()
    }

    /// Mean over n of the mean reference cosine; 0/0 cosines count as 0.
    pub fn score(&self, candidate: &Caption, refs: &RefSet) -> Result<f64> {
        if candidate.is_empty() {
            return Err(invalid!("cider candidate is empty"));
        }
        let mut sum = 0.0;
        for n in 1..=self.n_max {
            sum += self.score_n(candidate, refs, n);
        }
        Ok(sum / self.n_max as f64)
    }

    pub fn score_n(&self, candidate: &Caption, refs: &RefSet, n: usize) -> f64 {
        let gc = self.vector(&candidate.tokens, n);
        let nc = gc.values().map(|v| v * v).sum::<f64>().sqrt();
        let mut acc = 0.0;
        for r in &refs.references {
            let gr = self.vector(&r.tokens, n);
            let nr = gr.values().map(|v| v * v).sum::<f64>().sqrt();
            if nc > 0.0 && nr > 0.0 {
                let dot: f64 = gc
                    .iter()
                    .filter_map(|(g, a)| gr.get(g).map(|b| a * b))
                    .sum();
                acc += dot / (nc * nr);
            }
        }
        acc / refs.references.len() as f64
    }
}

/// One-shot CIDEr; builds the corpus table each call.
pub fn cider(candidate: &Caption, refs: &RefSet, corpus: &[RefSet], n_max: usize) -> Result<f64> {
    CiderCorpus::new(corpus, n_max)?.score(candidate, refs)
}

/// F1 over triple-set overlap; 0 when either set is empty.
pub fn spice_f1(cand: &TripleSet, reference: &TripleSet) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let hits = cand.triples.intersection(&reference.triples).count();
    if hits == 0 {
        return 0.0;
    }
    let p = hits as f64 / cand.len() as f64;
    let r = hits as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Fraction of queries whose correct item is ranked within the top `k`.
/// Ranks are 1-based.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(invalid!("k must be >= 1"));
    }
    if ranks.is_empty() {
        return Err(invalid!("no rankings supplied"));
    }
    if ranks.contains(&0) {
        return Err(invalid!("ranks are 1-based"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}
