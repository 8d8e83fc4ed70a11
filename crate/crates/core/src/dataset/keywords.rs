//! Deterministic keyword extraction: stopword removal and corpus TF-IDF.

use std::collections::{BTreeMap, HashMap, HashSet};

pub const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "also",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "even",
    "ever",
    "every",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "however",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "like",
    "many",
    "may",
    "me",
    "might",
    "more",
    "most",
    "much",
    "must",
    "my",
    "myself",
    "never",
    "new",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "one",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "two",
    "under",
    "until",
    "up",
    "upon",
    "us",
    "very",
    "was",
    "we",
    "well",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "whose",
    "why",
    "will",
    "with",
    "within",
    "without",
    "would",
    "yet",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

/// Lowercased alphabetic terms of length ≥ 2 that are not stopwords.
fn candidate_terms(text: &str) -> Vec<String> {
    let stop: HashSet<&str> = STOPWORDS.iter().copied().collect();
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| w.chars().count() >= 2)
        .map(str::to_lowercase)
        .filter(|w| !stop.contains(w.as_str()))
        .collect()
}

/// Document frequencies over an item-description corpus.
#[derive(Debug, Clone, Default)]
pub struct KeywordExtractor {
    doc_count: usize,
    doc_freq: HashMap<String, usize>,
}

impl KeywordExtractor {
    pub fn fit<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut doc_count = 0;
        for doc in corpus {
            doc_count += 1;
            let unique: HashSet<String> = candidate_terms(doc).into_iter().collect();
            for term in unique {
                *doc_freq.entry(term).or_default() += 1;
            }
        }
        Self {
            doc_count,
            doc_freq,
        }
    }

    /// Smoothed inverse document frequency, `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0);
        ((1 + self.doc_count) as f64 / (1 + df) as f64).ln() + 1.0
    }

    /// Up to `k` terms of `description` ranked by raw term count × idf,
    /// ties broken lexicographically.
    pub fn extract(&self, description: &str, k: usize) -> Vec<String> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for term in candidate_terms(description) {
            *counts.entry(term).or_default() += 1;
        }
        let mut scored: Vec<(f64, String)> = counts
            .into_iter()
            .map(|(term, tf)| (tf as f64 * self.idf(&term), term))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, t)| t).collect()
    }
}

/// Fits on `corpus` and extracts from `description` in one go.
pub fn extract_keywords<'a, I: IntoIterator<Item = &'a str>>(
    description: &str,
    corpus: I,
    k: usize,
) -> Vec<String> {
    KeywordExtractor::fit(corpus).extract(description, k)
}
