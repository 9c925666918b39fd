//! Diversity (distinct-n), corpus BLEU and frequency-rank tables.
//!
//! Functions are generic over the token type so they work on ids as well as
//! on tokens read back from a responses file.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Display};
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

fn total_tokens<T>(responses: &[Vec<T>]) -> usize {
    responses.iter().map(Vec::len).sum()
}

/// Number of distinct n-grams across all responses. N-grams never span two
/// responses.
pub fn distinct_count<T: Hash + Eq>(responses: &[Vec<T>], n: usize) -> usize {
    let mut seen: HashSet<&[T]> = HashSet::new();
    for r in responses {
        if r.len() >= n && n > 0 {
            seen.extend(r.windows(n));
        }
    }
    seen.len()
}

/// Distinct n-grams divided by the total number of generated tokens.
pub fn distinct_n<T: Hash + Eq>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Metric("n must be at least 1".into()));
    }
    let total = total_tokens(responses);
    if total == 0 {
        return Err(Error::Metric("no generated tokens".into()));
    }
    Ok(distinct_count(responses, n) as f64 / total as f64)
}

fn ngram_counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

pub const BLEU_ORDER: usize = 4;

/// Clipped n-gram matches and hypothesis n-gram totals, summed over the corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BleuCounts {
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuCounts {
    pub fn collect<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<Self> {
        if hypotheses.len() != references.len() {
            return Err(Error::usage(format!(
                "{} hypotheses for {} references",
                hypotheses.len(),
                references.len()
            )));
        }
        if hypotheses.is_empty() {
            return Err(Error::usage("BLEU of an empty corpus"));
        }
        let mut c = BleuCounts::default();
        for (h, r) in hypotheses.iter().zip(references) {
            c.hyp_len += h.len();
            c.ref_len += r.len();
            for n in 1..=BLEU_ORDER {
                let refs = ngram_counts(r, n);
                for (g, k) in ngram_counts(h, n) {
                    c.matches[n - 1] += k.min(refs.get(g).copied().unwrap_or(0));
                    c.totals[n - 1] += k;
                }
            }
        }
        Ok(c)
    }

    /// Brevity penalty: 1 when the hypotheses are at least as long as the
    /// references, else `exp(1 - r / c)`.
    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Unigram precision is unsmoothed; orders 2..=4 use `(m + 1) / (c + 1)`.
    pub fn precisions(&self) -> [f64; BLEU_ORDER] {
        let mut p = [0.0; BLEU_ORDER];
        p[0] = if self.totals[0] == 0 {
            0.0
        } else {
            self.matches[0] as f64 / self.totals[0] as f64
        };
        for n in 1..BLEU_ORDER {
            p[n] = (self.matches[n] as f64 + 1.0) / (self.totals[n] as f64 + 1.0);
        }
        p
    }

    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p[0] == 0.0 {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / BLEU_ORDER as f64;
        self.brevity_penalty() * log_mean.exp()
    }
}

/// Corpus-level BLEU-4 with uniform weights, add-one smoothing for n >= 2
/// and the standard brevity penalty.
pub fn bleu<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    Ok(BleuCounts::collect(hypotheses, references)?.score())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RankMode<T> {
    /// First token of each response.
    Leading,
    /// Tokens that immediately follow the given token.
    After(T),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRow<T> {
    pub token: T,
    pub rank: usize,
    pub count: usize,
    pub percentage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankTable<T> {
    pub title: String,
    pub total: usize,
    pub rows: Vec<RankRow<T>>,
}

/// Rows ordered by descending count, ties broken by ascending token.
pub fn rank_table<T>(responses: &[Vec<T>], mode: &RankMode<T>) -> Result<RankTable<T>>
where
    T: Hash + Ord + Clone + Display,
{
    if responses.is_empty() {
        return Err(Error::Metric("rank table of no responses".into()));
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for r in responses {
        match mode {
            RankMode::Leading => {
                if let Some(first) = r.first() {
                    *counts.entry(first).or_insert(0) += 1;
                }
            }
            RankMode::After(t) => {
                for w in r.windows(2) {
                    if &w[0] == t {
                        *counts.entry(&w[1]).or_insert(0) += 1;
                    }
                }
            }
        }
    }
    let total: usize = counts.values().sum();
    let mut sorted: Vec<(&T, usize)> = counts.into_iter().collect();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let rows = sorted
        .into_iter()
        .enumerate()
        .map(|(i, (token, count))| RankRow {
            token: token.clone(),
            rank: i + 1,
            count,
            percentage: 100.0 * count as f64 / total as f64,
        })
        .collect();
    let title = match mode {
        RankMode::Leading => "leading".to_string(),
        RankMode::After(t) => format!("after {t}"),
    };
    Ok(RankTable { title, total, rows })
}

impl<T: Display> RankTable<T> {
    /// Keep the first `k` rows.
    pub fn top(mut self, k: usize) -> Self {
        self.rows.truncate(k);
        self
    }
}

impl<T: Display> Display for RankTable<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<String> = self.rows.iter().map(|r| r.token.to_string()).collect();
        let width = tokens.iter().map(String::len).chain(["token".len()]).max().unwrap_or(5);
        writeln!(f, "# {} (total {})", self.title, self.total)?;
        writeln!(f, "{:>4}  {:<width$}  {:>8}  {:>7}", "rank", "token", "count", "pct")?;
        for (row, token) in self.rows.iter().zip(&tokens) {
            writeln!(
                f,
                "{:>4}  {:<width$}  {:>8}  {:>7.2}",
                row.rank, token, row.count, row.percentage
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub responses: usize,
    pub total_tokens: usize,
    pub distinct_unigrams: usize,
    pub distinct_bigrams: usize,
    pub d1: f64,
    pub d2: f64,
    pub bleu: f64,
}

impl MetricsReport {
    pub fn compute<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<Self> {
        Ok(MetricsReport {
            responses: hypotheses.len(),
            total_tokens: total_tokens(hypotheses),
            distinct_unigrams: distinct_count(hypotheses, 1),
            distinct_bigrams: distinct_count(hypotheses, 2),
            d1: distinct_n(hypotheses, 1)?,
            d2: distinct_n(hypotheses, 2)?,
            bleu: bleu(hypotheses, references)?,
        })
    }

    /// Flat `key = value` block.
    pub fn to_kv(&self) -> String {
        format!(
            "responses = {}\ntotal_tokens = {}\ndistinct_unigrams = {}\ndistinct_bigrams = {}\nd1 = {}\nd2 = {}\nbleu = {}\n",
            self.responses,
            self.total_tokens,
            self.distinct_unigrams,
            self.distinct_bigrams,
            self.d1,
            self.d2,
            self.bleu
        )
    }

    /// Single-line JSON record.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
