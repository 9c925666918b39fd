//! Browser bindings for three interactive views: frequency weights, per-step
//! loss curves, and response diversity. Every binding takes plain strings or
//! numbers and returns a JSON document; the `*_json` functions hold the logic
//! and are usable natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use faceforge::corpus::tokenize;
use faceforge::frequency::{FreqMode, FrequencyTable};
use faceforge::loss::{self, PredictedDistribution, DEFAULT_ENTROPY_FLOOR};
use faceforge::metrics::{distinct_count, distinct_n, rank_table, RankMode};

#[derive(Serialize)]
struct WeightRow {
    token: String,
    count: u64,
    relative_frequency: f64,
    pre_weight: f64,
}

#[derive(Serialize)]
struct WeightReport {
    total: u64,
    rows: Vec<WeightRow>,
    /// `post[o][g]`: weight when the model outputs row `o` and the target is row `g`.
    post: Vec<Vec<f64>>,
}

/// Parse `token count` lines; blank lines and `#` comments are skipped.
fn parse_counts(text: &str) -> Result<(Vec<String>, Vec<u64>), String> {
    let mut tokens = Vec::new();
    let mut counts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(token), Some(count), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("line {}: expected `token count`", i + 1));
        };
        let count = count
            .parse::<u64>()
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        tokens.push(token.to_string());
        counts.push(count);
    }
    if tokens.len() < 2 {
        return Err("need at least two tokens".into());
    }
    Ok((tokens, counts))
}

pub fn weight_table_json(counts_text: &str) -> Result<String, String> {
    let (tokens, counts) = parse_counts(counts_text)?;
    // slot 0 is the padding id, which never carries a count
    let table = FrequencyTable::from_counts(std::iter::once(0).chain(counts.iter().copied()).collect(), FreqMode::Output)
        .map_err(|e| e.to_string())?;
    let pre = table.pre_weight().map_err(|e| e.to_string())?;
    let total = table.total();
    let rows = tokens
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (token, &count))| WeightRow {
            token: token.clone(),
            count,
            relative_frequency: count as f64 / total as f64,
            pre_weight: pre.get(i + 1),
        })
        .collect();
    let n = tokens.len();
    let mut post = vec![vec![0.0; n]; n];
    for (o, row) in post.iter_mut().enumerate() {
        for (g, w) in row.iter_mut().enumerate() {
            *w = table.post_weight(o + 1, g + 1).map_err(|e| e.to_string())?;
        }
    }
    serde_json::to_string(&WeightReport { total, rows, post }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    name: &'static str,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct CurveReport {
    target_probability: Vec<f64>,
    entropy: Vec<f64>,
    curves: Vec<Curve>,
}

/// Every loss as a function of the target probability `p`, with the remaining
/// mass spread evenly over the other `vocab - 1` tokens.
pub fn loss_curves_json(vocab: usize, weight: f64, beta: f64, points: usize) -> Result<String, String> {
    if vocab < 2 {
        return Err("vocabulary must have at least two tokens".into());
    }
    if points < 2 {
        return Err("need at least two points".into());
    }
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err("weight must be finite and non-negative".into());
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err("beta must be finite and positive".into());
    }
    let names = ["ce", "face", "cp", "cp-free", "face-cp", "face-cp-free"];
    let mut curves: Vec<Curve> = names.iter().map(|&name| Curve { name, values: Vec::new() }).collect();
    let mut target_probability = Vec::with_capacity(points);
    let mut entropy = Vec::with_capacity(points);
    let floor = DEFAULT_ENTROPY_FLOOR;
    for k in 0..points {
        let p = 0.01 + 0.98 * k as f64 / (points - 1) as f64;
        let rest = (1.0 - p) / (vocab - 1) as f64;
        let mut probs = vec![rest; vocab];
        probs[1] = p;
        let dist = PredictedDistribution::from_probs(probs).map_err(|e| e.to_string())?;
        let err = |e: faceforge::Error| e.to_string();
        let h = dist.entropy();
        let face = loss::face(&dist, 1, weight).map_err(err)?;
        let values = [
            loss::ce(&dist, 1).map_err(err)?,
            face,
            loss::cp(&dist, 1, beta).map_err(err)?,
            loss::cp_free(&dist, 1, floor).map_err(err)?,
            face - beta * h,
            loss::cp_weight(&dist, floor) * face,
        ];
        for (curve, v) in curves.iter_mut().zip(values) {
            curve.values.push(v);
        }
        target_probability.push(p);
        entropy.push(h);
    }
    serde_json::to_string(&CurveReport {
        target_probability,
        entropy,
        curves,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Rank {
    rank: usize,
    token: String,
    count: usize,
    percentage: f64,
}

#[derive(Serialize)]
struct RankView {
    title: String,
    total: usize,
    rows: Vec<Rank>,
}

#[derive(Serialize)]
struct DiversityReport {
    responses: usize,
    total_tokens: usize,
    distinct_unigrams: usize,
    distinct_bigrams: usize,
    d1: f64,
    d2: f64,
    tables: Vec<RankView>,
}

fn rank_view(responses: &[Vec<String>], mode: &RankMode<String>, top: usize) -> Result<RankView, String> {
    let table = rank_table(responses, mode).map_err(|e| e.to_string())?.top(top);
    Ok(RankView {
        title: table.title,
        total: table.total,
        rows: table
            .rows
            .into_iter()
            .map(|r| Rank {
                rank: r.rank,
                token: r.token,
                count: r.count,
                percentage: r.percentage,
            })
            .collect(),
    })
}

/// d-1, d-2 and rank tables for one response per line. `after` is a
/// whitespace-separated list of tokens whose followers are tabulated.
pub fn diversity_json(responses_text: &str, after: &str, top: usize) -> Result<String, String> {
    let responses: Vec<Vec<String>> = responses_text
        .lines()
        .map(tokenize)
        .filter(|r| !r.is_empty())
        .collect();
    if responses.is_empty() {
        return Err("no responses".into());
    }
    let mut tables = vec![rank_view(&responses, &RankMode::Leading, top)?];
    for t in after.split_whitespace() {
        tables.push(rank_view(&responses, &RankMode::After(t.to_string()), top)?);
    }
    let report = DiversityReport {
        responses: responses.len(),
        total_tokens: responses.iter().map(Vec::len).sum(),
        distinct_unigrams: distinct_count(&responses, 1),
        distinct_bigrams: distinct_count(&responses, 2),
        d1: distinct_n(&responses, 1).map_err(|e| e.to_string())?,
        d2: distinct_n(&responses, 2).map_err(|e| e.to_string())?,
        tables,
    };
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn weight_table(counts_text: &str) -> Result<String, JsError> {
    weight_table_json(counts_text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn loss_curves(vocab: usize, weight: f64, beta: f64, points: usize) -> Result<String, JsError> {
    loss_curves_json(vocab, weight, beta, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn diversity(responses_text: &str, after: &str, top: usize) -> Result<String, JsError> {
    diversity_json(responses_text, after, top).map_err(|e| JsError::new(&e))
}
