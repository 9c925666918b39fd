use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;

use super::config::TrainConfig;
use super::train::{decode_responses, Dataset};
use crate::corpus::{
    encode_pairs, read_pairs, synth_corpus, tokenize, write_pairs, SynthSpec, TextPair, Vocabulary, NUM_RESERVED,
};
use crate::error::{Error, Result};
use crate::frequency::FrequencyTable;
use crate::metrics::{rank_table, MetricsReport, RankMode};
use crate::seq2seq::ModelParams;

/// Read, filter and encode the train and validation files named in `config`.
/// The vocabulary is loaded from `config.vocab` when set, otherwise built
/// from the training pairs.
pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    let train_path = config
        .train
        .as_ref()
        .ok_or_else(|| Error::usage("no training file configured"))?;
    let valid_path = config
        .valid
        .as_ref()
        .ok_or_else(|| Error::usage("no validation file configured"))?;
    let train_text = read_pairs(train_path)?;
    let valid_text = read_pairs(valid_path)?;
    let vocab = match &config.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocab(&train_text, config.max_vocab)?,
    };
    dataset_from_text(config, vocab, &train_text, &valid_text)
}

pub fn build_vocab(pairs: &[TextPair], max_size: usize) -> Result<Vocabulary> {
    let lines: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.message.as_str(), p.response.as_str()])
        .collect();
    Vocabulary::build(&lines, max_size)
}

pub fn dataset_from_text(
    config: &TrainConfig,
    vocab: Vocabulary,
    train: &[TextPair],
    valid: &[TextPair],
) -> Result<Dataset> {
    let filter = config.filter();
    let keep = |pairs: &[TextPair]| -> Vec<TextPair> {
        pairs.iter().filter(|p| filter.keeps(p, &vocab)).cloned().collect()
    };
    let train = encode_pairs(&vocab, &keep(train))?;
    let valid = encode_pairs(&vocab, &keep(valid))?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Ingestion("no pairs left after length filtering".into()));
    }
    info!("{} train / {} valid pairs, vocabulary {}", train.len(), valid.len(), vocab.len());
    Ok(Dataset { vocab, train, valid })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// One decoded response per test pair.
    pub responses: Vec<String>,
}

impl Evaluation {
    pub fn responses_text(&self) -> String {
        let mut s = String::new();
        for r in &self.responses {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    /// Writes `report.txt` (key = value block then the one-line record) and
    /// `responses.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), format!("{}{}\n", self.report.to_kv(), self.report.to_record()))?;
        fs::write(dir.join("responses.txt"), self.responses_text())?;
        Ok(())
    }
}

/// Greedy-decode every test message and score the responses against the
/// tokenized references. Metrics are computed on the decoded text, so they
/// equal the metrics of the written responses file.
pub fn evaluate(params: &ModelParams, vocab: &Vocabulary, test: &[TextPair], max_len: usize) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::usage("empty test set"));
    }
    let inputs: Vec<Vec<usize>> = test.iter().map(|p| vocab.encode(&p.message)).collect();
    if inputs.iter().any(Vec::is_empty) {
        return Err(Error::Ingestion("test pair with an empty message".into()));
    }
    let decoded = decode_responses(params, &inputs, max_len)?;
    let responses: Vec<String> = decoded.iter().map(|ids| vocab.decode(ids)).collect();
    let hyps: Vec<Vec<String>> = responses.iter().map(|r| tokenize(r)).collect();
    let refs: Vec<Vec<String>> = test.iter().map(|p| tokenize(&p.response)).collect();
    let report = MetricsReport::compute(&hyps, &refs)?;
    Ok(Evaluation { report, responses })
}

/// Rank tables for the leading position and after each of `after`, then, when
/// a frequency table is given, its `top` most frequent tokens with their
/// pre-weights.
pub fn analyze(
    responses: &[Vec<String>],
    after: &[String],
    top: usize,
    frequency: Option<(&FrequencyTable, &Vocabulary)>,
) -> Result<String> {
    if responses.is_empty() {
        return Err(Error::Ingestion("no responses to analyze".into()));
    }
    let mut out = String::new();
    out.push_str(&rank_table(responses, &RankMode::Leading)?.top(top).to_string());
    for t in after {
        out.push('\n');
        out.push_str(&rank_table(responses, &RankMode::After(t.clone()))?.top(top).to_string());
    }
    if let Some((table, vocab)) = frequency {
        out.push('\n');
        out.push_str(&weight_dump(table, vocab, top)?);
    }
    Ok(out)
}

/// The `top` most frequent non-reserved tokens with their counts and
/// pre-weights, most frequent first.
pub fn weight_dump(table: &FrequencyTable, vocab: &Vocabulary, top: usize) -> Result<String> {
    let weights = table.pre_weight()?;
    let mut ids: Vec<usize> = (NUM_RESERVED..table.vocab_size()).collect();
    ids.sort_by(|&a, &b| table.count(b).cmp(&table.count(a)).then(a.cmp(&b)));
    let width = ids
        .iter()
        .take(top)
        .map(|&i| vocab.token(i).len())
        .chain(["token".len()])
        .max()
        .unwrap_or(5);
    let mut s = format!("# {} frequency (total {})\n", table.mode(), table.total());
    let _ = writeln!(s, "{:<width$}  {:>10}  {:>10}", "token", "count", "pre_weight");
    for &id in ids.iter().take(top) {
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>10.4}", vocab.token(id), table.count(id), weights.get(id));
    }
    Ok(s)
}

pub fn read_responses(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(tokenize).collect())
}

/// Sizes of the three synthetic splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Draws `train + valid + test` pairs from one stream and cuts them in order.
pub fn synth_splits(exponent: f64, sizes: SplitSizes, seed: u64) -> Result<[Vec<TextPair>; 3]> {
    let spec = SynthSpec::with_defaults(exponent, sizes.train + sizes.valid + sizes.test);
    let mut all: Vec<TextPair> = synth_corpus(&spec, seed)?.into_iter().map(|s| s.pair).collect();
    let test = all.split_off(sizes.train + sizes.valid);
    let valid = all.split_off(sizes.train);
    Ok([all, valid, test])
}

/// Writes `train.txt`, `valid.txt` and `test.txt` into `dir`.
pub fn write_synth(dir: &Path, exponent: f64, sizes: SplitSizes, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [train, valid, test] = synth_splits(exponent, sizes, seed)?;
    write_pairs(&dir.join("train.txt"), &train)?;
    write_pairs(&dir.join("valid.txt"), &valid)?;
    write_pairs(&dir.join("test.txt"), &test)?;
    Ok(())
}
