//! Token-frequency accounting and the two frequency-to-weight mappings.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::corpus::{Batch, Vocabulary, PAD};
use crate::error::{Error, Result};

/// Which token stream a table counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreqMode {
    /// Ground-truth targets of the batches seen so far.
    Gt,
    /// The model's own greedy decodes.
    Output,
}

impl fmt::Display for FreqMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreqMode::Gt => "gt",
            FreqMode::Output => "output",
        })
    }
}

/// Cumulative per-token counts. PAD is never counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    total: u64,
    mode: FreqMode,
}

impl FrequencyTable {
    pub fn new(vocab_size: usize, mode: FreqMode) -> Self {
        FrequencyTable {
            counts: vec![0; vocab_size],
            total: 0,
            mode,
        }
    }

    /// Table with explicit counts; the PAD entry must be zero.
    pub fn from_counts(counts: Vec<u64>, mode: FreqMode) -> Result<Self> {
        if counts.first().is_some_and(|&c| c != 0) {
            return Err(Error::usage("PAD must have a zero count"));
        }
        let total = counts.iter().sum();
        Ok(FrequencyTable { counts, total, mode })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, token: usize) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn mode(&self) -> FreqMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.total = 0;
    }

    fn expect_mode(&self, mode: FreqMode) -> Result<()> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "{} update applied to a {} table",
                mode, self.mode
            )))
        }
    }

    fn observe(&mut self, token: usize) -> Result<()> {
        if token == PAD {
            return Ok(());
        }
        let slot = self
            .counts
            .get_mut(token)
            .ok_or_else(|| Error::structural(format!("token {token} outside the table")))?;
        *slot += 1;
        self.total += 1;
        Ok(())
    }

    /// Adds the non-PAD target tokens of `batch`.
    pub fn update_gt(&mut self, batch: &Batch) -> Result<()> {
        self.expect_mode(FreqMode::Gt)?;
        for (row, &len) in batch.targets.iter().zip(&batch.target_lens) {
            for &tok in &row[..len] {
                self.observe(tok)?;
            }
        }
        Ok(())
    }

    /// Adds decoded sequences (already truncated at EOS, EOS included).
    pub fn update_output(&mut self, decoded: &[Vec<usize>]) -> Result<()> {
        self.expect_mode(FreqMode::Output)?;
        for seq in decoded {
            for &tok in seq {
                self.observe(tok)?;
            }
        }
        Ok(())
    }

    /// `token<TAB>count` per line, in id order, PAD omitted.
    pub fn dump(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (id, &c) in self.counts.iter().enumerate().skip(1) {
            out.push_str(vocab.token(id));
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        fs::write(path, self.dump(vocab))?;
        Ok(())
    }

    /// Parses a dump; tokens missing from the file keep a zero count.
    pub fn parse(text: &str, vocab: &Vocabulary, mode: FreqMode) -> Result<Self> {
        let mut table = FrequencyTable::new(vocab.len(), mode);
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Ingestion(format!("line {}: expected token<TAB>count", n + 1)))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| Error::Ingestion(format!("line {}: bad count {count:?}", n + 1)))?;
            let id = vocab
                .get(tok)
                .ok_or_else(|| Error::Ingestion(format!("line {}: unknown token {tok:?}", n + 1)))?;
            if id == PAD {
                continue;
            }
            table.total = table.total - table.counts[id] + count;
            table.counts[id] = count;
        }
        Ok(table)
    }

    pub fn load(path: &Path, vocab: &Vocabulary, mode: FreqMode) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        Self::parse(&text, vocab, mode)
    }

    /// Mean-one pre-weights: `w_i = 1 - RF_i / max_j RF_j`, rescaled so the
    /// mean over non-PAD tokens is 1. The most frequent token gets 0, PAD 0.
    /// A table whose non-PAD counts are all equal yields all-ones.
    pub fn pre_weight(&self) -> Result<WeightVector> {
        if self.total == 0 {
            return Err(Error::DegenerateFrequency("no tokens observed".into()));
        }
        let n = self.counts.len();
        if n < 2 {
            return Err(Error::DegenerateFrequency("vocabulary has no non-PAD tokens".into()));
        }
        let non_pad = &self.counts[1..];
        let mut weights = vec![0.0; n];
        if non_pad.iter().all(|&c| c == non_pad[0]) {
            weights[1..].iter_mut().for_each(|w| *w = 1.0);
            return Ok(WeightVector { weights });
        }
        let total = self.total as f64;
        let max_rf = non_pad.iter().copied().max().unwrap_or(0) as f64 / total;
        // a * RF + 1 with a = -1 / max RF, written as a ratio so the
        // maximum lands on exactly 0
        for (w, &c) in weights[1..].iter_mut().zip(non_pad) {
            let rf = c as f64 / total;
            *w = 1.0 - rf / max_rf;
        }
        let mean = weights[1..].iter().sum::<f64>() / (n - 1) as f64;
        if mean <= 0.0 {
            return Err(Error::DegenerateFrequency("raw pre-weights average to zero".into()));
        }
        weights[1..].iter_mut().for_each(|w| *w /= mean);
        Ok(WeightVector { weights })
    }

    /// `1 + max(0, freq(output) - freq(gt)) / total`, always in `[1, 2]`.
    pub fn post_weight(&self, output_token: usize, gt_token: usize) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::DegenerateFrequency("no tokens observed".into()));
        }
        let out = self.count(output_token);
        let gt = self.count(gt_token);
        let excess = out.saturating_sub(gt);
        Ok(1.0 + excess as f64 / self.total as f64)
    }
}

/// Per-vocabulary loss weights. Index 0 (PAD) is always 0.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn uniform(vocab_size: usize) -> Self {
        let mut weights = vec![1.0; vocab_size];
        if let Some(w) = weights.first_mut() {
            *w = 0.0;
        }
        WeightVector { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, token: usize) -> f64 {
        self.weights[token]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}
