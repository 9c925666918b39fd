//! Vocabulary, message-response pairs, batching and a synthetic skewed
//! dialogue corpus.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::seeded_rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["__pad__", "__unk__", "__bos__", "__eos__"];
pub const NUM_RESERVED: usize = RESERVED.len();

/// Joins turns of a multi-turn context inside the input field.
pub const SEP: &str = "__sep__";

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from the `max_size` most frequent tokens of `lines`. Ties are
    /// broken by first occurrence.
    pub fn build<S: AsRef<str>>(lines: &[S], max_size: usize) -> Result<Self> {
        let mut counts: Vec<(String, u64)> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in tokenize(line.as_ref()) {
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                match seen.get(&tok) {
                    Some(&i) => counts[i].1 += 1,
                    None => {
                        seen.insert(tok.clone(), counts.len());
                        counts.push((tok, 1));
                    }
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::Ingestion("cannot build a vocabulary from an empty corpus".into()));
        }
        // stable sort keeps first-occurrence order among equal counts
        counts.sort_by_key(|c| std::cmp::Reverse(c.1));
        counts.truncate(max_size);
        Ok(Self::from_tokens(counts.into_iter().map(|(t, _)| t)))
    }

    /// Vocabulary over the reserved ids followed by `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line; line `k` holds id `k + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[NUM_RESERVED..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::Ingestion(format!("{}: malformed vocabulary line", path.display())));
        }
        let vocab = Self::from_tokens(tokens.clone());
        if vocab.len() != tokens.len() + NUM_RESERVED {
            return Err(Error::Ingestion(format!("{}: duplicate vocabulary entries", path.display())));
        }
        Ok(vocab)
    }
}

/// An encoded example: input ids and an EOS-terminated target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequencePair {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl SequencePair {
    pub fn new(input: Vec<usize>, mut target: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if target.last() != Some(&EOS) {
            target.push(EOS);
        }
        if input.is_empty() {
            return Err(Error::Ingestion("empty input sequence".into()));
        }
        if input.iter().chain(&target).any(|&id| id >= vocab_size) {
            return Err(Error::Ingestion("token id outside the vocabulary".into()));
        }
        Ok(SequencePair { input, target })
    }

    pub fn encode(vocab: &Vocabulary, message: &str, response: &str) -> Result<Self> {
        Self::new(vocab.encode(message), vocab.encode(response), vocab.len())
    }
}

/// A raw text example as read from a pair file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub message: String,
    pub response: String,
}

impl TextPair {
    pub fn new(message: impl Into<String>, response: impl Into<String>) -> Self {
        TextPair {
            message: message.into(),
            response: response.into(),
        }
    }

    /// Builds the input field of a multi-turn example.
    pub fn from_turns(context: &[&str], response: impl Into<String>) -> Self {
        TextPair::new(context.join(&format!(" {SEP} ")), response)
    }
}

pub fn parse_pairs(text: &str) -> Result<Vec<TextPair>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(message), Some(response), None) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Ingestion(format!(
                "line {}: expected `message<TAB>response`",
                n + 1
            )));
        };
        if tokenize(message).is_empty() || tokenize(response).is_empty() {
            return Err(Error::Ingestion(format!("line {}: empty field", n + 1)));
        }
        pairs.push(TextPair::new(message, response));
    }
    Ok(pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<TextPair>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        text.push_str(&line);
        text.push('\n');
    }
    parse_pairs(&text).map_err(|e| match e {
        Error::Ingestion(msg) => Error::Ingestion(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pairs(path: &Path, pairs: &[TextPair]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for p in pairs {
        writeln!(f, "{}\t{}", p.message, p.response)?;
    }
    Ok(())
}

/// Minimum-length filter on both sides of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LengthFilter {
    pub min_tokens: usize,
    /// Count only in-vocabulary tokens, i.e. measure after UNK replacement.
    pub after_unk: bool,
}

impl LengthFilter {
    pub fn keeps(&self, pair: &TextPair, vocab: &Vocabulary) -> bool {
        let len = |text: &str| {
            let toks = tokenize(text);
            if self.after_unk {
                toks.iter().filter(|t| vocab.get(t).is_some()).count()
            } else {
                toks.len()
            }
        };
        len(&pair.message) >= self.min_tokens && len(&pair.response) >= self.min_tokens
    }
}

pub fn encode_pairs(vocab: &Vocabulary, pairs: &[TextPair]) -> Result<Vec<SequencePair>> {
    pairs
        .iter()
        .map(|p| SequencePair::encode(vocab, &p.message, &p.response))
        .collect()
}

/// Padded mini-batch. Row `b` of `inputs`/`targets` is right-padded with PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub input_lens: Vec<usize>,
    pub target_lens: Vec<usize>,
    /// Positions of the source pairs in the list the batch was drawn from.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SequencePair], indices: Vec<usize>) -> Self {
        let max_in = pairs.iter().map(|p| p.input.len()).max().unwrap_or(0);
        let max_out = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let pad = |seq: &[usize], len: usize| {
            let mut v = seq.to_vec();
            v.resize(len, PAD);
            v
        };
        Batch {
            inputs: pairs.iter().map(|p| pad(&p.input, max_in)).collect(),
            targets: pairs.iter().map(|p| pad(&p.target, max_out)).collect(),
            input_lens: pairs.iter().map(|p| p.input.len()).collect(),
            target_lens: pairs.iter().map(|p| p.target.len()).collect(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn max_input_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn max_target_len(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn input_mask(&self, row: usize, pos: usize) -> bool {
        pos < self.input_lens[row]
    }

    pub fn target_mask(&self, row: usize, step: usize) -> bool {
        step < self.target_lens[row]
    }

    /// Target token at `(row, step)`, or `None` at PAD positions.
    pub fn target(&self, row: usize, step: usize) -> Option<usize> {
        self.target_mask(row, step).then(|| self.targets[row][step])
    }

    pub fn target_token_count(&self) -> usize {
        self.target_lens.iter().sum()
    }

    /// Unpadded input sequences.
    pub fn unpadded_inputs(&self) -> Vec<Vec<usize>> {
        self.inputs
            .iter()
            .zip(&self.input_lens)
            .map(|(s, &l)| s[..l].to_vec())
            .collect()
    }
}

/// Shuffles `pairs` under `seed` and cuts consecutive batches of
/// `batch_size`; the last batch may be short.
pub fn make_batches(pairs: &[SequencePair], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&SequencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&refs, chunk.to_vec())
        })
        .collect())
}

/// Batches in the given order, without shuffling.
pub fn sequential_batches(pairs: &[SequencePair], batch_size: usize) -> Vec<Batch> {
    (0..pairs.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&SequencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&refs, chunk.to_vec())
        })
        .collect()
}

/// Template-driven dialogue generator. Response templates are ranked: the
/// template at index `k` is drawn with probability proportional to
/// `1 / (k + 1)^exponent`. Placeholders `{topic}` and `{adj}` in a response are
/// filled with the same words as in its message.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub messages: Vec<String>,
    pub responses: Vec<String>,
    pub topics: Vec<String>,
    pub adjectives: Vec<String>,
    pub exponent: f64,
    pub size: usize,
}

const DEFAULT_MESSAGES: &[&str] = &[
    "do you like {adj} {topic} ?",
    "what do you think of the {adj} {topic} ?",
    "i saw a {adj} {topic} today .",
    "have you ever had {adj} {topic} ?",
    "my friend says the {topic} is {adj} .",
];

const DEFAULT_RESPONSES: &[&str] = &[
    "i do n't know .",
    "i 'm not sure .",
    "i like {topic} .",
    "{topic} is {adj} .",
    "what about the {adj} {topic} ?",
    "you should try {topic} .",
    "the {topic} was really {adj} .",
    "tell me more about {topic} .",
];

const DEFAULT_TOPICS: &[&str] = &[
    "pizza", "coffee", "music", "movies", "soccer", "tennis", "books", "travel", "dogs", "cats",
    "rain", "summer", "winter", "jazz", "poetry", "chess", "cooking", "painting", "hiking",
    "swimming", "trains", "boats", "gardens", "museums", "history", "science", "robots",
    "space", "oceans", "mountains", "cheese", "bread", "tea", "chocolate", "birds", "horses",
    "theater", "dancing", "cars", "bikes",
];

const DEFAULT_ADJECTIVES: &[&str] = &[
    "good", "strange", "old", "new", "famous", "cheap", "lovely", "boring", "amazing", "quiet",
    "loud", "red",
];

impl SynthSpec {
    pub fn with_defaults(exponent: f64, size: usize) -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        SynthSpec {
            messages: own(DEFAULT_MESSAGES),
            responses: own(DEFAULT_RESPONSES),
            topics: own(DEFAULT_TOPICS),
            adjectives: own(DEFAULT_ADJECTIVES),
            exponent,
            size,
        }
    }

    /// Cumulative draw table over response templates.
    pub fn template_cdf(&self) -> Vec<f64> {
        let weights: Vec<f64> = (0..self.responses.len())
            .map(|k| 1.0 / ((k + 1) as f64).powf(self.exponent))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthPair {
    pub pair: TextPair,
    pub template: usize,
}

fn fill(template: &str, topic: &str, adj: &str) -> String {
    template.replace("{topic}", topic).replace("{adj}", adj)
}

pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthPair>> {
    if spec.size == 0 {
        return Err(Error::Ingestion("synthetic corpus size must be at least 1".into()));
    }
    if spec.responses.len() < 2 {
        return Err(Error::usage("synthetic corpus needs at least two response templates"));
    }
    if spec.messages.is_empty() || spec.topics.is_empty() || spec.adjectives.is_empty() {
        return Err(Error::usage("synthetic corpus needs messages, topics and adjectives"));
    }
    if !spec.exponent.is_finite() || spec.exponent < 0.0 {
        return Err(Error::domain("Zipf exponent must be finite and non-negative"));
    }
    let cdf = spec.template_cdf();
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let u: f64 = rng.random();
        let template = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let message = &spec.messages[rng.random_range(0..spec.messages.len())];
        let topic = &spec.topics[rng.random_range(0..spec.topics.len())];
        let adj = &spec.adjectives[rng.random_range(0..spec.adjectives.len())];
        out.push(SynthPair {
            pair: TextPair::new(fill(message, topic, adj), fill(&spec.responses[template], topic, adj)),
            template,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_from_single_line() {
        let v = Vocabulary::build(&["a a b"], 10).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
    }

    #[test]
    fn vocab_truncates_to_most_frequent() {
        let v = Vocabulary::build(&["b a a", "a"], 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn vocab_ties_follow_first_occurrence() {
        let v = Vocabulary::build(&["z y x", "x y z"], 10).unwrap();
        assert_eq!(&v.tokens()[4..], &["z", "y", "x"]);
    }

    #[test]
    fn vocab_is_deterministic_and_lowercases() {
        let lines = ["Hello there", "hello World", "world peace"];
        let a = Vocabulary::build(&lines, 3).unwrap();
        let b = Vocabulary::build(&lines, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id("hello"), 4);
        assert_eq!(a.id("world"), 5);
    }

    #[test]
    fn empty_corpus_is_ingestion_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 5), Err(Error::Ingestion(_))));
        assert!(matches!(Vocabulary::build(&["   "], 5), Err(Error::Ingestion(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(&["the cat sat on the mat"], 100).unwrap();
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("the"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn unk_is_absorbing() {
        let v = Vocabulary::build(&["a b"], 10).unwrap();
        let ids = v.encode("a zzz b");
        assert_eq!(ids, vec![4, UNK, 5]);
        assert_eq!(v.decode(&ids), "a __unk__ b");
        assert_eq!(v.encode(&v.decode(&ids)), ids);
    }

    #[test]
    fn sequence_pair_appends_eos() {
        let p = SequencePair::new(vec![4], vec![5, 6], 7).unwrap();
        assert_eq!(p.target, vec![5, 6, EOS]);
        assert!(SequencePair::new(vec![], vec![5], 7).is_err());
        assert!(SequencePair::new(vec![9], vec![5], 7).is_err());
    }

    #[test]
    fn pair_file_parsing() {
        let pairs = parse_pairs("hi there\thello\n\nhow are you __sep__ fine\tgood\n").unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].message, "how are you __sep__ fine");
        assert!(parse_pairs("no tab here\n").is_err());
        assert!(parse_pairs("a\tb\tc\n").is_err());
        let turns = TextPair::from_turns(&["hey", "what's up"], "nothing");
        assert_eq!(turns.message, "hey __sep__ what's up");
    }

    #[test]
    fn length_filter_modes() {
        let v = Vocabulary::build(&["a b c"], 10).unwrap();
        let pair = TextPair::new("a b zz", "a b c");
        let before = LengthFilter { min_tokens: 3, after_unk: false };
        let after = LengthFilter { min_tokens: 3, after_unk: true };
        assert!(before.keeps(&pair, &v));
        assert!(!after.keeps(&pair, &v));
    }

    fn toy_pairs(n: usize) -> Vec<SequencePair> {
        (0..n)
            .map(|i| SequencePair::new(vec![4 + i % 3; 1 + i % 4], vec![5; 1 + i % 2], 10).unwrap())
            .collect()
    }

    #[test]
    fn batch_sizes_and_masks() {
        let pairs = toy_pairs(10);
        let batches = make_batches(&pairs, 4, 1).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        for b in &batches {
            for row in 0..b.len() {
                for t in 0..b.max_target_len() {
                    assert_eq!(b.target_mask(row, t), b.targets[row][t] != PAD);
                }
                for s in 0..b.max_input_len() {
                    assert_eq!(b.input_mask(row, s), b.inputs[row][s] != PAD);
                }
                assert_eq!(b.unpadded_inputs()[row], pairs[b.indices[row]].input);
            }
        }
    }

    #[test]
    fn batches_are_seeded() {
        let pairs = toy_pairs(20);
        assert_eq!(make_batches(&pairs, 3, 9).unwrap(), make_batches(&pairs, 3, 9).unwrap());
        assert_ne!(make_batches(&pairs, 3, 9).unwrap(), make_batches(&pairs, 3, 10).unwrap());
        assert!(make_batches(&pairs, 0, 9).is_err());
    }

    #[test]
    fn synth_uniform_limit() {
        let spec = SynthSpec::with_defaults(0.0, 10_000);
        let corpus = synth_corpus(&spec, 3).unwrap();
        let mut counts = vec![0usize; spec.responses.len()];
        for p in &corpus {
            counts[p.template] += 1;
        }
        let (max, min) = (*counts.iter().max().unwrap(), *counts.iter().min().unwrap());
        assert!((max as f64) / (min as f64) < 2.0, "{counts:?}");
    }

    #[test]
    fn synth_skewed_head() {
        let spec = SynthSpec::with_defaults(1.5, 10_000);
        let cdf = spec.template_cdf();
        // own draw table: head mass 1 / H(8, 1.5)
        let harmonic: f64 = (1..=8).map(|k| 1.0 / (k as f64).powf(1.5)).sum();
        assert!((cdf[0] - 1.0 / harmonic).abs() < 1e-12);
        let corpus = synth_corpus(&spec, 3).unwrap();
        let top = corpus.iter().filter(|p| p.template == 0).count() as f64 / 1e4;
        assert!(top > 0.4, "top share {top}");
    }

    #[test]
    fn synth_rejects_empty_and_is_seeded() {
        assert!(matches!(
            synth_corpus(&SynthSpec::with_defaults(1.0, 0), 1),
            Err(Error::Ingestion(_))
        ));
        let spec = SynthSpec::with_defaults(1.0, 50);
        assert_eq!(synth_corpus(&spec, 4).unwrap(), synth_corpus(&spec, 4).unwrap());
        let mut one = spec.clone();
        one.responses.truncate(1);
        assert!(synth_corpus(&one, 4).is_err());
    }

    #[test]
    fn synth_responses_copy_message_slots() {
        let spec = SynthSpec::with_defaults(0.5, 200);
        for p in synth_corpus(&spec, 8).unwrap() {
            let msg = tokenize(&p.pair.message);
            for tok in tokenize(&p.pair.response) {
                if spec.topics.contains(&tok) || spec.adjectives.contains(&tok) {
                    assert!(msg.contains(&tok), "{:?}", p.pair);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn batches_partition_the_pairs(n in 1usize..60, size in 1usize..17, seed in 0u64..1000) {
            let pairs = toy_pairs(n);
            let batches = make_batches(&pairs, size, seed).unwrap();
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert!(batches.iter().all(|b| b.len() <= size));
        }

        #[test]
        fn encode_decode_round_trip(words in proptest::collection::vec("[a-e]{1,3}", 1..12)) {
            let line = words.join(" ");
            let v = Vocabulary::build(&[line.as_str()], 100).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&line)), line);
        }
    }
}
