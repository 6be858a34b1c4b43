//! Token-level annotation corpora, vocabularies, pretrained embeddings and
//! cross-validation splits.
//!
//! The annotation format is one `token<TAB>tag` line per token with blank
//! lines between sentences. Tags are `O`, `B-POS`, `I-POS`, `B-NEG`,
//! `I-NEG`, `B-NEU` and `I-NEU`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    /// Position of the polarity in score vectors and in tie-breaking order.
    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Polarity {
        Polarity::ALL[i]
    }

    pub fn code(self) -> &'static str {
        match self {
            Polarity::Positive => "POS",
            Polarity::Negative => "NEG",
            Polarity::Neutral => "NEU",
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Polarity::Positive => '+',
            Polarity::Negative => '-',
            Polarity::Neutral => '0',
        }
    }

    pub fn is_subjective(self) -> bool {
        self != Polarity::Neutral
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "POS" => Ok(Polarity::Positive),
            "NEG" => Ok(Polarity::Negative),
            "NEU" => Ok(Polarity::Neutral),
            other => Err(Error::Format(format!("unknown polarity `{other}`"))),
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A tokenized input sentence. Tokens are kept verbatim.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::Argument("sentence has no tokens".into()));
        }
        if let Some(i) = tokens.iter().position(|t| t.is_empty()) {
            return Err(Error::Argument(format!("token {} is empty", i + 1)));
        }
        Ok(Sentence { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Character sequence of the 0-based token `k`.
    pub fn chars(&self, k: usize) -> impl Iterator<Item = char> + '_ {
        self.tokens[k].chars()
    }
}

/// One target: an inclusive 1-based token range and its polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpanLabel {
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
}

impl SpanLabel {
    pub fn new(start: usize, end: usize, polarity: Polarity) -> Self {
        SpanLabel {
            start,
            end,
            polarity,
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &SpanLabel) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Checks that spans are in bounds, sorted and pairwise disjoint.
pub fn validate_spans(n: usize, spans: &[SpanLabel]) -> Result<()> {
    let mut prev_end = 0;
    for s in spans {
        if s.start < 1 || s.start > s.end || s.end > n {
            return Err(Error::Argument(format!(
                "span ({},{}) out of bounds for length {n}",
                s.start, s.end
            )));
        }
        if s.start <= prev_end {
            return Err(Error::Argument(format!(
                "span ({},{}) overlaps or is out of order",
                s.start, s.end
            )));
        }
        prev_end = s.end;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub sentence: Sentence,
    pub spans: Vec<SpanLabel>,
}

impl Instance {
    pub fn new(sentence: Sentence, spans: Vec<SpanLabel>) -> Result<Self> {
        validate_spans(sentence.len(), &spans)?;
        Ok(Instance { sentence, spans })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>) -> Self {
        Dataset { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }

    pub fn spans(&self) -> Vec<Vec<SpanLabel>> {
        self.instances.iter().map(|i| i.spans.clone()).collect()
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        parse_annotations(&std::fs::read_to_string(path)?)
    }
}

enum Tagging {
    Required,
    Optional,
}

/// Parses the token-per-line annotation format.
pub fn parse_annotations(text: &str) -> Result<Dataset> {
    parse_with(text, Tagging::Required)
}

/// Like [`parse_annotations`] but lines may omit the tag column, which is
/// then read as `O`. Used for prediction inputs.
pub fn parse_tokens(text: &str) -> Result<Dataset> {
    parse_with(text, Tagging::Optional)
}

fn parse_with(text: &str, tagging: Tagging) -> Result<Dataset> {
    let mut instances = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut spans: Vec<SpanLabel> = Vec::new();
    let mut open: Option<SpanLabel> = None;

    let mut flush = |tokens: &mut Vec<String>, spans: &mut Vec<SpanLabel>, open: &mut Option<SpanLabel>| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        spans.extend(open.take());
        let sentence = Sentence::new(std::mem::take(tokens))?;
        instances.push(Instance::new(sentence, std::mem::take(spans))?);
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            flush(&mut tokens, &mut spans, &mut open)?;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (token, tag) = match (fields.as_slice(), &tagging) {
            ([token, tag], _) => (*token, *tag),
            ([token], Tagging::Optional) => (*token, "O"),
            _ => {
                return Err(Error::parse(
                    lineno,
                    format!("expected 2 tab-separated fields, found {}", fields.len()),
                ))
            }
        };
        if token.is_empty() {
            return Err(Error::parse(lineno, "empty token"));
        }
        tokens.push(token.to_string());
        let k = tokens.len();

        match tag {
            "O" => spans.extend(open.take()),
            _ => {
                let (prefix, pol) = tag
                    .split_once('-')
                    .ok_or_else(|| Error::parse(lineno, format!("unknown tag `{tag}`")))?;
                let polarity: Polarity = pol
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("unknown tag `{tag}`")))?;
                match prefix {
                    "B" => {
                        spans.extend(open.take());
                        open = Some(SpanLabel::new(k, k, polarity));
                    }
                    "I" => match open.as_mut() {
                        Some(span) if span.polarity == polarity => span.end = k,
                        _ => {
                            return Err(Error::parse(
                                lineno,
                                format!("`{tag}` does not continue a B-{pol} target"),
                            ))
                        }
                    },
                    _ => return Err(Error::parse(lineno, format!("unknown tag `{tag}`"))),
                }
            }
        }
    }
    flush(&mut tokens, &mut spans, &mut open)?;
    Ok(Dataset { instances })
}

/// Tag column for a sentence of length `n`.
pub fn span_tags(n: usize, spans: &[SpanLabel]) -> Vec<String> {
    let mut tags = vec!["O".to_string(); n];
    for s in spans {
        tags[s.start - 1] = format!("B-{}", s.polarity);
        for t in &mut tags[s.start..s.end] {
            *t = format!("I-{}", s.polarity);
        }
    }
    tags
}

pub fn emit_annotations(dataset: &Dataset) -> String {
    let mut out = String::new();
    for inst in &dataset.instances {
        let tags = span_tags(inst.sentence.len(), &inst.spans);
        for (token, tag) in inst.sentence.tokens().iter().zip(&tags) {
            out.push_str(token);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Word and character vocabularies. Id 0 is reserved for unknowns in both.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    chars: Vec<char>,
    char_ids: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn from_lists(words: Vec<String>, chars: Vec<char>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Format("word vocabulary must start with <unk>".into()));
        }
        let word_ids = words.iter().enumerate().skip(1).map(|(i, w)| (w.clone(), i)).collect();
        let char_ids = chars.iter().enumerate().skip(1).map(|(i, &c)| (c, i)).collect();
        Ok(Vocabulary {
            words,
            word_ids,
            chars,
            char_ids,
        })
    }

    /// Collects words and characters in first-occurrence order.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let mut words = vec![UNK.to_string()];
        let mut word_ids = HashMap::new();
        let mut chars = vec!['\u{0}'];
        let mut char_ids = HashMap::new();
        for inst in &dataset.instances {
            for token in inst.sentence.tokens() {
                if !word_ids.contains_key(token) {
                    word_ids.insert(token.clone(), words.len());
                    words.push(token.clone());
                }
                for c in token.chars() {
                    if let std::collections::hash_map::Entry::Vacant(e) = char_ids.entry(c) {
                        e.insert(chars.len());
                        chars.push(c);
                    }
                }
            }
        }
        Vocabulary {
            words,
            word_ids,
            chars,
            char_ids,
        }
    }

    /// Exact match, then lowercase, then UNK.
    pub fn word_id(&self, word: &str) -> usize {
        if let Some(&id) = self.word_ids.get(word) {
            return id;
        }
        self.word_ids
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_ids.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

/// Word vectors indexed by vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    /// Number of vocabulary entries that were found in the pretrained file.
    pub covered: usize,
}

/// Half-width of the uniform range used for vectors not taken from a file.
pub fn init_range(dim: usize) -> f64 {
    (3.0 / dim as f64).sqrt()
}

impl EmbeddingTable {
    /// Every row drawn from the out-of-table policy.
    pub fn random(rows: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = init_range(dim);
        let vectors = (0..rows)
            .map(|_| (0..dim).map(|_| rng.gen_range(-r..=r)).collect())
            .collect();
        EmbeddingTable {
            dim,
            vectors,
            covered: 0,
        }
    }
}

/// Reads whitespace-separated `word v1 .. vd` lines.
pub fn read_embedding_file(reader: impl BufRead) -> Result<(usize, HashMap<String, Vec<f64>>)> {
    let mut dim = None;
    let mut map = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values = fields
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::parse(i + 1, format!("bad embedding value `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => {
                return Err(Error::parse(i + 1, "embedding line has no values"))
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Format(format!(
                    "line {}: dimension {} differs from {}",
                    i + 1,
                    values.len(),
                    d
                )))
            }
            _ => {}
        }
        map.entry(word.to_string()).or_insert(values);
    }
    let dim = dim.ok_or_else(|| Error::Format("embedding file is empty".into()))?;
    Ok((dim, map))
}

/// Builds a table for `vocab` from a pretrained file. Words missing from the
/// file (after an exact then lowercase lookup) and UNK are drawn uniformly
/// from `±sqrt(3/d)` with `seed`.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<EmbeddingTable> {
    let file = File::open(path)?;
    let (dim, map) = read_embedding_file(BufReader::new(file))?;
    Ok(embeddings_from_map(dim, &map, vocab, seed))
}

pub fn embeddings_from_map(
    dim: usize,
    map: &HashMap<String, Vec<f64>>,
    vocab: &Vocabulary,
    seed: u64,
) -> EmbeddingTable {
    let mut table = EmbeddingTable::random(vocab.num_words(), dim, seed);
    for (id, word) in vocab.words().iter().enumerate().skip(1) {
        let found = map.get(word).or_else(|| map.get(&word.to_lowercase()));
        if let Some(v) = found {
            table.vectors[id].clone_from(v);
            table.covered += 1;
        }
    }
    table
}

/// Index lists of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Number of dev items carved out of `available` items.
pub fn dev_count(available: usize, dev_fraction: f64) -> usize {
    ((available as f64) * dev_fraction).round() as usize
}

/// Randomly partitions `indices` into (train, dev). Both lists are sorted.
pub fn split_dev(indices: &[usize], dev_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = dev_count(shuffled.len(), dev_fraction).min(shuffled.len());
    let mut dev = shuffled[..k].to_vec();
    let mut train = shuffled[k..].to_vec();
    dev.sort_unstable();
    train.sort_unstable();
    (train, dev)
}

pub fn make_folds(dataset: &Dataset, k: usize, dev_fraction: f64, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {k}")));
    }
    if k > dataset.len() {
        return Err(Error::Argument(format!(
            "{k} folds requested for {} sentences",
            dataset.len()
        )));
    }
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(Error::Argument(format!("dev fraction {dev_fraction} not in [0,1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let base = dataset.len() / k;
    let extra = dataset.len() % k;
    let mut chunks = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        chunks.push(order[at..at + size].to_vec());
        at += size;
    }

    let folds = (0..k)
        .map(|i| {
            let mut test = chunks[i].clone();
            test.sort_unstable();
            let rest: Vec<usize> = chunks
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, c)| c.iter().copied())
                .collect();
            let fold_seed = rng.gen::<u64>();
            let (train, dev) = split_dev(&rest, dev_fraction, fold_seed);
            Fold { train, dev, test }
        })
        .collect();
    Ok(folds)
}

fn join(indices: &[usize]) -> String {
    indices.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// One line per fold: `fold <i> train=<ids> dev=<ids> test=<ids>`.
pub fn fold_manifest(folds: &[Fold]) -> String {
    folds
        .iter()
        .enumerate()
        .map(|(i, f)| {
            format!(
                "fold {i} train={} dev={} test={}\n",
                join(&f.train),
                join(&f.dev),
                join(&f.test)
            )
        })
        .collect()
}
