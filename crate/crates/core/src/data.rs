//! Corpus ingestion, vocabularies, batching and synthetic datasets.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SeededRng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// Every character is a token.
    Char,
    /// Whitespace-separated tokens.
    Word,
}

impl TokenMode {
    pub fn tokenize<'a>(self, text: &'a str) -> Box<dyn Iterator<Item = &'a str> + 'a> {
        match self {
            TokenMode::Char => Box::new(text.char_indices().map(move |(i, c)| &text[i..i + c.len_utf8()])),
            TokenMode::Word => Box::new(text.split_whitespace()),
        }
    }
}

/// Token frequencies in a single pass.
pub fn count_tokens(text: &str, mode: TokenMode) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in mode.tokenize(text) {
        *counts.entry(t.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Token/id mapping. Id 0 is padding and id 1 the out-of-vocabulary token;
/// regular tokens follow by descending frequency, ties lexicographic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    mode: TokenMode,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    mode: TokenMode,
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Vocab> {
        if r.tokens.len() < 2 || r.tokens[PAD] != PAD_TOKEN || r.tokens[UNK] != UNK_TOKEN {
            return Err(Error::Checkpoint("vocabulary lacks its special entries".into()));
        }
        let index: HashMap<String, usize> = r.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if index.len() != r.tokens.len() {
            return Err(Error::Checkpoint("vocabulary has duplicate tokens".into()));
        }
        Ok(Vocab {
            mode: r.mode,
            tokens: r.tokens,
            index,
        })
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> VocabRepr {
        VocabRepr {
            mode: v.mode,
            tokens: v.tokens,
        }
    }
}

impl Vocab {
    /// Keeps the `max_size` most frequent tokens (special entries not
    /// counted).
    pub fn build(text: &str, mode: TokenMode, max_size: usize) -> Result<Vocab> {
        let counts = count_tokens(text, mode);
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut by_freq: Vec<(String, usize)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        by_freq.truncate(max_size);
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(by_freq.into_iter().map(|(t, _)| t))
            .collect();
        Vocab::try_from(VocabRepr { mode, tokens }).map_err(|_| Error::Data("corpus uses a reserved token".into()))
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    /// Total number of ids, special entries included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.mode.tokenize(text).map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let toks: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i).ok_or_else(|| Error::Data(format!("token id {i} outside vocabulary of {}", self.len()))))
            .collect::<Result<_>>()?;
        Ok(match self.mode {
            TokenMode::Char => toks.concat(),
            TokenMode::Word => toks.join(" "),
        })
    }
}

/// One truncated-backpropagation window: `inputs[b][t]`, and targets
/// shifted by one position.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Splits the stream into `batch` contiguous lanes and cuts them into
/// windows of `bptt` steps. Lane `b` of consecutive batches continues the
/// same text, so hidden state may be carried across them. The remainder
/// that does not fill a lane or a window is dropped.
pub fn make_lm_batches(ids: &[usize], batch: usize, bptt: usize) -> Result<Vec<LmBatch>> {
    if batch == 0 || bptt == 0 {
        return Err(Error::Config("batch size and bptt length must be positive".into()));
    }
    let need = batch * (bptt + 1);
    if ids.len() < need {
        return Err(Error::Data(format!(
            "corpus of {} tokens is too small for {batch} lanes of {bptt} steps; need at least {need}",
            ids.len()
        )));
    }
    let lane_len = ids.len() / batch;
    let lanes: Vec<&[usize]> = ids.chunks_exact(lane_len).take(batch).collect();
    let windows = (lane_len - 1) / bptt;
    Ok((0..windows)
        .map(|w| {
            let s = w * bptt;
            LmBatch {
                inputs: lanes.iter().map(|l| l[s..s + bptt].to_vec()).collect(),
                targets: lanes.iter().map(|l| l[s + 1..s + bptt + 1].to_vec()).collect(),
            }
        })
        .collect())
}

/// Number of predicted tokens in a batch list.
pub fn lm_token_count(batches: &[LmBatch]) -> usize {
    batches.iter().map(|b| b.targets.iter().map(Vec::len).sum::<usize>()).sum()
}

/// Train/valid/test text of a language-model data directory
/// (`train.txt`, `valid.txt`, optional `test.txt`).
#[derive(Clone, Debug)]
pub struct LmCorpus {
    pub train: String,
    pub valid: String,
    pub test: Option<String>,
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_lm_dir(dir: &Path) -> Result<LmCorpus> {
    let test = dir.join("test.txt");
    Ok(LmCorpus {
        train: read_text(&dir.join("train.txt"))?,
        valid: read_text(&dir.join("valid.txt"))?,
        test: if test.exists() { Some(read_text(&test)?) } else { None },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassExample {
    pub label: usize,
    pub text: String,
}

/// Labelled texts with labels mapped to contiguous ids in lexicographic
/// order of their names.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDataset {
    pub labels: Vec<String>,
    pub examples: Vec<ClassExample>,
}

/// Parses `label<TAB>space separated tokens` lines. Blank lines are
/// skipped.
pub fn parse_classification(content: &str, path: &str) -> Result<ClassDataset> {
    let mut raw = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let (label, text) = line.split_once('\t').ok_or_else(|| err("expected label<TAB>text"))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(err("empty label"));
        }
        if text.split_whitespace().next().is_none() {
            return Err(err("empty text"));
        }
        raw.push((label.to_string(), text.trim().to_string()));
    }
    if raw.is_empty() {
        return Err(Error::Data(format!("{path}: no examples")));
    }
    let mut labels: Vec<String> = raw.iter().map(|(l, _)| l.clone()).collect();
    labels.sort();
    labels.dedup();
    let examples = raw
        .into_iter()
        .map(|(l, text)| ClassExample {
            label: labels.binary_search(&l).expect("label collected above"),
            text,
        })
        .collect();
    Ok(ClassDataset { labels, examples })
}

pub fn load_classification(path: &Path) -> Result<ClassDataset> {
    parse_classification(&read_text(path)?, &path.display().to_string())
}

impl ClassDataset {
    /// Seeded shuffle, then `round(frac * n)` examples held out. Returns
    /// `(kept, held_out)`.
    pub fn split(&self, frac: f64, seed: u64) -> Result<(ClassDataset, ClassDataset)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::Config(format!("split fraction must be in [0, 1), got {frac}")));
        }
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut SeededRng::seed_from_u64(seed));
        let held = (frac * self.examples.len() as f64).round() as usize;
        let pick = |ix: &[usize]| ClassDataset {
            labels: self.labels.clone(),
            examples: ix.iter().map(|&i| self.examples[i].clone()).collect(),
        };
        Ok((pick(&order[held..]), pick(&order[..held])))
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// All texts concatenated, for vocabulary building.
    pub fn corpus(&self) -> String {
        self.examples.iter().map(|e| e.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    /// Re-indexes labels into `names`, failing on labels it lacks.
    pub fn relabel(&self, names: &[String]) -> Result<ClassDataset> {
        let examples = self
            .examples
            .iter()
            .map(|e| {
                let name = &self.labels[e.label];
                let label = names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Data(format!("label {name:?} does not occur in the training data")))?;
                Ok(ClassExample {
                    label,
                    text: e.text.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ClassDataset {
            labels: names.to_vec(),
            examples,
        })
    }
}

/// Padded classification minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBatch {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Encodes and pads examples in the given order. `max_len` keeps the first
/// `max_len` tokens of longer texts.
pub fn make_class_batches(
    data: &ClassDataset,
    vocab: &Vocab,
    order: &[usize],
    batch: usize,
    max_len: Option<usize>,
) -> Result<Vec<ClassBatch>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut out = Vec::new();
    for chunk in order.chunks(batch) {
        let mut ids = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let e = data
                .examples
                .get(i)
                .ok_or_else(|| Error::Data(format!("example index {i} out of range")))?;
            let mut seq = vocab.encode(&e.text);
            if let Some(m) = max_len {
                seq.truncate(m);
            }
            ids.push(seq);
            labels.push(e.label);
        }
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        let width = lengths.iter().copied().max().unwrap_or(0);
        for seq in ids.iter_mut() {
            seq.resize(width, PAD);
        }
        out.push(ClassBatch { ids, lengths, labels });
    }
    Ok(out)
}

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "is", "that", "for", "it", "as", "was", "with", "be", "by", "on", "not",
    "he", "this", "are", "or", "his", "from", "at", "which", "but", "have", "an", "had", "they", "you", "were",
    "their", "one", "all", "we", "can", "her", "has", "there", "been", "if", "more", "when", "will", "would",
    "who", "so", "no", "she", "other", "its", "may", "these", "what", "them", "than", "some", "him", "time",
    "into", "only", "do", "could", "new", "about", "two", "first", "then", "also", "any", "like", "our", "people",
    "should", "after", "very", "over", "such", "year", "most", "where", "market", "company", "said", "state",
    "many", "work", "years", "made", "world", "before", "under", "city", "great", "small", "between", "house",
    "each", "government", "part", "long", "water", "through", "back", "much", "how", "good", "own", "little",
    "day", "same", "down", "life", "number", "three", "last", "even", "way", "because", "public", "old", "high",
    "might", "place", "well", "school", "against", "large", "percent", "point", "country", "group", "family",
    "report", "early", "money", "price", "stock", "shares", "business", "week", "month", "trade", "bank",
];

/// Seeded English-like text of at least `bytes` bytes: sentences of Zipf
/// distributed common words, with light punctuation and newlines.
pub fn synthetic_english(bytes: usize, seed: u64) -> String {
    let mut rng = SeededRng::seed_from_u64(seed);
    let weights: Vec<f64> = (1..=WORDS.len()).map(|r| 1.0 / r as f64).collect();
    let dist = rand_distr::weighted::WeightedIndex::new(&weights).expect("positive weights");
    let mut out = String::with_capacity(bytes + 128);
    while out.len() < bytes {
        let n = rng.random_range(4..14);
        for i in 0..n {
            let w = WORDS[dist.sample(&mut rng)];
            if i == 0 {
                let mut c = w.chars();
                let first = c.next().expect("non-empty word");
                out.extend(first.to_uppercase());
                out.push_str(c.as_str());
            } else {
                out.push_str(w);
            }
            if i + 1 < n {
                out.push(if rng.random_bool(0.08) { ',' } else { ' ' });
                if out.ends_with(',') {
                    out.push(' ');
                }
            }
        }
        out.push('.');
        out.push(if rng.random_bool(0.15) { '\n' } else { ' ' });
    }
    out
}

/// Real-valued sequence regression whose target depends linearly on a
/// subset of the input features.
#[derive(Clone, Debug)]
pub struct RegressionData {
    /// `inputs[n][t][d]`.
    pub inputs: Vec<Vec<Vec<f64>>>,
    /// `targets[n][0]`.
    pub targets: Vec<Vec<f64>>,
    pub relevant: usize,
}

/// `y = sum_{j < relevant} a_j * mean_t x[t][j] + noise`; the remaining
/// features are pure distractors.
pub fn synthetic_regression(
    n: usize,
    steps: usize,
    relevant: usize,
    irrelevant: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(RegressionData, Vec<f64>)> {
    if n == 0 || steps == 0 || relevant == 0 {
        return Err(Error::Config("regression task needs examples, steps and relevant inputs".into()));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let d = relevant + irrelevant;
    let coef: Vec<f64> = (0..relevant)
        .map(|_| {
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            s * rng.random_range(0.5..1.0) / (relevant as f64).sqrt()
        })
        .collect();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let seq: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut y = 0.0;
        for (j, a) in coef.iter().enumerate() {
            y += a * seq.iter().map(|x| x[j]).sum::<f64>() / steps as f64;
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        targets.push(vec![y + noise_std * e]);
        inputs.push(seq);
    }
    Ok((
        RegressionData {
            inputs,
            targets,
            relevant,
        },
        coef,
    ))
}
