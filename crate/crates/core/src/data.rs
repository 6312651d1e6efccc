//! Labeled text datasets, feature hashing, forget/retain splits and a seeded
//! synthetic corpus generator.

use std::fmt;
use std::hash::Hasher;
use std::path::Path;
use std::str::FromStr;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Sample, SparseVec};

pub const DEFAULT_DIMS: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("line {line}: label {label} is outside [0, {classes})")]
    LabelOutOfRange { line: u64, label: usize, classes: usize },
    #[error("feature dimension {0} is not a power of two")]
    InvalidDims(usize),
    #[error("selector matched no items")]
    EmptyForget,
    #[error("invalid split: {0}")]
    InvalidSpec(String),
    #[error("need at least {classes} items for {classes} classes, got {n}")]
    TooFewItems { n: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Csv,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub source: DataSource,
    pub classes: usize,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for it in &self.items {
            h[it.label] += 1;
        }
        h
    }

    pub fn samples(&self, hasher: &FeatureHasher) -> Vec<Sample> {
        self.items.iter().map(|it| Sample { x: hasher.vectorize(&it.text), y: it.label }).collect()
    }

    fn subset(&self, suffix: &str, items: Vec<Item>) -> Dataset {
        Dataset { name: format!("{}/{suffix}", self.name), source: self.source, classes: self.classes, items }
    }
}

/// Reads a `text,label` CSV. Line numbers in errors are 1-based file lines.
pub fn load_csv(path: &Path, classes: usize) -> Result<Dataset, DataError> {
    let io = |e: &dyn fmt::Display| DataError::Io { path: path.display().to_string(), message: e.to_string() };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| io(&e))?;
    let headers = reader.headers().map_err(|e| DataError::ParseError { line: 1, message: e.to_string() })?;
    if headers.iter().collect::<Vec<_>>() != ["text", "label"] {
        return Err(DataError::ParseError { line: 1, message: "header must be `text,label`".into() });
    }
    let mut items = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            DataError::ParseError { line, message: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(DataError::ParseError { line, message: format!("expected 2 fields, got {}", record.len()) });
        }
        let label: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| DataError::ParseError { line, message: format!("label {:?} is not an integer", &record[1]) })?;
        if label >= classes {
            return Err(DataError::LabelOutOfRange { line, label, classes });
        }
        items.push(Item { text: record[0].to_string(), label });
    }
    let name = path.file_stem().map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset { name, source: DataSource::Csv, classes, items })
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let io = |e: &dyn fmt::Display| DataError::Io { path: path.display().to_string(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    w.write_record(["text", "label"]).map_err(|e| io(&e))?;
    for it in &dataset.items {
        w.write_record([it.text.as_str(), &it.label.to_string()]).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Hashed bag-of-words, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHasher {
    dims: usize,
}

impl FeatureHasher {
    pub fn new(dims: usize) -> Result<Self, DataError> {
        if !dims.is_power_of_two() {
            return Err(DataError::InvalidDims(dims));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn vectorize(&self, text: &str) -> SparseVec {
        let mask = self.dims as u64 - 1;
        let mut counts: Vec<(u32, f64)> = tokenize(text).map(|t| ((fnv1a64(t.as_bytes()) & mask) as u32, 1.0)).collect();
        counts.sort_by_key(|&(i, _)| i);
        let mut indices: Vec<u32> = Vec::with_capacity(counts.len());
        let mut values: Vec<f64> = Vec::with_capacity(counts.len());
        for (i, c) in counts {
            if indices.last() == Some(&i) {
                *values.last_mut().unwrap() += c;
            } else {
                indices.push(i);
                values.push(c);
            }
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        SparseVec::new(indices, values)
    }
}

/// Which items a forget request targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Selector {
    /// Seeded uniform sample of `round(fraction * n)` items.
    Random { fraction: f64 },
    Label(usize),
    /// Items containing this token (case-insensitive).
    Keyword(String),
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Random { fraction } => write!(f, "random:{fraction}"),
            Selector::Label(l) => write!(f, "label:{l}"),
            Selector::Keyword(k) => write!(f, "keyword:{k}"),
        }
    }
}

impl FromStr for Selector {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::InvalidSpec(format!("selector {s:?} is not label:N, keyword:W or random:F"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "label" => arg.parse().map(Selector::Label).map_err(|_| bad()),
            "keyword" if !arg.is_empty() => Ok(Selector::Keyword(arg.to_lowercase())),
            "random" => {
                let fraction: f64 = arg.parse().map_err(|_| bad())?;
                if !(0.0..1.0).contains(&fraction) {
                    return Err(DataError::InvalidSpec(format!("forget fraction {fraction} is outside [0, 1)")));
                }
                Ok(Selector::Random { fraction })
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for Selector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Selector {
    /// Membership mask over `items`.
    pub fn matches(&self, items: &[Item], seed: u64) -> Vec<bool> {
        match self {
            Selector::Label(l) => items.iter().map(|it| it.label == *l).collect(),
            Selector::Keyword(k) => items.iter().map(|it| tokenize(&it.text).any(|t| t == *k)).collect(),
            Selector::Random { fraction } => {
                let take = (fraction * items.len() as f64).round() as usize;
                let mut order: Vec<usize> = (0..items.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let mut mask = vec![false; items.len()];
                for &i in &order[..take.min(items.len())] {
                    mask[i] = true;
                }
                mask
            }
        }
    }

    pub fn validate(&self, classes: usize) -> Result<(), DataError> {
        match self {
            Selector::Label(l) if *l >= classes => {
                Err(DataError::InvalidSpec(format!("label {l} is outside [0, {classes})")))
            }
            Selector::Random { fraction } if !(0.0..1.0).contains(fraction) => {
                Err(DataError::InvalidSpec(format!("forget fraction {fraction} is outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

/// Disjoint, exhaustive split into (forget, retain), preserving item order.
pub fn split_forget(dataset: &Dataset, selector: &Selector, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    selector.validate(dataset.classes)?;
    let mask = selector.matches(&dataset.items, seed);
    let (mut forget, mut retain) = (Vec::new(), Vec::new());
    for (it, m) in dataset.items.iter().zip(mask) {
        if m {
            forget.push(it.clone());
        } else {
            retain.push(it.clone());
        }
    }
    if forget.is_empty() {
        return Err(DataError::EmptyForget);
    }
    Ok((dataset.subset("forget", forget), dataset.subset("retain", retain)))
}

const CLASS_WORDS: usize = 30;
const SHARED_WORDS: usize = 60;
const OWN_CLASS_P: f64 = 0.4;
const OTHER_CLASS_P: f64 = 0.1;

const SYLLABLES: [&str; 16] =
    ["ka", "lo", "mi", "ne", "ru", "sa", "te", "vi", "zo", "pa", "qu", "do", "fe", "gi", "hu", "ja"];

fn word(kind: usize, k: usize) -> String {
    let n = kind * 1000 + k;
    format!("{}{}{}", SYLLABLES[n % 16], SYLLABLES[(n / 16) % 16], SYLLABLES[(n / 256) % 16]) + &n.to_string()
}

fn class_word(class: usize, k: usize) -> String {
    word(class + 1, k)
}

fn shared_word(k: usize) -> String {
    word(0, k)
}

/// Class-correlated keyword sentences with balanced labels.
pub fn synth_gen(n: usize, classes: usize, seed: u64) -> Result<Dataset, DataError> {
    if classes == 0 || n < classes {
        return Err(DataError::TooFewItems { n, classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let items = labels
        .into_iter()
        .map(|label| {
            let len = rng.gen_range(8..=16);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    let u: f64 = rng.gen();
                    if u < OWN_CLASS_P {
                        class_word(label, rng.gen_range(0..CLASS_WORDS))
                    } else if u < OWN_CLASS_P + OTHER_CLASS_P && classes > 1 {
                        let other = (label + rng.gen_range(1..classes)) % classes;
                        class_word(other, rng.gen_range(0..CLASS_WORDS))
                    } else {
                        shared_word(rng.gen_range(0..SHARED_WORDS))
                    }
                })
                .collect();
            Item { text: words.join(" "), label }
        })
        .collect();
    Ok(Dataset { name: format!("synthetic-{seed}"), source: DataSource::Synthetic, classes, items })
}
