//! Instruction datasets: schema, tokenizer, synthetic multilingual
//! benchmark generator, line-delimited file format and replay mixing.

pub mod io;
pub mod mix;
pub mod synth;
pub mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_dataset, save_dataset};
pub use mix::{mix, MixMode};
pub use synth::{synth_generate, Benchmark, BenchmarkSpec};
pub use vocab::Vocab;

pub const GENERATOR_VERSION: &str = "cftlab-synth/1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: unknown language tag `{tag}`")]
    UnknownLanguage { line: usize, tag: String },
    #[error("dataset {id}: metadata does not match contents ({detail})")]
    Integrity { id: String, detail: String },
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error("languages {a} and {b} share surface tokens: {tokens:?}")]
    OverlappingAlphabets { a: Lang, b: Lang, tokens: Vec<String> },
    #[error("family {family}: {requested} templates requested but only {capacity} exist")]
    CapacityExceeded {
        family: TaskFamily,
        requested: usize,
        capacity: u128,
    },
    #[error("replay dataset has {available} examples, {needed} needed")]
    ReplayTooSmall { needed: usize, available: usize },
    #[error("fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Language tag: `L0` is the English analog, `L1..Lk` are synthetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Lang(pub u8);

impl Lang {
    pub const EN: Lang = Lang(0);

    pub fn is_english(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

impl FromStr for Lang {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('L')
            .and_then(|n| n.parse::<u8>().ok())
            .map(Lang)
            .ok_or_else(|| format!("bad language tag `{s}`"))
    }
}

impl Serialize for Lang {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Lang {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    Copy,
    Reverse,
    KvLookup,
    SortDigits,
    ExtractFirst,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::Copy,
        TaskFamily::Reverse,
        TaskFamily::KvLookup,
        TaskFamily::SortDigits,
        TaskFamily::ExtractFirst,
    ];
    /// Alpaca-analog family set.
    pub const SET_A: [TaskFamily; 3] = [TaskFamily::Copy, TaskFamily::Reverse, TaskFamily::KvLookup];
    /// Instruct-analog family set, disjoint from `SET_A`.
    pub const SET_B: [TaskFamily; 2] = [TaskFamily::SortDigits, TaskFamily::ExtractFirst];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Copy => "copy",
            TaskFamily::Reverse => "reverse",
            TaskFamily::KvLookup => "kv-lookup",
            TaskFamily::SortDigits => "sort-digits",
            TaskFamily::ExtractFirst => "extract-first",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown task family `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub language: Lang,
    pub task_family: TaskFamily,
    pub template_id: u64,
}

impl Example {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.instruction.trim().is_empty() {
            return Err(CorpusError::InvalidExample("instruction is empty".into()));
        }
        Ok(())
    }

    /// Zero-shot prompt text: instruction then input.
    pub fn prompt_text(&self) -> String {
        if self.input.is_empty() {
            self.instruction.clone()
        } else {
            format!("{} {}", self.instruction, self.input)
        }
    }

    pub fn key(&self) -> (TaskFamily, u64) {
        (self.task_family, self.template_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub primary_id: String,
    pub replay_id: String,
    pub fraction: f64,
    pub replay_count: usize,
    pub mode: MixMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub id: String,
    pub languages: Vec<Lang>,
    pub language_histogram: BTreeMap<Lang, usize>,
    pub family_histogram: BTreeMap<TaskFamily, usize>,
    pub seed: u64,
    pub generator_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<Mixture>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub examples: Vec<Example>,
    pub metadata: Metadata,
}

pub fn histograms(examples: &[Example]) -> (BTreeMap<Lang, usize>, BTreeMap<TaskFamily, usize>) {
    let mut langs = BTreeMap::new();
    let mut fams = BTreeMap::new();
    for e in examples {
        *langs.entry(e.language).or_insert(0) += 1;
        *fams.entry(e.task_family).or_insert(0) += 1;
    }
    (langs, fams)
}

impl Dataset {
    /// Builds a dataset whose metadata is computed from its examples.
    /// Declared languages default to the ones present.
    pub fn new(id: impl Into<String>, examples: Vec<Example>, seed: u64) -> Self {
        let id = id.into();
        let (language_histogram, family_histogram) = histograms(&examples);
        let languages = language_histogram.keys().copied().collect();
        Self {
            metadata: Metadata {
                id: id.clone(),
                languages,
                language_histogram,
                family_histogram,
                seed,
                generator_version: GENERATOR_VERSION.to_string(),
                provenance: None,
                mixture: None,
            },
            id,
            examples,
        }
    }

    pub fn with_languages(mut self, languages: impl IntoIterator<Item = Lang>) -> Self {
        let mut set: BTreeSet<Lang> = languages.into_iter().collect();
        set.extend(self.metadata.language_histogram.keys().copied());
        self.metadata.languages = set.into_iter().collect();
        self
    }

    pub fn with_provenance(mut self, tag: impl Into<String>) -> Self {
        self.metadata.provenance = Some(tag.into());
        self
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Recomputes histograms and checks them (and every example) against
    /// the metadata.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let (langs, fams) = histograms(&self.examples);
        if langs != self.metadata.language_histogram {
            return Err(CorpusError::Integrity {
                id: self.id.clone(),
                detail: format!(
                    "language histogram {:?} vs metadata {:?}",
                    langs, self.metadata.language_histogram
                ),
            });
        }
        if fams != self.metadata.family_histogram {
            return Err(CorpusError::Integrity {
                id: self.id.clone(),
                detail: format!(
                    "family histogram {:?} vs metadata {:?}",
                    fams, self.metadata.family_histogram
                ),
            });
        }
        if self.metadata.id != self.id {
            return Err(CorpusError::Integrity {
                id: self.id.clone(),
                detail: format!("metadata id {}", self.metadata.id),
            });
        }
        for e in &self.examples {
            e.validate()?;
            if !self.metadata.languages.contains(&e.language) {
                return Err(CorpusError::Integrity {
                    id: self.id.clone(),
                    detail: format!("language {} not declared", e.language),
                });
            }
        }
        Ok(())
    }

    /// Examples restricted to one language and family, keeping order.
    pub fn filter(&self, id: impl Into<String>, pred: impl Fn(&Example) -> bool) -> Dataset {
        let ex = self.examples.iter().filter(|e| pred(e)).cloned().collect();
        Dataset::new(id, ex, self.metadata.seed).with_languages(self.metadata.languages.clone())
    }

    /// Distinct `(language, family)` pairs, sorted.
    pub fn cells(&self) -> Vec<(Lang, TaskFamily)> {
        let set: BTreeSet<(Lang, TaskFamily)> =
            self.examples.iter().map(|e| (e.language, e.task_family)).collect();
        set.into_iter().collect()
    }
}
