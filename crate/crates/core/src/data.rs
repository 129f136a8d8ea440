//! Record types shared by the objectives, probes and analyses.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sentence split as prefix `a` followed by one of three suffixes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixTriple {
    pub a: String,
    pub b: String,
    pub c: String,
    pub d: String,
}

impl PrefixTriple {
    pub fn new(a: impl Into<String>, b: impl Into<String>, c: impl Into<String>, d: impl Into<String>) -> Result<Self> {
        let t = Self { a: a.into(), b: b.into(), c: c.into(), d: d.into() };
        if t.a.is_empty() {
            return Err(Error::Config("triple prefix must be nonempty".into()));
        }
        Ok(t)
    }

    fn join(&self, suffix: &str) -> String {
        format!("{} {}", self.a, suffix)
    }

    pub fn query(&self) -> String {
        self.join(&self.b)
    }

    pub fn positive(&self) -> String {
        self.join(&self.c)
    }

    pub fn negative(&self) -> String {
        self.join(&self.d)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveExample {
    pub instruction: String,
    pub query: String,
    pub positive: String,
    pub hard_negatives: Vec<String>,
}

impl ContrastiveExample {
    pub fn new(
        instruction: impl Into<String>,
        query: impl Into<String>,
        positive: impl Into<String>,
        hard_negatives: Vec<String>,
    ) -> Result<Self> {
        let ex = Self { instruction: instruction.into(), query: query.into(), positive: positive.into(), hard_negatives };
        if ex.query.is_empty() || ex.positive.is_empty() {
            return Err(Error::Config("query and positive must be nonempty".into()));
        }
        Ok(ex)
    }
}

/// One sentence of a token-label corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub words: Vec<String>,
    pub labels: Vec<String>,
}

impl LabeledSentence {
    pub fn new(words: Vec<String>, labels: Vec<String>) -> Result<Self> {
        if words.len() != labels.len() || words.is_empty() {
            return Err(Error::Config(format!("{} words with {} labels", words.len(), labels.len())));
        }
        if words.iter().any(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
            return Err(Error::Config("words must be nonempty and contain no whitespace".into()));
        }
        Ok(Self { words, labels })
    }

    /// Words joined by single spaces; whitespace splitting recovers them.
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}
