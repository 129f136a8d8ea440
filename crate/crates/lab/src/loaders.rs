//! Readers for the four corpus formats.
//!
//! Every parser works on a string so it can be tested without files; the
//! `load_*` wrappers add the path to errors. Line numbers are 1-based.

use std::fs;
use std::path::{Path, PathBuf};

use enclab_core::data::{ContrastiveExample, LabeledSentence, PrefixTriple};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}line {line}: {reason}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Parse { path: Option<PathBuf>, line: usize, reason: String },
}

impl LoadError {
    pub fn line(&self) -> Option<usize> {
        match self {
            LoadError::Parse { line, .. } => Some(*line),
            LoadError::Io { .. } => None,
        }
    }
}

fn parse_err(line: usize, reason: impl Into<String>) -> LoadError {
    LoadError::Parse { path: None, line, reason: reason.into() }
}

fn with_path<T>(path: &Path, parse: impl FnOnce(&str) -> Result<T, LoadError>) -> Result<T, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })?;
    parse(&text).map_err(|e| match e {
        LoadError::Parse { line, reason, .. } => LoadError::Parse { path: Some(path.to_path_buf()), line, reason },
        other => other,
    })
}

fn numbered(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
}

/// One sentence per line; blank lines are skipped.
pub fn parse_sentences(text: &str) -> Result<Vec<String>, LoadError> {
    Ok(numbered(text).filter(|(_, l)| !l.trim().is_empty()).map(|(_, l)| l.to_string()).collect())
}

/// `token<TAB>label` per line with blank lines between sentences.
pub fn parse_token_labels(text: &str) -> Result<Vec<LabeledSentence>, LoadError> {
    let mut out = Vec::new();
    let mut words = Vec::new();
    let mut labels = Vec::new();
    let mut start = 0;
    let mut flush = |words: &mut Vec<String>, labels: &mut Vec<String>, line: usize| -> Result<(), LoadError> {
        if !words.is_empty() {
            let s = LabeledSentence::new(std::mem::take(words), std::mem::take(labels)).map_err(|e| parse_err(line, e.to_string()))?;
            out.push(s);
        }
        Ok(())
    };
    for (n, line) in numbered(text) {
        if line.trim().is_empty() {
            flush(&mut words, &mut labels, start)?;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(n, format!("expected 2 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[0].chars().any(char::is_whitespace) {
            return Err(parse_err(n, format!("token {:?} must be nonempty without whitespace", fields[0])));
        }
        if fields[1].is_empty() {
            return Err(parse_err(n, "empty label"));
        }
        if words.is_empty() {
            start = n;
        }
        words.push(fields[0].to_string());
        labels.push(fields[1].to_string());
    }
    flush(&mut words, &mut labels, start)?;
    Ok(out)
}

fn tsv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    numbered(text).filter(|(_, l)| !l.is_empty()).map(|(n, l)| (n, l.split('\t').collect()))
}

/// Four tab-separated columns `A B C D`.
pub fn parse_triples(text: &str) -> Result<Vec<PrefixTriple>, LoadError> {
    tsv_rows(text)
        .map(|(n, f)| {
            if f.len() != 4 {
                return Err(parse_err(n, format!("expected 4 columns, found {}", f.len())));
            }
            PrefixTriple::new(f[0], f[1], f[2], f[3]).map_err(|e| parse_err(n, e.to_string()))
        })
        .collect()
}

/// `instruction query positive [negative ...]`, tab separated.
pub fn parse_contrastive(text: &str) -> Result<Vec<ContrastiveExample>, LoadError> {
    tsv_rows(text)
        .map(|(n, f)| {
            if f.len() < 3 {
                return Err(parse_err(n, format!("expected at least 3 columns, found {}", f.len())));
            }
            let negatives: Vec<String> = f[3..].iter().map(|s| s.to_string()).collect();
            if negatives.iter().any(String::is_empty) {
                return Err(parse_err(n, "empty hard negative"));
            }
            ContrastiveExample::new(f[0], f[1], f[2], negatives).map_err(|e| parse_err(n, e.to_string()))
        })
        .collect()
}

/// `sentence1 sentence2 score`, tab separated.
pub fn parse_sts(text: &str) -> Result<Vec<(String, String, f64)>, LoadError> {
    tsv_rows(text)
        .map(|(n, f)| {
            if f.len() != 3 {
                return Err(parse_err(n, format!("expected 3 columns, found {}", f.len())));
            }
            let score: f64 = f[2].trim().parse().map_err(|_| parse_err(n, format!("bad score {:?}", f[2])))?;
            if !score.is_finite() || f[0].is_empty() || f[1].is_empty() {
                return Err(parse_err(n, "sentences must be nonempty and the score finite"));
            }
            Ok((f[0].to_string(), f[1].to_string(), score))
        })
        .collect()
}

pub fn load_sentences(path: &Path) -> Result<Vec<String>, LoadError> {
    with_path(path, parse_sentences)
}

pub fn load_token_labels(path: &Path) -> Result<Vec<LabeledSentence>, LoadError> {
    with_path(path, parse_token_labels)
}

pub fn load_triples(path: &Path) -> Result<Vec<PrefixTriple>, LoadError> {
    with_path(path, parse_triples)
}

pub fn load_contrastive(path: &Path) -> Result<Vec<ContrastiveExample>, LoadError> {
    with_path(path, parse_contrastive)
}

pub fn load_sts(path: &Path) -> Result<Vec<(String, String, f64)>, LoadError> {
    with_path(path, parse_sts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences() {
        assert_eq!(parse_sentences("a b\nc\r\nd e f\n").unwrap(), vec!["a b", "c", "d e f"]);
    }

    #[test]
    fn conll() {
        let s = parse_token_labels("the\tDET\ncat\tNOUN\n\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].words, vec!["the", "cat"]);
        assert_eq!(s[0].labels, vec!["DET", "NOUN"]);
        let two = parse_token_labels("a\tX\n\n\nb\tY\nc\tZ").unwrap();
        assert_eq!(two.len(), 2);
        let e = parse_token_labels("a\tX\nb\tY\tZ\n").unwrap_err();
        assert_eq!(e.line(), Some(2));
        assert_eq!(parse_token_labels("a\tX\nb\n").unwrap_err().line(), Some(2));
    }

    #[test]
    fn triples() {
        let t = parse_triples("A\tB\tC\tD\n").unwrap();
        assert_eq!(t, vec![PrefixTriple::new("A", "B", "C", "D").unwrap()]);
        assert_eq!(parse_triples("A\tB\tC\tD\nA\tB\tC\n").unwrap_err().line(), Some(2));
        assert_eq!(parse_triples("\tB\tC\tD\n").unwrap_err().line(), Some(1));
    }

    #[test]
    fn contrastive() {
        let c = parse_contrastive("\tq\tp\n\tq\tp\tn1\tn2\n").unwrap();
        assert!(c[0].hard_negatives.is_empty());
        assert_eq!(c[1].hard_negatives, vec!["n1", "n2"]);
        assert_eq!(parse_contrastive("i\tq\n").unwrap_err().line(), Some(1));
    }

    #[test]
    fn sts() {
        let s = parse_sts("a\tb\t4.5\n").unwrap();
        assert_eq!(s[0].2, 4.5);
        assert_eq!(parse_sts("a\tb\tx\n").unwrap_err().line(), Some(1));
    }

    #[test]
    fn path_appears_in_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        fs::write(&p, "x\ty\n").unwrap();
        let msg = load_triples(&p).unwrap_err().to_string();
        assert!(msg.contains("t.tsv") && msg.contains("line 1"), "{msg}");
        assert!(matches!(load_sentences(&dir.path().join("missing")), Err(LoadError::Io { .. })));
    }
}
