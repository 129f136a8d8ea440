//! Seeded generators for the desk-scale corpora.
//!
//! All corpora draw from one closed vocabulary of short pseudo-words split
//! into four classes, so a small BPE vocabulary turns every word into a
//! single token.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{ContrastiveExample, LabeledSentence, PrefixTriple};
use crate::rng::Rng;

/// Words of class `k` are `WORDS[3k..3k+3]`.
pub const WORDS: [&str; 12] = ["ka", "ko", "ku", "li", "lo", "lu", "mi", "mo", "mu", "ta", "te", "to"];
pub const N_CLASSES: usize = 4;
pub const NONE_LABEL: &str = "NONE";

pub fn word_class(word: usize) -> usize {
    word / 3
}

pub fn class_label(class: usize) -> String {
    format!("C{class}")
}

fn random_words(rng: &mut Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(WORDS.len())).collect()
}

fn join(words: &[usize]) -> String {
    words.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ")
}

/// Sentences that repeat a short random pattern of 2 to 4 words until they
/// hold 8 to 16 words, so every word is fixed by its neighbours.
pub fn periodic_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let period = 2 + rng.below(3);
            let pattern = random_words(&mut rng, period);
            let len = 8 + rng.below(9);
            let words: Vec<usize> = (0..len).map(|i| pattern[i % period]).collect();
            join(&words)
        })
        .collect()
}

/// Sentences of 4 to 12 independent uniform words.
pub fn iid_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let len = 4 + rng.below(9);
            join(&random_words(&mut rng, len))
        })
        .collect()
}

/// NEXT-TOKEN task: each word is labeled with the class of the word after
/// it; the last word is labeled `NONE`. Words are independent, so nothing
/// before a word predicts its label.
pub fn next_token_corpus(n: usize, seed: u64) -> Vec<LabeledSentence> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let len = 4 + rng.below(9);
            let ws = random_words(&mut rng, len);
            let words = ws.iter().map(|&w| String::from(WORDS[w])).collect();
            let labels = (0..len)
                .map(|i| if i + 1 < len { class_label(word_class(ws[i + 1])) } else { String::from(NONE_LABEL) })
                .collect();
            LabeledSentence::new(words, labels).expect("generated words are valid")
        })
        .collect()
}

/// Triples whose positive suffix starts with the same word as the query
/// suffix while the negative suffix starts with a different word; the rest
/// of every suffix is random.
pub fn prefix_triples(n: usize, seed: u64) -> Vec<PrefixTriple> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let a_len = 3 + rng.below(3);
            let a = random_words(&mut rng, a_len);
            let first = rng.below(WORDS.len());
            let other = (first + 1 + rng.below(WORDS.len() - 1)) % WORDS.len();
            let suffix = |rng: &mut Rng, head: usize| {
                let mut s = alloc::vec![head];
                let tail_len = 2 + rng.below(3);
                s.extend(random_words(rng, tail_len));
                join(&s)
            };
            let b = suffix(&mut rng, first);
            let c = suffix(&mut rng, first);
            let d = suffix(&mut rng, other);
            PrefixTriple::new(join(&a), b, c, d).expect("prefix is nonempty")
        })
        .collect()
}

/// Retrieval pairs: the positive holds the query's words in reverse order;
/// the hard negative shares the query's first word.
pub fn contrastive_examples(n: usize, seed: u64, instruction: &str) -> Vec<ContrastiveExample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let len = 4 + rng.below(5);
            let q = random_words(&mut rng, len);
            let mut p = q.clone();
            p.reverse();
            let mut neg = random_words(&mut rng, len);
            neg[0] = q[0];
            ContrastiveExample::new(instruction, join(&q), join(&p), alloc::vec![join(&neg)])
                .expect("generated texts are nonempty")
        })
        .collect()
}

/// Sentence pairs scored 0 to 5 by the share of positions left unchanged
/// when a random subset of words is replaced.
pub fn sts_pairs(n: usize, seed: u64) -> Vec<(String, String, f64)> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let len = 5 + rng.below(5);
            let a = random_words(&mut rng, len);
            let changed = rng.below(len + 1);
            let mut order: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut order);
            let mut b = a.clone();
            for &i in &order[..changed] {
                b[i] = (a[i] + 1 + rng.below(WORDS.len() - 1)) % WORDS.len();
            }
            let score = 5.0 * (len - changed) as f64 / len as f64;
            (join(&a), join(&b), score)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        assert_eq!(periodic_corpus(5, 1), periodic_corpus(5, 1));
        assert_ne!(iid_corpus(5, 1), iid_corpus(5, 2));
        assert_eq!(prefix_triples(3, 4), prefix_triples(3, 4));
    }

    #[test]
    fn periodic_sentences_repeat() {
        for s in periodic_corpus(50, 0) {
            let w: Vec<&str> = s.split(' ').collect();
            assert!((8..=16).contains(&w.len()));
            let period = (2..=4).find(|&p| (p..w.len()).all(|i| w[i] == w[i - p]));
            assert!(period.is_some(), "{s}");
        }
    }

    #[test]
    fn next_token_labels() {
        for s in next_token_corpus(20, 3) {
            let n = s.words.len();
            assert_eq!(s.labels[n - 1], NONE_LABEL);
            for i in 0..n - 1 {
                let w = WORDS.iter().position(|&x| x == s.words[i + 1]).unwrap();
                assert_eq!(s.labels[i], class_label(word_class(w)));
            }
        }
    }

    #[test]
    fn sts_scores_count_unchanged_words() {
        for (a, b, score) in sts_pairs(40, 2) {
            let wa: Vec<&str> = a.split(' ').collect();
            let wb: Vec<&str> = b.split(' ').collect();
            let same = wa.iter().zip(&wb).filter(|(x, y)| x == y).count();
            assert_eq!(score, 5.0 * same as f64 / wa.len() as f64);
        }
    }

    #[test]
    fn triple_suffix_heads() {
        for t in prefix_triples(30, 9) {
            let head = |s: &str| String::from(s.split(' ').next().unwrap());
            assert_eq!(head(&t.b), head(&t.c));
            assert_ne!(head(&t.b), head(&t.d));
        }
    }
}
