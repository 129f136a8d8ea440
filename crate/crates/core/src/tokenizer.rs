//! Byte-level BPE with four reserved special ids.
//!
//! Text is first split into chunks of (leading whitespace, word); merges
//! never cross a chunk boundary, so the tokens of a prefix do not depend on
//! what follows it after whitespace.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const MASK: TokenId = 2;
pub const PAD: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;
/// Id of byte `b` is `BYTE_BASE + b`.
pub const BYTE_BASE: usize = NUM_SPECIAL;
pub const MIN_VOCAB: usize = NUM_SPECIAL + 256;

pub const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["<bos>", "<eos>", "<mask>", "<pad>"];

#[inline]
pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    /// Merge list in training order; merge `r` creates id `MIN_VOCAB + r`.
    merges: Vec<(TokenId, TokenId)>,
    /// Byte content per id; specials and reserved padding ids are empty.
    tokens: Vec<Vec<u8>>,
    token_to_id: BTreeMap<Vec<u8>, TokenId>,
    ranks: BTreeMap<(TokenId, TokenId), usize>,
    size: usize,
}

/// Token ids with the byte range of the source text each one covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Per-token byte range; specials get an empty range at their position.
    pub spans: Vec<Range<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Splits text into `(whitespace*)(non-whitespace+)` chunks; a trailing run
/// of whitespace forms its own chunk.
pub fn chunks(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                out.push(start..i);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        out.push(start..text.len());
    }
    out
}

/// Byte ranges of whitespace-delimited words.
pub fn word_ranges(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..text.len());
    }
    out
}

fn tie_key(seed: u64, pair: (TokenId, TokenId)) -> u64 {
    // FNV-1a over (seed, a, b)
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().iter().chain(&pair.0.to_le_bytes()).chain(&pair.1.to_le_bytes()) {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Learns `vocab_size - 260` merges from `corpus`.
///
/// The most frequent adjacent pair is merged first; equal counts are ordered
/// by a hash of `(seed, pair)`. If the corpus runs out of pairs before the
/// budget is spent, the remaining ids are reserved and never emitted.
pub fn train_bpe<'a, I>(corpus: I, vocab_size: usize, seed: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if vocab_size < MIN_VOCAB {
        return Err(Error::Config(format!("vocab_size must be at least {MIN_VOCAB}, got {vocab_size}")));
    }
    let mut words: BTreeMap<Vec<TokenId>, usize> = BTreeMap::new();
    let mut any = false;
    for line in corpus {
        for r in chunks(line) {
            any = true;
            let ids = line.as_bytes()[r].iter().map(|&b| (BYTE_BASE + b as usize) as TokenId).collect();
            *words.entry(ids).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(Vec<TokenId>, usize)> = words.into_iter().collect();
    let mut merges = Vec::new();
    let mut token_bytes: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIAL];
    token_bytes.extend((0..=255u8).map(|b| vec![b]));
    let mut known: BTreeSet<Vec<u8>> = token_bytes.iter().skip(NUM_SPECIAL).cloned().collect();
    let budget = vocab_size - MIN_VOCAB;
    while merges.len() < budget {
        let mut counts: BTreeMap<(TokenId, TokenId), usize> = BTreeMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_insert(0) += c;
            }
        }
        let concat = |&(a, b): &(TokenId, TokenId)| {
            let mut v = token_bytes[a as usize].clone();
            v.extend_from_slice(&token_bytes[b as usize]);
            v
        };
        // a pair spelling an existing token would give one string two ids
        let Some((&best, _)) = counts
            .iter()
            .filter(|(p, _)| !known.contains(&concat(p)))
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| tie_key(seed, **pb).cmp(&tie_key(seed, **pa))))
        else {
            break;
        };
        let new_id = (MIN_VOCAB + merges.len()) as TokenId;
        let bytes = concat(&best);
        known.insert(bytes.clone());
        token_bytes.push(bytes);
        merges.push(best);
        for (w, _) in &mut words {
            merge_in_place(w, best, new_id);
        }
    }
    Vocab::from_merges(merges, vocab_size)
}

fn merge_in_place(w: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) {
    if w.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && w[i] == pair.0 && w[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    *w = out;
}

impl Vocab {
    /// Rebuilds a vocabulary from its merge list.
    pub fn from_merges(merges: Vec<(TokenId, TokenId)>, vocab_size: usize) -> Result<Self> {
        if vocab_size < MIN_VOCAB + merges.len() {
            return Err(Error::Config(format!(
                "{} merges do not fit a vocabulary of {vocab_size}",
                merges.len()
            )));
        }
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIAL];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = BTreeMap::new();
        for (r, &(a, b)) in merges.iter().enumerate() {
            let next = tokens.len();
            if a as usize >= next || b as usize >= next || is_special(a) || is_special(b) {
                return Err(Error::Config(format!("merge {r} refers to unknown ids ({a}, {b})")));
            }
            let mut bytes = tokens[a as usize].clone();
            bytes.extend_from_slice(&tokens[b as usize]);
            tokens.push(bytes);
            if ranks.insert((a, b), r).is_some() {
                return Err(Error::Config(format!("duplicate merge ({a}, {b})")));
            }
        }
        tokens.resize(vocab_size, Vec::new());
        let mut token_to_id = BTreeMap::new();
        for (id, bytes) in tokens.iter().enumerate().skip(NUM_SPECIAL) {
            if !bytes.is_empty() {
                token_to_id.entry(bytes.clone()).or_insert(id as TokenId);
            }
        }
        Ok(Self { merges, tokens, token_to_id, ranks, size: vocab_size })
    }

    /// Byte-only tokenizer with no merges.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new(), MIN_VOCAB).expect("byte vocabulary")
    }

    pub fn vocab_size(&self) -> usize {
        self.size
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|v| v.as_slice())
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.token_to_id.get(bytes).copied()
    }

    /// Ids that plain text can produce: bytes and merged tokens.
    pub fn regular_ids(&self) -> Range<TokenId> {
        NUM_SPECIAL as TokenId..(MIN_VOCAB + self.merges.len()) as TokenId
    }

    pub fn encode(&self, text: &str, add_bos: bool, add_eos: bool) -> TokenSequence {
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        if add_bos {
            ids.push(BOS);
            spans.push(0..0);
        }
        for chunk in chunks(text) {
            self.encode_chunk(text.as_bytes(), chunk, &mut ids, &mut spans);
        }
        if add_eos {
            ids.push(EOS);
            spans.push(text.len()..text.len());
        }
        TokenSequence { ids, spans }
    }

    fn encode_chunk(&self, bytes: &[u8], chunk: Range<usize>, ids: &mut Vec<TokenId>, spans: &mut Vec<Range<usize>>) {
        let mut parts: Vec<(TokenId, Range<usize>)> =
            chunk.clone().map(|i| ((BYTE_BASE + bytes[i] as usize) as TokenId, i..i + 1)).collect();
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].0, w[1].0)).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let pair = self.merges[rank];
            let new_id = (MIN_VOCAB + rank) as TokenId;
            let mut out = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i].0 == pair.0 && parts[i + 1].0 == pair.1 {
                    out.push((new_id, parts[i].1.start..parts[i + 1].1.end));
                    i += 2;
                } else {
                    out.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = out;
        }
        for (id, span) in parts {
            ids.push(id);
            spans.push(span);
        }
    }

    /// Concatenates token bytes, skipping specials; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if !is_special(id) {
                if let Some(b) = self.tokens.get(id as usize) {
                    bytes.extend_from_slice(b);
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
