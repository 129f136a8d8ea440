//! Text format for trained BPE vocabularies.
//!
//! ```text
//! L2V-BPE v1
//! <vocab_size>
//! <token> <token>      one merge per line, in training order
//! #specials
//! 0 <bos>
//! ...
//! ```
//!
//! Token bytes are written with the printable byte-to-char table used by
//! GPT-2, so spaces and control bytes never appear inside a token string.

use std::collections::HashMap;
use std::sync::OnceLock;

use enclab_core::tokenizer::{TokenId, Vocab, BYTE_BASE, MIN_VOCAB, NUM_SPECIAL, SPECIAL_NAMES};

pub const HEADER: &str = "L2V-BPE v1";
const SPECIALS_MARK: &str = "#specials";

#[derive(Debug, thiserror::Error)]
#[error("vocab file line {line}: {reason}")]
pub struct VocabFileError {
    pub line: usize,
    pub reason: String,
}

fn err(line: usize, reason: impl Into<String>) -> VocabFileError {
    VocabFileError { line, reason: reason.into() }
}

fn byte_table() -> &'static ([char; 256], HashMap<char, u8>) {
    static TABLE: OnceLock<([char; 256], HashMap<char, u8>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let printable = |b: u8| matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        let mut fwd = ['\0'; 256];
        let mut extra = 0u32;
        for b in 0..=255u8 {
            fwd[b as usize] = if printable(b) {
                char::from(b)
            } else {
                extra += 1;
                char::from_u32(255 + extra).expect("valid code point")
            };
        }
        let back = fwd.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        (fwd, back)
    })
}

fn render(bytes: &[u8]) -> String {
    let (fwd, _) = byte_table();
    bytes.iter().map(|&b| fwd[b as usize]).collect()
}

fn unrender(s: &str, line: usize) -> Result<Vec<u8>, VocabFileError> {
    let (_, back) = byte_table();
    s.chars().map(|c| back.get(&c).copied().ok_or_else(|| err(line, format!("character {c:?} is not a byte symbol")))).collect()
}

pub fn write_vocab(vocab: &Vocab) -> String {
    let mut out = format!("{HEADER}\n{}\n", vocab.vocab_size());
    for &(a, b) in vocab.merges() {
        let tok = |id: TokenId| render(vocab.token_bytes(id).expect("merge ids are in range"));
        out.push_str(&format!("{} {}\n", tok(a), tok(b)));
    }
    out.push_str(SPECIALS_MARK);
    out.push('\n');
    for (id, name) in SPECIAL_NAMES.iter().enumerate() {
        out.push_str(&format!("{id} {name}\n"));
    }
    out
}

pub fn parse_vocab(text: &str) -> Result<Vocab, VocabFileError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, HEADER)) => {}
        _ => return Err(err(1, format!("expected header {HEADER:?}"))),
    }
    let (n, size_line) = lines.next().ok_or_else(|| err(2, "missing vocab size"))?;
    let vocab_size: usize = size_line.trim().parse().map_err(|_| err(n, format!("bad vocab size {size_line:?}")))?;

    let mut ids: HashMap<Vec<u8>, TokenId> = (0..=255u8).map(|b| (vec![b], (BYTE_BASE + b as usize) as TokenId)).collect();
    let mut merges = Vec::new();
    let mut specials_seen = false;
    for (n, line) in lines.by_ref() {
        if line == SPECIALS_MARK {
            specials_seen = true;
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 2 {
            return Err(err(n, format!("expected 2 tokens, found {}", parts.len())));
        }
        let a = unrender(parts[0], n)?;
        let b = unrender(parts[1], n)?;
        let id = |bytes: &Vec<u8>| ids.get(bytes).copied().ok_or_else(|| err(n, format!("unknown token {:?}", render(bytes))));
        let pair = (id(&a)?, id(&b)?);
        let mut joined = a;
        joined.extend_from_slice(&b);
        let new_id = (MIN_VOCAB + merges.len()) as TokenId;
        if ids.insert(joined, new_id).is_some() {
            return Err(err(n, "merge repeats an existing token"));
        }
        merges.push(pair);
    }
    if !specials_seen {
        return Err(err(text.lines().count() + 1, format!("missing {SPECIALS_MARK} section")));
    }
    let mut count = 0;
    for (n, line) in lines {
        let (id, name) = line.split_once(' ').ok_or_else(|| err(n, "expected `<id> <name>`"))?;
        let id: usize = id.parse().map_err(|_| err(n, format!("bad special id {id:?}")))?;
        if id >= NUM_SPECIAL || SPECIAL_NAMES[id] != name || id != count {
            return Err(err(n, format!("special table entry {line:?} does not match the reserved ids")));
        }
        count += 1;
    }
    if count != NUM_SPECIAL {
        return Err(err(text.lines().count(), format!("expected {NUM_SPECIAL} special tokens, found {count}")));
    }
    Vocab::from_merges(merges, vocab_size).map_err(|e| err(2, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use enclab_core::tokenizer::train_bpe;

    #[test]
    fn byte_table_is_a_bijection() {
        let (fwd, back) = byte_table();
        assert_eq!(back.len(), 256);
        assert!(fwd.iter().all(|c| !c.is_whitespace()));
        assert_eq!(fwd[b'a' as usize], 'a');
        assert_eq!(fwd[b' ' as usize], '\u{120}');
    }

    #[test]
    fn round_trip() {
        let corpus = ["the cat sat on the mat", "the dog sat\ton a log", "über naïve café"];
        let v = train_bpe(corpus.iter().copied(), 300, 1).unwrap();
        let text = write_vocab(&v);
        assert!(text.starts_with("L2V-BPE v1\n300\n"));
        let back = parse_vocab(&text).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn malformed_lines_name_their_number() {
        let bad = "L2V-BPE v1\n262\na b c\n#specials\n";
        assert_eq!(parse_vocab(bad).unwrap_err().line, 3);
        let unknown = "L2V-BPE v1\n262\nab c\n#specials\n";
        assert_eq!(parse_vocab(unknown).unwrap_err().line, 3);
        assert_eq!(parse_vocab("nope").unwrap_err().line, 1);
        let specials = "L2V-BPE v1\n260\n#specials\n0 <bos>\n1 <mask>\n";
        assert_eq!(parse_vocab(specials).unwrap_err().line, 5);
    }
}
