//! Prefix-triple similarity and layerwise causal-vs-bidirectional similarity.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::PrefixTriple;
use crate::error::{Error, Result};
use crate::graph::AttentionMode;
use crate::pool::{pool_inputs, EmbedInput, PoolingMode};
use crate::scalar::Real;
use crate::tensor::cosine_similarity;
use crate::tokenizer::{TokenId, Vocab, BOS, EOS};
use crate::transformer::{forward_batch, Encoder};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleSims {
    pub positive: f64,
    pub negative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleReport {
    pub pooling: PoolingMode,
    pub mode: AttentionMode,
    pub triples: Vec<TripleSims>,
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub separation: f64,
    pub fraction_correct: f64,
    /// Triples left out because a sentence exceeded the length budget.
    pub skipped: usize,
}

/// `BOS + sentence + EOS`, pooling over the tokens of the prefix only.
fn prefix_input(vocab: &Vocab, prefix: &str, sentence: &str, pooling: PoolingMode) -> Result<EmbedInput> {
    let full = vocab.encode(sentence, false, false).ids;
    let pre = vocab.encode(prefix, false, false).ids;
    if pre.is_empty() || !full.starts_with(&pre) {
        return Err(Error::Index(format!("prefix {prefix:?} does not tokenize as a prefix of {sentence:?}")));
    }
    let mut tokens = Vec::with_capacity(full.len() + 2);
    tokens.push(BOS);
    tokens.extend_from_slice(&full);
    tokens.push(EOS);
    let region: Vec<usize> = (1..=pre.len()).collect();
    let pooled = match pooling {
        PoolingMode::Eos => alloc::vec![pre.len()],
        _ => region,
    };
    Ok(EmbedInput { tokens, pooled })
}

/// For each triple, embeds `A B`, `A C` and `A D` pooling over `A` only and
/// compares the query with the positive and the negative.
pub fn prefix_triple_similarity<S: Real, E: Encoder<S> + ?Sized>(
    enc: &E,
    vocab: &Vocab,
    triples: &[PrefixTriple],
    pooling: PoolingMode,
    mode: AttentionMode,
) -> Result<TripleReport> {
    let max = enc.config().max_seq_len;
    let mut sims = Vec::with_capacity(triples.len());
    let mut skipped = 0;
    for t in triples {
        let inputs = [t.query(), t.positive(), t.negative()]
            .iter()
            .map(|s| prefix_input(vocab, &t.a, s, pooling))
            .collect::<Result<Vec<_>>>()?;
        if inputs.iter().any(|i| i.tokens.len() > max) {
            skipped += 1;
            continue;
        }
        let z = pool_inputs(enc, &inputs, pooling, mode)?;
        sims.push(TripleSims {
            positive: cosine_similarity(&z[0].vector, &z[1].vector)?,
            negative: cosine_similarity(&z[0].vector, &z[2].vector)?,
        });
    }
    if sims.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = sims.len() as f64;
    let mean_positive = sims.iter().map(|s| s.positive).sum::<f64>() / n;
    let mean_negative = sims.iter().map(|s| s.negative).sum::<f64>() / n;
    let fraction_correct = sims.iter().filter(|s| s.positive > s.negative).count() as f64 / n;
    Ok(TripleReport {
        pooling,
        mode,
        triples: sims,
        mean_positive,
        mean_negative,
        separation: mean_positive - mean_negative,
        fraction_correct,
        skipped,
    })
}

/// `values[l][t]` = cosine between the causal and bidirectional hidden
/// state of position `t` at layer `l` (layer 0 is the embedding output).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimMatrix {
    pub values: Vec<Vec<f64>>,
}

impl LayerSimMatrix {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn n_positions(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, layer: usize, pos: usize) -> f64 {
        self.values[layer][pos]
    }
}

/// Layerwise similarity of `BOS + text` under the two attention masks.
pub fn layerwise_mask_similarity<S: Real, E: Encoder<S> + ?Sized>(enc: &E, vocab: &Vocab, text: &str) -> Result<LayerSimMatrix> {
    let seq = vocab.encode(text, true, false);
    layerwise_mask_similarity_tokens(enc, &seq.ids)
}

pub fn layerwise_mask_similarity_tokens<S: Real, E: Encoder<S> + ?Sized>(enc: &E, tokens: &[TokenId]) -> Result<LayerSimMatrix> {
    let causal = forward_batch(enc, &[tokens], AttentionMode::Causal)?;
    let bi = forward_batch(enc, &[tokens], AttentionMode::Bidirectional)?;
    let values = causal
        .hidden
        .iter()
        .zip(&bi.hidden)
        .map(|(hc, hb)| (0..tokens.len()).map(|t| cosine_similarity(hc.row(t), hb.row(t))).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerSimMatrix { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{Model, ModelConfig};

    fn model() -> Model<f32> {
        let cfg = ModelConfig { vocab_size: 260, d_model: 16, n_heads: 2, n_layers: 4, d_ff: 32, max_seq_len: 48, ..Default::default() };
        Model::init_with_std(cfg, 11, 0.2).unwrap()
    }

    #[test]
    fn degenerate_triples() {
        let m = model();
        let v = Vocab::bytes_only();
        let same_cd = PrefixTriple::new("ab c", "x y", "p q", "p q").unwrap();
        let same_bc = PrefixTriple::new("ab c", "x y", "x y", "p q").unwrap();
        let r = prefix_triple_similarity(&m, &v, &[same_cd, same_bc], PoolingMode::Mean, AttentionMode::Bidirectional).unwrap();
        assert_eq!(r.triples[0].positive, r.triples[0].negative);
        assert_eq!(r.triples[1].positive, 1.0);
    }

    #[test]
    fn causal_triples_do_not_separate() {
        let m = model();
        let v = Vocab::bytes_only();
        let t = PrefixTriple::new("the cat", "sat down", "sat", "ran off far").unwrap();
        for pooling in [PoolingMode::Mean, PoolingMode::WeightedMean, PoolingMode::Eos] {
            let r = prefix_triple_similarity(&m, &v, core::slice::from_ref(&t), pooling, AttentionMode::Causal).unwrap();
            assert_eq!(r.separation, 0.0);
            assert_eq!(r.triples[0].positive, 1.0);
        }
        let bi = prefix_triple_similarity(&m, &v, &[t], PoolingMode::Mean, AttentionMode::Bidirectional).unwrap();
        assert!(bi.triples[0].positive < 1.0);
    }

    #[test]
    fn overlong_triples_are_skipped() {
        let m = model();
        let v = Vocab::bytes_only();
        let long = PrefixTriple::new("a", "b".repeat(60), "c", "d").unwrap();
        let ok = PrefixTriple::new("a", "b", "c", "d").unwrap();
        let r = prefix_triple_similarity(&m, &v, &[long, ok], PoolingMode::Mean, AttentionMode::Causal).unwrap();
        assert_eq!((r.skipped, r.triples.len()), (1, 1));
    }

    #[test]
    fn layer_matrix_structure() {
        let m = model();
        let v = Vocab::bytes_only();
        let r = layerwise_mask_similarity(&m, &v, "fifteen letters").unwrap();
        assert_eq!(r.n_layers(), 5);
        assert_eq!(r.n_positions(), 16);
        assert!(r.values[0].iter().all(|&x| x == 1.0));
        assert!((r.get(1, 15) - 1.0).abs() < 1e-6);
        assert!(r.get(1, 0) < 1.0 - 1e-4);
        let one = layerwise_mask_similarity_tokens(&m, &[BOS]).unwrap();
        assert!(one.values.iter().all(|row| row == &[1.0]));
    }
}
