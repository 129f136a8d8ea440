//! Sequence embeddings from last-layer hidden states.
//!
//! An instruction is joined to its text by plain concatenation of the two
//! token streams; the instruction is located by token count only.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AttentionMode;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, Vocab, BOS, EOS};
use crate::transformer::{forward_batch, Encoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// The last included position (the appended EOS).
    Eos,
    Mean,
    /// Position-weighted mean, `w_k = k / (K(K+1)/2)` for the k-th included row.
    WeightedMean,
}

/// `(position, weight)` pairs for pooling over `positions`, kept in order.
pub fn pool_weights(positions: &[usize], mode: PoolingMode) -> Result<Vec<(usize, f64)>> {
    let k = positions.len();
    if k == 0 {
        return Err(Error::EmptyPool);
    }
    Ok(match mode {
        PoolingMode::Eos => alloc::vec![(positions[k - 1], 1.0)],
        PoolingMode::Mean => positions.iter().map(|&p| (p, 1.0 / k as f64)).collect(),
        PoolingMode::WeightedMean => {
            let total = (k * (k + 1)) as f64 / 2.0;
            positions.iter().enumerate().map(|(i, &p)| (p, (i + 1) as f64 / total)).collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledEmbedding<S: Real = f32> {
    pub vector: Vec<S>,
    pub included_positions: Vec<usize>,
}

/// Pools the rows of `hidden` selected by `include`.
pub fn pool<S: Real>(hidden: &Tensor<S>, include: &[bool], mode: PoolingMode) -> Result<PooledEmbedding<S>> {
    let (t, _) = hidden.dims2()?;
    if include.len() != t {
        return Err(Error::Shape(format!("include mask of {} for {t} rows", include.len())));
    }
    let positions: Vec<usize> = (0..t).filter(|&i| include[i]).collect();
    pool_positions(hidden, &positions, mode)
}

pub(crate) fn pool_positions<S: Real>(
    hidden: &Tensor<S>,
    positions: &[usize],
    mode: PoolingMode,
) -> Result<PooledEmbedding<S>> {
    let (t, d) = hidden.dims2()?;
    let weights = pool_weights(positions, mode)?;
    let mut vector = alloc::vec![S::zero(); d];
    for &(p, w) in &weights {
        if p >= t {
            return Err(Error::Index(format!("pool position {p} of {t}")));
        }
        let w = S::lit(w);
        for (o, &h) in vector.iter_mut().zip(hidden.row(p)) {
            *o += w * h;
        }
    }
    let included_positions = weights.iter().map(|&(p, _)| p).collect();
    Ok(PooledEmbedding { vector, included_positions })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    #[serde(default)]
    pub instruction: String,
    pub text: String,
    pub pooling: PoolingMode,
    pub mode: AttentionMode,
}

impl EmbeddingRequest {
    pub fn new(text: impl Into<String>, pooling: PoolingMode, mode: AttentionMode) -> Self {
        Self { instruction: String::new(), text: text.into(), pooling, mode }
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.instruction = instruction.into();
        self
    }
}

/// Token sequence for one embedding together with the positions pooled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedInput {
    pub tokens: Vec<TokenId>,
    pub pooled: Vec<usize>,
}

/// `BOS + instruction + text + EOS`, pooling over text and EOS. For
/// [`PoolingMode::Eos`] only the EOS position is used.
pub fn embed_input(vocab: &Vocab, instruction: &str, text: &str, pooling: PoolingMode) -> Result<EmbedInput> {
    if text.is_empty() {
        return Err(Error::EmptySequence);
    }
    let instr = vocab.encode(instruction, false, false).ids;
    let body = vocab.encode(text, false, false).ids;
    let mut tokens = Vec::with_capacity(instr.len() + body.len() + 2);
    tokens.push(BOS);
    tokens.extend_from_slice(&instr);
    let start = tokens.len();
    tokens.extend_from_slice(&body);
    tokens.push(EOS);
    let pooled = match pooling {
        PoolingMode::Eos => alloc::vec![tokens.len() - 1],
        _ => (start..tokens.len()).collect(),
    };
    Ok(EmbedInput { tokens, pooled })
}

/// `BOS + instr + text + instr + text + EOS`, pooling over the second copy
/// of the text (or the final EOS for [`PoolingMode::Eos`]).
pub fn echo_input(vocab: &Vocab, instruction: &str, text: &str, pooling: PoolingMode) -> Result<EmbedInput> {
    if text.is_empty() {
        return Err(Error::EmptySequence);
    }
    let instr = vocab.encode(instruction, false, false).ids;
    let body = vocab.encode(text, false, false).ids;
    let mut tokens = Vec::with_capacity(2 * (instr.len() + body.len()) + 2);
    tokens.push(BOS);
    for _ in 0..2 {
        tokens.extend_from_slice(&instr);
        tokens.extend_from_slice(&body);
    }
    let second = tokens.len() - body.len();
    tokens.push(EOS);
    let pooled = match pooling {
        PoolingMode::Eos => alloc::vec![tokens.len() - 1],
        _ => (second..tokens.len() - 1).collect(),
    };
    Ok(EmbedInput { tokens, pooled })
}

/// Embeds one request: forward without dropout in `req.mode`, then pool.
pub fn embed<S: Real, E: Encoder<S> + ?Sized>(enc: &E, vocab: &Vocab, req: &EmbeddingRequest) -> Result<PooledEmbedding<S>> {
    let input = embed_input(vocab, &req.instruction, &req.text, req.pooling)?;
    pool_inputs(enc, &[input], req.pooling, req.mode).map(|mut v| v.remove(0))
}

/// Echo-embedding baseline; only causal attention is accepted.
pub fn embed_echo<S: Real, E: Encoder<S> + ?Sized>(
    enc: &E,
    vocab: &Vocab,
    req: &EmbeddingRequest,
) -> Result<PooledEmbedding<S>> {
    if req.mode != AttentionMode::Causal {
        return Err(Error::Unsupported("echo embeddings are defined for causal attention only".into()));
    }
    let input = echo_input(vocab, &req.instruction, &req.text, req.pooling)?;
    pool_inputs(enc, &[input], req.pooling, req.mode).map(|mut v| v.remove(0))
}

/// Embeds many prepared inputs in one packed forward pass.
pub fn pool_inputs<S: Real, E: Encoder<S> + ?Sized>(
    enc: &E,
    inputs: &[EmbedInput],
    pooling: PoolingMode,
    mode: AttentionMode,
) -> Result<Vec<PooledEmbedding<S>>> {
    let seqs: Vec<&[TokenId]> = inputs.iter().map(|i| i.tokens.as_slice()).collect();
    let batch = forward_batch(enc, &seqs, mode)?;
    let last = batch.last_layer();
    inputs
        .iter()
        .enumerate()
        .map(|(i, input)| {
            let rows = batch.rows(last, i)?;
            pool_positions(&rows, &input.pooled, pooling)
        })
        .collect()
}

/// Embeds requests that share pooling and attention mode, in chunks so a
/// single packed pass stays small.
pub fn embed_many<S: Real, E: Encoder<S> + ?Sized>(
    enc: &E,
    vocab: &Vocab,
    instruction: &str,
    texts: &[&str],
    pooling: PoolingMode,
    mode: AttentionMode,
) -> Result<Vec<PooledEmbedding<S>>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(64) {
        let inputs = chunk
            .iter()
            .map(|t| embed_input(vocab, instruction, t, pooling))
            .collect::<Result<Vec<_>>>()?;
        out.extend(pool_inputs(enc, &inputs, pooling, mode)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{forward, Model, ModelConfig};
    use alloc::vec;

    fn rows() -> Tensor<f64> {
        Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap()
    }

    #[test]
    fn single_row_is_identity() {
        let t = Tensor::new(vec![1, 3], vec![0.5f64, -1.0, 2.0]).unwrap();
        for mode in [PoolingMode::Eos, PoolingMode::Mean, PoolingMode::WeightedMean] {
            assert_eq!(pool(&t, &[true], mode).unwrap().vector, vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn hand_computed_means() {
        let t = rows();
        let mean = pool(&t, &[true; 3], PoolingMode::Mean).unwrap().vector;
        assert!((mean[0] - 1.0).abs() < 1e-12 && (mean[1] - 1.0).abs() < 1e-12);
        let wm = pool(&t, &[true; 3], PoolingMode::WeightedMean).unwrap().vector;
        // (1*e1 + 2*e2 + 3*e3) / 6
        assert!((wm[0] - 7.0 / 6.0).abs() < 1e-12);
        assert!((wm[1] - 8.0 / 6.0).abs() < 1e-12);
        assert_eq!(pool(&t, &[true, true, false], PoolingMode::Eos).unwrap().vector, vec![0.0, 1.0]);
        assert_eq!(pool(&t, &[false; 3], PoolingMode::Mean), Err(Error::EmptyPool));
    }

    #[test]
    fn weighted_weights_sum_to_one() {
        for k in 1..50 {
            let pos: Vec<usize> = (0..k).collect();
            let s: f64 = pool_weights(&pos, PoolingMode::WeightedMean).unwrap().iter().map(|w| w.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instruction_positions_excluded() {
        let vocab = Vocab::bytes_only();
        let input = embed_input(&vocab, "ab", "xyz", PoolingMode::Mean).unwrap();
        assert_eq!(input.tokens.len(), 7);
        assert_eq!(input.pooled, vec![3, 4, 5, 6]);
        let eos = embed_input(&vocab, "ab", "xyz", PoolingMode::Eos).unwrap();
        assert_eq!(eos.pooled, vec![6]);
        let plain = embed_input(&vocab, "", "xyz", PoolingMode::Mean).unwrap();
        assert_eq!(plain.pooled, vec![1, 2, 3, 4]);
    }

    #[test]
    fn echo_layout() {
        let vocab = Vocab::bytes_only();
        let input = echo_input(&vocab, "i", "ab", PoolingMode::Mean).unwrap();
        // BOS i a b i a b EOS
        assert_eq!(input.tokens.len(), 8);
        assert_eq!(input.pooled, vec![5, 6]);
        assert!(input.pooled.iter().all(|&p| p > 3));
    }

    #[test]
    fn echo_rejects_bidirectional_and_sees_first_copy() {
        let vocab = Vocab::bytes_only();
        let cfg = ModelConfig { vocab_size: 260, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, max_seq_len: 32, ..Default::default() };
        let m = Model::<f32>::init_with_std(cfg, 0, 0.2).unwrap();
        let bi = EmbeddingRequest::new("ab", PoolingMode::Mean, AttentionMode::Bidirectional);
        assert!(matches!(embed_echo(&m, &vocab, &bi), Err(Error::Unsupported(_))));
        let a = embed_echo(&m, &vocab, &EmbeddingRequest::new("ab", PoolingMode::Mean, AttentionMode::Causal)).unwrap();
        let b = embed_echo(&m, &vocab, &EmbeddingRequest::new("ac", PoolingMode::Mean, AttentionMode::Causal)).unwrap();
        assert_ne!(a.vector, b.vector);
    }

    #[test]
    fn embed_is_deterministic_and_matches_forward() {
        let vocab = Vocab::bytes_only();
        let cfg = ModelConfig { vocab_size: 260, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, max_seq_len: 32, ..Default::default() };
        let m = Model::<f64>::init_with_std(cfg, 3, 0.2).unwrap();
        let req = EmbeddingRequest::new("hello", PoolingMode::WeightedMean, AttentionMode::Bidirectional).with_instruction("q: ");
        let a = embed(&m, &vocab, &req).unwrap();
        assert_eq!(a, embed(&m, &vocab, &req).unwrap());
        let input = embed_input(&vocab, "q: ", "hello", PoolingMode::WeightedMean).unwrap();
        let trace = forward(&m, &input.tokens, AttentionMode::Bidirectional, None).unwrap();
        let direct = pool_positions(trace.last_hidden(), &input.pooled, PoolingMode::WeightedMean).unwrap();
        for (x, y) in a.vector.iter().zip(&direct.vector) {
            assert!((x - y).abs() < 1e-12);
        }
        let long = "x".repeat(40);
        let err = embed(&m, &vocab, &EmbeddingRequest::new(long, PoolingMode::Mean, AttentionMode::Causal)).unwrap_err();
        assert_eq!(err, Error::SequenceTooLong { len: 42, max: 32 });
    }
}
