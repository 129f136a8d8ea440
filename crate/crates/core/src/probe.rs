//! Linear probes on frozen word representations and a Spearman evaluator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSentence;
use crate::error::{Error, Result};
use crate::graph::{AttentionMode, DropoutCtx, Graph};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::tokenizer::{is_special, word_ranges, TokenId, TokenSequence, Vocab};
use crate::transformer::{forward_batch, Encoder};

/// Inclusive token range `[first, last]` of one word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WordSpan {
    pub word: usize,
    pub first: usize,
    pub last: usize,
}

/// Maps whitespace-delimited words of `text` to the tokens of `seq`.
///
/// A token belongs to the word in whose region its first byte lies, where a
/// word's region also takes in the whitespace before it. Special tokens
/// belong to no word.
pub fn word_spans(seq: &TokenSequence, text: &str) -> Result<Vec<WordSpan>> {
    let words = word_ranges(text);
    let mut spans = Vec::with_capacity(words.len());
    let mut region_start = 0;
    for (w, range) in words.iter().enumerate() {
        let members: Vec<usize> = (0..seq.ids.len())
            .filter(|&t| {
                let s = &seq.spans[t];
                !is_special(seq.ids[t]) && s.start < s.end && s.start >= region_start && s.start < range.end
            })
            .collect();
        let (Some(&first), Some(&last)) = (members.first(), members.last()) else {
            return Err(Error::Index(format!("word {w} has no tokens")));
        };
        spans.push(WordSpan { word: w, first, last });
        region_start = range.end;
    }
    Ok(spans)
}

/// Word vectors `[n_words, d]` from a hidden-state matrix `[T, d]`.
///
/// Unshifted: mean of the word's rows. Shifted: mean of rows
/// `first - 1 ..= last - 1`, i.e. the positions that predict the word's
/// tokens under next-token training.
pub fn word_representations<S: Real>(hidden: &Tensor<S>, spans: &[WordSpan], shifted: bool) -> Result<Tensor<S>> {
    let (t, d) = hidden.dims2()?;
    if spans.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut out = Vec::with_capacity(spans.len() * d);
    for s in spans {
        if s.first > s.last || s.last >= t {
            return Err(Error::Index(format!("span [{}, {}] for {t} positions", s.first, s.last)));
        }
        if shifted && s.first == 0 {
            return Err(Error::Index("shifted representation needs a token before the word".into()));
        }
        let (a, b) = if shifted { (s.first - 1, s.last - 1) } else { (s.first, s.last) };
        let inv = S::lit(1.0 / (b - a + 1) as f64);
        let mut acc = vec![S::zero(); d];
        for r in a..=b {
            for (o, &h) in acc.iter_mut().zip(hidden.row(r)) {
                *o += h;
            }
        }
        out.extend(acc.into_iter().map(|x| x * inv));
    }
    Tensor::new(vec![spans.len(), d], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub dropout: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { dropout: 0.1, steps: 1500, lr: 5e-4, batch_size: 8, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe steps, batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("probe dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe<S: Real = f32> {
    /// `[n_classes, d]`.
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Real> Probe<S> {
    pub fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Argmax class per row of `reps`; ties go to the lower class.
    pub fn predict(&self, reps: &Tensor<S>) -> Result<Vec<usize>> {
        let (n, d) = reps.dims2()?;
        if d != self.weight.shape()[1] {
            return Err(Error::Shape(format!("probe width {} for reps of width {d}", self.weight.shape()[1])));
        }
        let c = self.n_classes();
        Ok((0..n)
            .map(|i| {
                let x = reps.row(i);
                let score = |k: usize| {
                    self.weight.row(k).iter().zip(x).map(|(&w, &v)| w * v).sum::<S>() + self.bias.data()[k]
                };
                (1..c).fold((0, score(0)), |best, k| {
                    let s = score(k);
                    if s > best.1 {
                        (k, s)
                    } else {
                        best
                    }
                })
                .0
            })
            .collect())
    }

    pub fn accuracy(&self, reps: &Tensor<S>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(reps)?;
        if pred.len() != labels.len() || pred.is_empty() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), labels.len())));
        }
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTraining<S: Real = f32> {
    pub probe: Probe<S>,
    pub curve: Vec<f64>,
    /// Classes in `0..n_classes` that never occur in the labels.
    pub absent_classes: Vec<usize>,
}

/// Softmax regression with input dropout, trained by Adam from zero weights.
pub fn train_probe<S: Real>(reps: &Tensor<S>, labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<ProbeTraining<S>> {
    cfg.validate()?;
    let (n, d) = reps.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} representations, {} labels", labels.len())));
    }
    if n_classes == 0 {
        return Err(Error::Config("probe needs at least one class".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Index(format!("label {bad} of {n_classes} classes")));
    }
    if n < cfg.batch_size {
        return Err(Error::InsufficientData { needed: cfg.batch_size, available: n });
    }
    let absent_classes = (0..n_classes).filter(|c| !labels.contains(c)).collect();
    let mut probe = Probe { weight: Tensor::zeros(&[n_classes, d]), bias: Tensor::zeros(&[n_classes]) };
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.fork(1);
    let mut drop_rng = root.fork(2);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = Adam::default();
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..n).collect();
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut g = Graph::new();
        let x: Vec<S> = batch.iter().flat_map(|&i| reps.row(i).iter().copied()).collect();
        let x = g.constant_from(vec![batch.len(), d], x)?;
        let mut ctx = DropoutCtx { p: cfg.dropout, rng: &mut drop_rng };
        let x = g.dropout(x, Some(&mut ctx))?;
        let w = g.param(&probe.weight)?;
        let b = g.param(&probe.bias)?;
        let logits = g.matmul_t(x, w, false, true)?;
        let logits = g.add_row(logits, b)?;
        let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let loss = g.cross_entropy(logits, &targets)?;
        curve.push(g.scalar(loss)?.as_f64());
        g.backward(loss)?;
        let grads = vec![g.grad(w)?.to_vec(), g.grad(b)?.to_vec()];
        opt.step(&mut [&mut probe.weight, &mut probe.bias], &grads, cfg.lr)?;
    }
    Ok(ProbeTraining { probe, curve, absent_classes })
}

/// Word representations and labels of labeled sentences, read from the last
/// layer of one forward pass per sentence (`BOS + text`, no dropout).
pub fn sentence_word_reps<S: Real, E: Encoder<S> + ?Sized>(
    enc: &E,
    vocab: &Vocab,
    sentences: &[&LabeledSentence],
    mode: AttentionMode,
    shifted: bool,
) -> Result<Vec<Tensor<S>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(32) {
        let texts: Vec<String> = chunk.iter().map(|s| s.text()).collect();
        let seqs: Vec<TokenSequence> = texts.iter().map(|t| vocab.encode(t, true, false)).collect();
        let ids: Vec<&[TokenId]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
        let batch = forward_batch(enc, &ids, mode)?;
        for (i, (seq, text)) in seqs.iter().zip(&texts).enumerate() {
            let spans = word_spans(seq, text)?;
            if spans.len() != chunk[i].words.len() {
                return Err(Error::Index(format!("sentence has {} words but {} spans", chunk[i].words.len(), spans.len())));
            }
            out.push(word_representations(&batch.rows(batch.last_layer(), i)?, &spans, shifted)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub accuracy: f64,
    pub n_test: usize,
    /// Accuracy of always predicting the most frequent training label.
    pub majority_baseline: f64,
    /// Test words whose label never occurs in training (counted as wrong).
    pub unseen_test_labels: usize,
}

/// Splits sentences 80/20 under `seed`; returns (train, test) indices.
pub fn split_sentences(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, available: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(7).shuffle(&mut idx);
    let n_test = ((n * 2 + 5) / 10).clamp(1, n - 1);
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

/// Trains a probe on the frozen encoder's word representations and scores
/// it on a held-out sentence split.
pub fn probe_task<S: Real, E: Encoder<S> + ?Sized>(
    enc: &E,
    vocab: &Vocab,
    corpus: &[LabeledSentence],
    mode: AttentionMode,
    shifted: bool,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let (train_idx, test_idx) = split_sentences(corpus.len(), cfg.seed)?;
    let mut label_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for &i in &train_idx {
        for l in &corpus[i].labels {
            let next = label_ids.len();
            label_ids.entry(l.as_str()).or_insert(next);
        }
    }
    let gather = |idx: &[usize]| -> Result<(Tensor<S>, Vec<Option<usize>>)> {
        let sents: Vec<&LabeledSentence> = idx.iter().map(|&i| &corpus[i]).collect();
        let reps = sentence_word_reps(enc, vocab, &sents, mode, shifted)?;
        let d = enc.config().d_model;
        let data: Vec<S> = reps.iter().flat_map(|t| t.data().iter().copied()).collect();
        let labels = sents.iter().flat_map(|s| s.labels.iter().map(|l| label_ids.get(l.as_str()).copied())).collect();
        Ok((Tensor::new(vec![data.len() / d, d], data)?, labels))
    };
    let (train_reps, train_labels) = gather(&train_idx)?;
    let (test_reps, test_labels) = gather(&test_idx)?;
    let train_labels: Vec<usize> = train_labels.into_iter().map(|l| l.expect("train labels are indexed")).collect();
    let n_classes = label_ids.len();
    let trained = train_probe(&train_reps, &train_labels, n_classes, cfg)?;
    let pred = trained.probe.predict(&test_reps)?;
    let correct = pred.iter().zip(&test_labels).filter(|(p, l)| Some(**p) == **l).count();
    let mut counts = vec![0usize; n_classes];
    for &l in &train_labels {
        counts[l] += 1;
    }
    let majority = (0..n_classes).max_by_key(|&c| (counts[c], core::cmp::Reverse(c))).unwrap_or(0);
    let n_test = test_labels.len();
    Ok(ProbeOutcome {
        accuracy: correct as f64 / n_test as f64,
        n_test,
        majority_baseline: test_labels.iter().filter(|l| **l == Some(majority)).count() as f64 / n_test as f64,
        unseen_test_labels: test_labels.iter().filter(|l| l.is_none()).count(),
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_eval(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() || pred.len() < 2 {
        return Err(Error::Shape(format!("spearman needs two equal lists of length >= 2, got {} and {}", pred.len(), gold.len())));
    }
    if pred.iter().chain(gold).any(|x| !x.is_finite()) {
        return Err(Error::NumericFault { op: "spearman" });
    }
    let (rp, rg) = (average_ranks(pred), average_ranks(gold));
    let n = rp.len() as f64;
    let (mp, mg) = (rp.iter().sum::<f64>() / n, rg.iter().sum::<f64>() / n);
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (a, b) in rp.iter().zip(&rg) {
        cov += (a - mp) * (b - mg);
        vp += (a - mp) * (a - mp);
        vg += (b - mg) * (b - mg);
    }
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((cov / num_traits::Float::sqrt(vp * vg)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hidden(t: usize) -> Tensor<f64> {
        Tensor::from_fn(&[t, 2], |i| i as f64)
    }

    #[test]
    fn single_token_words() {
        let h = hidden(4);
        let spans = [WordSpan { word: 0, first: 1, last: 1 }, WordSpan { word: 1, first: 2, last: 2 }];
        let un = word_representations(&h, &spans, false).unwrap();
        assert_eq!(un.row(0), h.row(1));
        let sh = word_representations(&h, &spans, true).unwrap();
        assert_eq!(sh.row(0), h.row(0));
        assert_eq!(sh.row(1), un.row(0));
    }

    #[test]
    fn shifted_sub_token_average() {
        let h = hidden(7);
        let spans = [
            WordSpan { word: 0, first: 1, last: 2 },
            WordSpan { word: 1, first: 3, last: 5 },
            WordSpan { word: 2, first: 6, last: 6 },
        ];
        let mean = |rows: &[usize]| -> Vec<f64> {
            (0..2).map(|c| rows.iter().map(|&r| h.at2(r, c)).sum::<f64>() / rows.len() as f64).collect()
        };
        let un = word_representations(&h, &spans, false).unwrap();
        let sh = word_representations(&h, &spans, true).unwrap();
        assert_eq!(un.row(0), mean(&[1, 2]).as_slice());
        assert_eq!(un.row(1), mean(&[3, 4, 5]).as_slice());
        assert_eq!(un.row(2), mean(&[6]).as_slice());
        assert_eq!(sh.row(0), mean(&[0, 1]).as_slice());
        assert_eq!(sh.row(1), mean(&[2, 3, 4]).as_slice());
        assert_eq!(sh.row(2), mean(&[5]).as_slice());
        let bad = [WordSpan { word: 0, first: 6, last: 7 }];
        assert!(matches!(word_representations(&h, &bad, false), Err(Error::Index(_))));
    }

    #[test]
    fn spans_follow_whitespace_words() {
        let vocab = crate::tokenizer::train_bpe(["the cat sat", "the cat"], 270, 0).unwrap();
        let text = "the cat  sat";
        let seq = vocab.encode(text, true, false);
        let spans = word_spans(&seq, text).unwrap();
        assert_eq!(spans.len(), 3);
        assert_eq!(spans[0].first, 1);
        assert_eq!(spans[2].last, seq.len() - 1);
        for w in spans.windows(2) {
            assert_eq!(w[0].last + 1, w[1].first);
        }
    }

    #[test]
    fn separable_probe_fits() {
        let reps = Tensor::from_fn(&[64, 2], |i| if (i / 2) % 2 == 0 { 1.0f32 } else { -1.0 } * if i % 2 == 0 { 1.0 } else { 0.3 });
        let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let cfg = ProbeConfig { steps: 300, lr: 1e-2, ..Default::default() };
        let t = train_probe(&reps, &labels, 3, &cfg).unwrap();
        assert_eq!(t.probe.accuracy(&reps, &labels).unwrap(), 1.0);
        assert_eq!(t.absent_classes, vec![2]);
    }

    #[test]
    fn spearman_examples() {
        let g = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman_eval(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = g.iter().rev().copied().collect();
        assert!((spearman_eval(&rev, &g).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman_eval(&[1.0, 2.0, 3.0, 5.0, 4.0], &g).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(spearman_eval(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_sentences(10, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_sentences(10, 3).unwrap(), (a.clone(), b.clone()));
        assert!(b.iter().all(|x| !a.contains(x)));
        assert_eq!(split_sentences(2, 0).unwrap().1.len(), 1);
    }

    proptest! {
        #[test]
        fn spearman_monotone_invariance(xs in proptest::collection::vec(-100.0f64..100.0, 3..30), g in proptest::collection::vec(-100.0f64..100.0, 30)) {
            let gold = &g[..xs.len()];
            if let Ok(r) = spearman_eval(&xs, gold) {
                let t: Vec<f64> = xs.iter().map(|x| x.exp() / (1.0 + x.exp()) * 3.0 + x).collect();
                let r2 = spearman_eval(&t, gold).unwrap();
                prop_assert!((r - r2).abs() < 1e-12);
            }
        }
    }
}
