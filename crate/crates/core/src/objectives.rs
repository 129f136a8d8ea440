//! Masked next-token prediction, unsupervised and supervised contrastive
//! losses, and the loop that trains one stage.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::ContrastiveExample;
use crate::error::{Error, Result};
use crate::graph::{AttentionMode, DropoutCtx, Graph, Var};
use crate::optim::{lr_at, Adam};
use crate::pool::{embed_input, pool_weights, EmbedInput, PoolingMode};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tokenizer::{is_special, TokenId, Vocab, BOS, MASK};
use crate::transformer::{forward_hidden, head_logits, Binding, Encoder, LineageStep, ModelConfig, StageRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingStrategy {
    /// Selected positions become MASK (80%), a random token (10%) or stay (10%).
    BertStyle,
    /// Every selected position becomes MASK.
    RobertaStyle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub strategy: MaskingStrategy,
    pub mask_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { strategy: MaskingStrategy::BertStyle, mask_prob: 0.2 }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::Config(format!("mask_prob must be in (0, 1], got {}", self.mask_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Supervision {
    pub row: usize,
    pub pos: usize,
    pub original: TokenId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    /// Rows after masking; rows keep their own lengths (no padding).
    pub input_ids: Vec<Vec<TokenId>>,
    pub supervision: Vec<Supervision>,
    /// Rows holding nothing but BOS, left unmasked.
    pub skipped_rows: usize,
}

/// Masks every row independently. Eligible positions are `i >= 1` holding
/// a non-special token; each draws one uniform and is selected when it falls
/// below `mask_prob`. BertStyle then draws a second uniform per selected
/// position to choose between MASK, a random id from `random_ids`, or the
/// original token.
pub fn apply_masking(
    rows: &[Vec<TokenId>],
    cfg: &MaskingConfig,
    random_ids: Range<TokenId>,
    rng: &mut Rng,
) -> Result<MaskedBatch> {
    cfg.validate()?;
    if random_ids.is_empty() {
        return Err(Error::Config("empty range for random replacement tokens".into()));
    }
    let mut out = MaskedBatch { input_ids: Vec::with_capacity(rows.len()), supervision: Vec::new(), skipped_rows: 0 };
    for (r, row) in rows.iter().enumerate() {
        if row.first() != Some(&BOS) {
            return Err(Error::Config(format!("row {r} does not start with BOS")));
        }
        let mut ids = row.clone();
        if row.len() == 1 {
            out.skipped_rows += 1;
            out.input_ids.push(ids);
            continue;
        }
        for (i, id) in ids.iter_mut().enumerate().skip(1) {
            if is_special(*id) || rng.uniform() >= cfg.mask_prob {
                continue;
            }
            out.supervision.push(Supervision { row: r, pos: i, original: *id });
            *id = match cfg.strategy {
                MaskingStrategy::RobertaStyle => MASK,
                MaskingStrategy::BertStyle => {
                    let v = rng.uniform();
                    if v < 0.8 {
                        MASK
                    } else if v < 0.9 {
                        random_ids.start + rng.below((random_ids.end - random_ids.start) as usize) as TokenId
                    } else {
                        *id
                    }
                }
            };
        }
        out.input_ids.push(ids);
    }
    Ok(out)
}

/// MNTP loss on a bound graph: the token at `pos` is predicted from the
/// final hidden state at `pos - 1`. Rows listed in `zero_rows` as
/// `(row, position)` have their final hidden state zeroed before the head.
pub fn mntp_loss_graph<S: Real>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    binding: &Binding,
    masked: &MaskedBatch,
    mode: AttentionMode,
    dropout: Option<&mut DropoutCtx<'_>>,
    zero_rows: &[(usize, usize)],
) -> Result<Var> {
    if masked.supervision.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let seqs: Vec<&[TokenId]> = masked.input_ids.iter().map(Vec::as_slice).collect();
    let fw = forward_hidden(g, config, binding, &seqs, mode, dropout)?;
    let mut last = *fw.hidden.last().expect("hidden");
    if !zero_rows.is_empty() {
        let d = config.d_model;
        let n = fw.segments.last().map(|s| s.start + s.len).unwrap_or(0);
        let mut keep = vec![S::one(); n * d];
        for &(row, pos) in zero_rows {
            let seg = fw.segments.get(row).ok_or_else(|| Error::Index(format!("row {row}")))?;
            if pos >= seg.len {
                return Err(Error::Index(format!("position {pos} of row {row}")));
            }
            let at = (seg.start + pos) * d;
            keep[at..at + d].iter_mut().for_each(|x| *x = S::zero());
        }
        let keep = g.constant_from(vec![n, d], keep)?;
        last = g.mul(last, keep)?;
    }
    let mut rows = Vec::with_capacity(masked.supervision.len());
    let mut targets = Vec::with_capacity(masked.supervision.len());
    for s in &masked.supervision {
        let seg = fw.segments.get(s.row).ok_or_else(|| Error::Index(format!("row {}", s.row)))?;
        if s.pos == 0 || s.pos >= seg.len {
            return Err(Error::Index(format!("supervised position {} of row {}", s.pos, s.row)));
        }
        rows.push(seg.start + s.pos - 1);
        targets.push(s.original as usize);
    }
    let h = g.select_rows(last, &rows)?;
    let logits = head_logits(g, config, binding, h)?;
    g.cross_entropy(logits, &targets)
}

/// MNTP loss value without dropout.
pub fn mntp_loss<S: Real, E: Encoder<S> + ?Sized>(enc: &E, masked: &MaskedBatch, mode: AttentionMode) -> Result<f64> {
    mntp_loss_instrumented(enc, masked, mode, &[])
}

/// [`mntp_loss`] with the final hidden state of the given `(row, position)`
/// pairs zeroed before the output head.
pub fn mntp_loss_instrumented<S: Real, E: Encoder<S> + ?Sized>(
    enc: &E,
    masked: &MaskedBatch,
    mode: AttentionMode,
    zero_rows: &[(usize, usize)],
) -> Result<f64> {
    let mut g = Graph::new();
    let b = enc.bind(&mut g, false)?;
    let loss = mntp_loss_graph(&mut g, enc.config(), &b, masked, mode, None, zero_rows)?;
    Ok(g.scalar(loss)?.as_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Similarities are divided by this before the softmax.
    pub temperature: f64,
    #[serde(default = "default_pooling")]
    pub pooling: PoolingMode,
}

fn default_pooling() -> PoolingMode {
    PoolingMode::Mean
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.05, pooling: PoolingMode::Mean }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// `mean_i -log softmax_j(cos(q_i, d_j) / tau)[targets[i]]`.
pub fn info_nce<S: Real>(g: &mut Graph<S>, queries: Var, docs: Var, targets: &[usize], temperature: f64) -> Result<Var> {
    let q = g.normalize_rows(queries)?;
    let d = g.normalize_rows(docs)?;
    let sims = g.matmul_t(q, d, false, true)?;
    let logits = g.scale(sims, S::lit(1.0 / temperature))?;
    g.cross_entropy(logits, targets)
}

fn pool_groups<S: Real>(inputs: &[&EmbedInput], offsets: &[usize], pooling: PoolingMode) -> Result<Vec<Vec<(usize, S)>>> {
    inputs
        .iter()
        .zip(offsets)
        .map(|(inp, &off)| {
            Ok(pool_weights(&inp.pooled, pooling)?.into_iter().map(|(p, w)| (off + p, S::lit(w))).collect())
        })
        .collect()
}

/// Pooled embeddings `[n, d]` of packed inputs on the graph.
fn embed_graph<S: Real>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    binding: &Binding,
    inputs: &[&EmbedInput],
    pooling: PoolingMode,
    dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let seqs: Vec<&[TokenId]> = inputs.iter().map(|i| i.tokens.as_slice()).collect();
    let fw = forward_hidden(g, config, binding, &seqs, AttentionMode::Bidirectional, dropout)?;
    let offsets: Vec<usize> = fw.segments.iter().map(|s| s.start).collect();
    let groups = pool_groups(inputs, &offsets, pooling)?;
    g.pool(*fw.hidden.last().expect("hidden"), &groups)
}

/// SimCSE: two full forwards of the batch with independent dropout masks
/// (drawn one after the other from `dropout`), in-batch negatives.
pub fn simcse_loss_graph<S: Real>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    binding: &Binding,
    inputs: &[&EmbedInput],
    cfg: &ContrastiveConfig,
    mut dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    let z1 = embed_graph(g, config, binding, inputs, cfg.pooling, dropout.as_deref_mut())?;
    let z2 = embed_graph(g, config, binding, inputs, cfg.pooling, dropout)?;
    let targets: Vec<usize> = (0..inputs.len()).collect();
    info_nce(g, z1, z2, &targets, cfg.temperature)
}

/// SimCSE loss value for one batch.
pub fn simcse_loss<S: Real, E: Encoder<S> + ?Sized>(
    enc: &E,
    inputs: &[EmbedInput],
    cfg: &ContrastiveConfig,
    dropout_p: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Config(format!("dropout_p must be in [0, 1), got {dropout_p}")));
    }
    let mut g = Graph::new();
    let b = enc.bind(&mut g, false)?;
    let refs: Vec<&EmbedInput> = inputs.iter().collect();
    let mut ctx = DropoutCtx { p: dropout_p, rng };
    let loss = simcse_loss_graph(&mut g, enc.config(), &b, &refs, cfg, Some(&mut ctx))?;
    Ok(g.scalar(loss)?.as_f64())
}

/// Token layout of a supervised batch: queries, then all positives, then
/// every hard negative in example order.
pub struct SupervisedInputs {
    pub queries: Vec<EmbedInput>,
    pub docs: Vec<EmbedInput>,
}

pub fn supervised_inputs(vocab: &Vocab, batch: &[&ContrastiveExample], pooling: PoolingMode) -> Result<SupervisedInputs> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let queries = batch
        .iter()
        .map(|ex| embed_input(vocab, &ex.instruction, &ex.query, pooling))
        .collect::<Result<Vec<_>>>()?;
    let mut docs = batch.iter().map(|ex| embed_input(vocab, "", &ex.positive, pooling)).collect::<Result<Vec<_>>>()?;
    for ex in batch {
        for neg in &ex.hard_negatives {
            docs.push(embed_input(vocab, "", neg, pooling)?);
        }
    }
    Ok(SupervisedInputs { queries, docs })
}

/// Supervised contrastive loss: query `i` is scored against every positive
/// and hard negative in the batch; its own positive is the target.
pub fn supervised_loss_graph<S: Real>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    binding: &Binding,
    inputs: &SupervisedInputs,
    cfg: &ContrastiveConfig,
    dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    cfg.validate()?;
    let all: Vec<&EmbedInput> = inputs.queries.iter().chain(&inputs.docs).collect();
    let z = embed_graph(g, config, binding, &all, cfg.pooling, dropout)?;
    let nq = inputs.queries.len();
    let q_rows: Vec<usize> = (0..nq).collect();
    let d_rows: Vec<usize> = (nq..all.len()).collect();
    let q = g.select_rows(z, &q_rows)?;
    let d = g.select_rows(z, &d_rows)?;
    info_nce(g, q, d, &q_rows, cfg.temperature)
}

pub fn supervised_contrastive_loss<S: Real, E: Encoder<S> + ?Sized>(
    enc: &E,
    vocab: &Vocab,
    batch: &[ContrastiveExample],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let refs: Vec<&ContrastiveExample> = batch.iter().collect();
    let inputs = supervised_inputs(vocab, &refs, cfg.pooling)?;
    let mut g = Graph::new();
    let b = enc.bind(&mut g, false)?;
    let loss = supervised_loss_graph(&mut g, enc.config(), &b, &inputs, cfg, None)?;
    Ok(g.scalar(loss)?.as_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mntp,
    Simcse,
    Supervised,
}

impl Stage {
    pub fn lineage_step(self) -> LineageStep {
        match self {
            Stage::Mntp => LineageStep::Mntp,
            Stage::Simcse => LineageStep::Simcse,
            Stage::Supervised => LineageStep::Supervised,
        }
    }
}

/// Checks that `lineage` allows training `stage` next:
/// MNTP runs on a base model, SimCSE on a model whose MNTP adapters were
/// merged, and supervised training after a merged MNTP stage (SimCSE in
/// between is optional).
pub fn check_stage_order(lineage: &[StageRecord], stage: Stage) -> Result<()> {
    let steps: Vec<LineageStep> = lineage.iter().map(|r| r.step).collect();
    let merged_mntp = steps
        .iter()
        .position(|&s| s == LineageStep::Mntp)
        .is_some_and(|i| steps[i + 1..].contains(&LineageStep::Merge));
    let describe = || format!("{steps:?}");
    match stage {
        Stage::Mntp => {
            if steps.iter().any(|&s| s != LineageStep::Base) {
                return Err(Error::Lineage(format!("MNTP expects a base model, lineage is {}", describe())));
            }
        }
        Stage::Simcse => {
            if !merged_mntp {
                return Err(Error::Lineage(format!(
                    "SimCSE expects merged MNTP weights, lineage is {}",
                    describe()
                )));
            }
            if steps.contains(&LineageStep::Simcse) || steps.contains(&LineageStep::Supervised) {
                return Err(Error::Lineage(format!("SimCSE already ran, lineage is {}", describe())));
            }
        }
        Stage::Supervised => {
            if !merged_mntp {
                return Err(Error::Lineage(format!(
                    "supervised training expects merged MNTP weights, lineage is {}",
                    describe()
                )));
            }
            if steps.contains(&LineageStep::Supervised) {
                return Err(Error::Lineage(format!("supervised stage already ran, lineage is {}", describe())));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Defaults to 10% of `steps`.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 32, lr: 1e-3, warmup_steps: None, seed: 0 }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.steps / 10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.warmup() > self.steps {
            return Err(Error::Config(format!("warmup {} exceeds {} steps", self.warmup(), self.steps)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Training data and stage-specific settings.
pub enum StageData<'a> {
    /// Token rows starting with BOS; EOS is not required.
    Mntp { rows: &'a [Vec<TokenId>], masking: MaskingConfig, random_ids: Range<TokenId> },
    /// Prepared embedding inputs, one per sentence.
    Simcse { inputs: &'a [EmbedInput], contrastive: ContrastiveConfig, dropout_p: f64 },
    Supervised { examples: &'a [ContrastiveExample], vocab: &'a Vocab, contrastive: ContrastiveConfig, dropout_p: f64 },
}

impl StageData<'_> {
    pub fn stage(&self) -> Stage {
        match self {
            StageData::Mntp { .. } => Stage::Mntp,
            StageData::Simcse { .. } => Stage::Simcse,
            StageData::Supervised { .. } => Stage::Supervised,
        }
    }

    fn len(&self) -> usize {
        match self {
            StageData::Mntp { rows, .. } => rows.len(),
            StageData::Simcse { inputs, .. } => inputs.len(),
            StageData::Supervised { examples, .. } => examples.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Mean over a step range, clamped to the recorded steps.
    pub fn mean(&self, range: Range<usize>) -> f64 {
        let end = range.end.min(self.losses.len());
        let start = range.start.min(end);
        let s = &self.losses[start..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    pub fn first_mean(&self, n: usize) -> f64 {
        self.mean(0..n)
    }

    pub fn last_mean(&self, n: usize) -> f64 {
        self.mean(self.losses.len().saturating_sub(n)..self.losses.len())
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    /// Train even when the lineage does not allow this stage.
    pub allow_skip: bool,
    /// Recorded in the lineage entry appended after training.
    pub config_hash: String,
}

const STREAM_ORDER: u64 = 1;
const STREAM_MASKING: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Runs `train.steps` Adam updates on the trainable weights of `enc`.
///
/// Batches are drawn from a per-epoch shuffle; masking, shuffling and
/// dropout use separate streams of the seed so each is reproducible on its
/// own. Appends a lineage record on success.
pub fn train_stage<S: Real, E: Encoder<S> + ?Sized>(
    enc: &mut E,
    data: &StageData<'_>,
    train: &TrainConfig,
    opts: &StageOptions,
) -> Result<LossCurve> {
    train.validate()?;
    let stage = data.stage();
    if !opts.allow_skip {
        check_stage_order(&enc.lineage(), stage)?;
    }
    if data.len() < train.batch_size {
        return Err(Error::InsufficientData { needed: train.batch_size, available: data.len() });
    }
    match data {
        StageData::Mntp { masking, random_ids, .. } => {
            masking.validate()?;
            if random_ids.is_empty() || random_ids.end as usize > enc.config().vocab_size {
                return Err(Error::Config(format!("random token range {random_ids:?} outside the vocabulary")));
            }
        }
        StageData::Simcse { contrastive, dropout_p, .. } | StageData::Supervised { contrastive, dropout_p, .. } => {
            contrastive.validate()?;
            if !(0.0..1.0).contains(dropout_p) {
                return Err(Error::Config(format!("dropout_p must be in [0, 1), got {dropout_p}")));
            }
        }
    }
    let root = Rng::new(train.seed);
    let mut order_rng = root.fork(STREAM_ORDER);
    let mut mask_rng = root.fork(STREAM_MASKING);
    let mut drop_rng = root.fork(STREAM_DROPOUT);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = Adam::default();
    let mut curve = LossCurve { losses: Vec::with_capacity(train.steps) };
    let config = enc.config().clone();
    for step in 0..train.steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        while batch.len() < train.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut g = Graph::new();
        let binding = enc.bind(&mut g, true)?;
        let loss = match data {
            StageData::Mntp { rows, masking, random_ids } => {
                let picked: Vec<Vec<TokenId>> = batch.iter().map(|&i| rows[i].clone()).collect();
                let mut masked = apply_masking(&picked, masking, random_ids.clone(), &mut mask_rng)?;
                let mut tries = 0;
                while masked.supervision.is_empty() {
                    tries += 1;
                    if tries > 100 {
                        return Err(Error::EmptySupervision);
                    }
                    masked = apply_masking(&picked, masking, random_ids.clone(), &mut mask_rng)?;
                }
                let mut ctx = DropoutCtx { p: config.dropout_p, rng: &mut drop_rng };
                mntp_loss_graph(&mut g, &config, &binding, &masked, AttentionMode::Bidirectional, Some(&mut ctx), &[])?
            }
            StageData::Simcse { inputs, contrastive, dropout_p } => {
                let picked: Vec<&EmbedInput> = batch.iter().map(|&i| &inputs[i]).collect();
                let mut ctx = DropoutCtx { p: *dropout_p, rng: &mut drop_rng };
                simcse_loss_graph(&mut g, &config, &binding, &picked, contrastive, Some(&mut ctx))?
            }
            StageData::Supervised { examples, vocab, contrastive, dropout_p } => {
                let picked: Vec<&ContrastiveExample> = batch.iter().map(|&i| &examples[i]).collect();
                let inputs = supervised_inputs(vocab, &picked, contrastive.pooling)?;
                let mut ctx = DropoutCtx { p: *dropout_p, rng: &mut drop_rng };
                supervised_loss_graph(&mut g, &config, &binding, &inputs, contrastive, Some(&mut ctx))?
            }
        };
        curve.losses.push(g.scalar(loss)?.as_f64());
        g.backward(loss)?;
        let grads = binding.trainable.iter().map(|&v| g.grad(v).map(<[S]>::to_vec)).collect::<Result<Vec<_>>>()?;
        let mut params = enc.trainable_mut();
        opt.step(&mut params, &grads, lr_at(step, train.lr, train.warmup()))?;
    }
    enc.record_stage(StageRecord::new(stage.lineage_step(), train.seed, opts.config_hash.clone()));
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach_lora, merge_lora, LoraConfig};
    use crate::transformer::Model;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig { vocab_size: vocab, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, max_seq_len: 24, ..Default::default() }
    }

    #[test]
    fn masking_trace_matches_reference_draws() {
        let row: Vec<TokenId> = core::iter::once(BOS).chain(10..21).collect();
        assert_eq!(row.len(), 12);
        let cfg = MaskingConfig { strategy: MaskingStrategy::RobertaStyle, mask_prob: 0.5 };
        let masked = apply_masking(core::slice::from_ref(&row), &cfg, 4..40, &mut Rng::new(7)).unwrap();
        let mut oracle = Rng::new(7);
        let expected: Vec<usize> = (1..12).filter(|_| oracle.uniform() < 0.5).collect();
        let got: Vec<usize> = masked.supervision.iter().map(|s| s.pos).collect();
        assert_eq!(got, expected);
        for s in &masked.supervision {
            assert_eq!(masked.input_ids[0][s.pos], MASK);
            assert_eq!(s.original, row[s.pos]);
        }
    }

    #[test]
    fn masking_never_touches_specials() {
        let rows = vec![vec![BOS, 9, 9, 1, 9], vec![BOS]];
        let cfg = MaskingConfig { strategy: MaskingStrategy::BertStyle, mask_prob: 1.0 };
        let m = apply_masking(&rows, &cfg, 4..40, &mut Rng::new(0)).unwrap();
        assert_eq!(m.skipped_rows, 1);
        let pos: Vec<usize> = m.supervision.iter().map(|s| s.pos).collect();
        assert_eq!(pos, vec![1, 2, 4]);
        assert!(apply_masking(&[vec![5, 6]], &cfg, 4..40, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn bert_style_proportions() {
        let row: Vec<TokenId> = core::iter::once(BOS).chain(core::iter::repeat_n(7, 20000)).collect();
        let cfg = MaskingConfig { strategy: MaskingStrategy::BertStyle, mask_prob: 1.0 };
        let m = apply_masking(&[row], &cfg, 100..200, &mut Rng::new(1)).unwrap();
        let n = m.supervision.len() as f64;
        let masks = m.input_ids[0].iter().filter(|&&t| t == MASK).count() as f64 / n;
        let kept = m.input_ids[0][1..].iter().filter(|&&t| t == 7).count() as f64 / n;
        assert!((masks - 0.8).abs() < 0.02, "{masks}");
        assert!((kept - 0.1).abs() < 0.02, "{kept}");
    }

    #[test]
    fn zero_head_gives_log_vocab() {
        let mut m = Model::<f64>::init(tiny(30), 0).unwrap();
        m.get_mut("head").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        let masked = MaskedBatch {
            input_ids: vec![vec![BOS, 5, MASK, 7]],
            supervision: vec![Supervision { row: 0, pos: 2, original: 6 }],
            skipped_rows: 0,
        };
        let loss = mntp_loss(&m, &masked, AttentionMode::Bidirectional).unwrap();
        assert!((loss - (30f64).ln()).abs() < 1e-12);
        let empty = MaskedBatch { supervision: vec![], ..masked };
        assert_eq!(mntp_loss(&m, &empty, AttentionMode::Bidirectional), Err(Error::EmptySupervision));
    }

    #[test]
    fn duplicated_supervision_keeps_mean() {
        let m = Model::<f64>::init_with_std(tiny(30), 0, 0.3).unwrap();
        let sup = vec![Supervision { row: 0, pos: 2, original: 6 }, Supervision { row: 0, pos: 3, original: 9 }];
        let a = MaskedBatch { input_ids: vec![vec![BOS, 5, MASK, MASK]], supervision: sup.clone(), skipped_rows: 0 };
        let mut b = a.clone();
        b.supervision.extend(sup);
        let la = mntp_loss(&m, &a, AttentionMode::Bidirectional).unwrap();
        let lb = mntp_loss(&m, &b, AttentionMode::Bidirectional).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn loss_reads_previous_position_only() {
        let m = Model::<f64>::init_with_std(tiny(30), 2, 0.3).unwrap();
        let masked = MaskedBatch {
            input_ids: vec![vec![BOS, 5, MASK, 7, 8]],
            supervision: vec![Supervision { row: 0, pos: 2, original: 6 }],
            skipped_rows: 0,
        };
        let base = mntp_loss(&m, &masked, AttentionMode::Bidirectional).unwrap();
        for p in [0, 2, 3, 4] {
            let z = mntp_loss_instrumented(&m, &masked, AttentionMode::Bidirectional, &[(0, p)]).unwrap();
            assert_eq!(z, base);
        }
        let z1 = mntp_loss_instrumented(&m, &masked, AttentionMode::Bidirectional, &[(0, 1)]).unwrap();
        assert!((z1 - base).abs() > 1e-6);
    }

    #[test]
    fn info_nce_closed_form() {
        let mut g = Graph::<f64>::new();
        let z = g.constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = info_nce(&mut g, z, z, &[0, 1], 0.05).unwrap();
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert!((g.scalar(loss).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn single_item_contrastive_losses_are_zero() {
        let vocab = Vocab::bytes_only();
        let m = Model::<f64>::init(tiny(260), 0).unwrap();
        let inputs = vec![embed_input(&vocab, "", "hello", PoolingMode::Mean).unwrap()];
        let loss = simcse_loss(&m, &inputs, &ContrastiveConfig::default(), 0.0, &mut Rng::new(0)).unwrap();
        assert_eq!(loss, 0.0);
        let ex = ContrastiveExample::new("find: ", "hi", "hello", vec![]).unwrap();
        let loss = supervised_contrastive_loss(&m, &vocab, &[ex], &ContrastiveConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(
            simcse_loss(&m, &[], &ContrastiveConfig::default(), 0.0, &mut Rng::new(0)),
            Err(Error::EmptyBatch)
        );
    }

    #[test]
    fn contrastive_loss_ignores_batch_order() {
        let vocab = Vocab::bytes_only();
        let m = Model::<f64>::init_with_std(tiny(260), 0, 0.1).unwrap();
        let texts = ["one fish", "two fish", "red", "blue fish"];
        let mut inputs: Vec<_> = texts.iter().map(|t| embed_input(&vocab, "", t, PoolingMode::Mean).unwrap()).collect();
        let cfg = ContrastiveConfig::default();
        let a = simcse_loss(&m, &inputs, &cfg, 0.0, &mut Rng::new(0)).unwrap();
        inputs.reverse();
        let b = simcse_loss(&m, &inputs, &cfg, 0.0, &mut Rng::new(0)).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(a > 0.0);
    }

    #[test]
    fn stage_order_rules() {
        let rec = |s| StageRecord::new(s, 0, "");
        use LineageStep::*;
        assert!(check_stage_order(&[rec(Base)], Stage::Mntp).is_ok());
        assert!(check_stage_order(&[rec(Base)], Stage::Simcse).is_err());
        assert!(check_stage_order(&[rec(Base), rec(Mntp)], Stage::Simcse).is_err());
        assert!(check_stage_order(&[rec(Base), rec(Mntp), rec(Merge)], Stage::Simcse).is_ok());
        assert!(check_stage_order(&[rec(Base), rec(Mntp), rec(Merge)], Stage::Supervised).is_ok());
        assert!(check_stage_order(&[rec(Base), rec(Mntp), rec(Merge), rec(Simcse)], Stage::Supervised).is_ok());
        assert!(check_stage_order(&[rec(Base), rec(Mntp), rec(Merge)], Stage::Mntp).is_err());
    }

    #[test]
    fn training_is_deterministic_and_records_lineage() {
        let rows: Vec<Vec<TokenId>> = (0..8).map(|i| vec![BOS, 4 + i, 5 + i, 6 + i, 7 + i]).collect();
        let run = || {
            let m = Model::<f32>::init(tiny(30), 0).unwrap();
            let mut ad = attach_lora(m, LoraConfig { r: 2, alpha: 4.0, ..Default::default() }, 1).unwrap();
            let data = StageData::Mntp { rows: &rows, masking: MaskingConfig::default(), random_ids: 4..30 };
            let train = TrainConfig { steps: 5, batch_size: 4, lr: 1e-2, warmup_steps: None, seed: 3 };
            let curve = train_stage(&mut ad, &data, &train, &StageOptions::default()).unwrap();
            (merge_lora(ad).unwrap(), curve)
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(ca, cb);
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.bitwise_eq(y));
        }
        assert_eq!(a.lineage_steps(), vec![LineageStep::Base, LineageStep::Mntp, LineageStep::Merge]);
    }

    #[test]
    fn training_rejects_small_data_and_bad_order() {
        let rows: Vec<Vec<TokenId>> = vec![vec![BOS, 5, 6]];
        let mut m = Model::<f32>::init(tiny(30), 0).unwrap();
        let data = StageData::Mntp { rows: &rows, masking: MaskingConfig::default(), random_ids: 4..30 };
        let train = TrainConfig { steps: 1, batch_size: 2, ..Default::default() };
        assert!(matches!(
            train_stage(&mut m, &data, &train, &StageOptions::default()),
            Err(Error::InsufficientData { needed: 2, available: 1 })
        ));
        let vocab = Vocab::bytes_only();
        let inputs = vec![embed_input(&vocab, "", "a", PoolingMode::Mean).unwrap(); 2];
        let data = StageData::Simcse { inputs: &inputs, contrastive: ContrastiveConfig::default(), dropout_p: 0.3 };
        let mut m = Model::<f32>::init(tiny(260), 0).unwrap();
        assert!(matches!(train_stage(&mut m, &data, &train, &StageOptions::default()), Err(Error::Lineage(_))));
        let opts = StageOptions { allow_skip: true, ..Default::default() };
        assert!(train_stage(&mut m, &data, &train, &opts).is_ok());
    }
}
