//! Low-rank adapters on projection matrices.
//!
//! A target `W` is stored `[in, out]`, so the update `B·A` of an `[out, in]`
//! weight appears here transposed: `W_eff = W + s · Aᵀ·Bᵀ` with `A: [r, in]`,
//! `B: [out, r]` and `s = alpha / r`. Merging evaluates exactly the same
//! arithmetic as the adapted forward, so merged and adapted weights agree
//! bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{gemm, Graph};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::transformer::{Binding, Encoder, LineageStep, Model, ModelConfig, StageRecord, PROJECTION_SLOTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    /// Full parameter names or per-layer slot names such as `wq`.
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
}

fn default_targets() -> Vec<String> {
    PROJECTION_SLOTS.iter().map(|s| String::from(*s)).collect()
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { r: 16, alpha: 32.0, targets: default_targets() }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S: Real = f32> {
    /// Name of the adapted base parameter.
    pub target: String,
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Real> LoraAdapter<S> {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn a_name(&self) -> String {
        format!("lora.{}.A", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("lora.{}.B", self.target)
    }
}

/// A frozen base model plus trainable adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel<S: Real = f32> {
    base: Model<S>,
    lora: LoraConfig,
    adapters: Vec<LoraAdapter<S>>,
    target_index: Vec<usize>,
}

fn resolve_targets(config: &ModelConfig, targets: &[String]) -> Result<Vec<usize>> {
    let names = config.param_names();
    let shapes = config.param_shapes();
    let mut out = Vec::new();
    for t in targets {
        let suffix = format!(".{t}");
        let hits: Vec<usize> = (0..names.len()).filter(|&i| names[i] == *t || names[i].ends_with(&suffix)).collect();
        if hits.is_empty() {
            return Err(Error::UnknownParam(t.clone()));
        }
        for i in hits {
            if shapes[i].len() != 2 {
                return Err(Error::Config(format!("LoRA target {} is not a matrix", names[i])));
            }
            if !out.contains(&i) {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Wraps `model` with fresh adapters: `A ~ N(0, 1/r)`, `B = 0`.
pub fn attach_lora<S: Real>(model: Model<S>, lora: LoraConfig, seed: u64) -> Result<AdaptedModel<S>> {
    lora.validate()?;
    let target_index = resolve_targets(model.config(), &lora.targets)?;
    let mut rng = Rng::new(seed);
    let std = 1.0 / lora.r as f64;
    let adapters = target_index
        .iter()
        .map(|&i| {
            let (d_in, d_out) = model.params()[i].dims2().expect("targets are matrices");
            LoraAdapter {
                target: model.names()[i].clone(),
                a: Tensor::from_fn(&[lora.r, d_in], |_| S::lit(std * rng.normal())),
                b: Tensor::zeros(&[d_out, lora.r]),
            }
        })
        .collect();
    Ok(AdaptedModel { base: model, lora, adapters, target_index })
}

/// `s · Aᵀ·Bᵀ` as an `[in, out]` matrix, computed with the tape's kernels.
fn delta<S: Real>(ad: &LoraAdapter<S>, scaling: S) -> Vec<S> {
    let (r, d_in) = (ad.a.shape()[0], ad.a.shape()[1]);
    let d_out = ad.b.shape()[0];
    let mut out = vec![S::zero(); d_in * d_out];
    gemm(ad.a.data(), ad.b.data(), d_in, r, d_out, true, true, &mut out);
    for v in &mut out {
        *v *= scaling;
    }
    out
}

/// Folds every adapter into its base weight and drops the adapter state.
pub fn merge_lora<S: Real>(adapted: AdaptedModel<S>) -> Result<Model<S>> {
    let scaling = S::lit(adapted.lora.scaling());
    let AdaptedModel { mut base, adapters, target_index, .. } = adapted;
    for (ad, &i) in adapters.iter().zip(&target_index) {
        let d = delta(ad, scaling);
        let w = &mut base.params_mut()[i];
        for (x, dx) in w.data_mut().iter_mut().zip(d) {
            *x += dx;
        }
        if w.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFault { op: "merge_lora" });
        }
    }
    base.lineage.push(StageRecord::new(LineageStep::Merge, 0, ""));
    Ok(base)
}

impl<S: Real> AdaptedModel<S> {
    /// Reassembles an adapted model from stored parts (checkpoint loading).
    pub fn from_parts(base: Model<S>, lora: LoraConfig, adapters: Vec<LoraAdapter<S>>) -> Result<Self> {
        lora.validate()?;
        let target_index = resolve_targets(base.config(), &lora.targets)?;
        if adapters.len() != target_index.len() {
            return Err(Error::Config(format!(
                "expected {} adapters, found {}",
                target_index.len(),
                adapters.len()
            )));
        }
        let mut out = attach_lora(base, lora, 0)?;
        init_adapter_from(&mut out, &adapters)?;
        Ok(out)
    }

    pub fn base(&self) -> &Model<S> {
        &self.base
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.lora
    }

    pub fn adapters(&self) -> &[LoraAdapter<S>] {
        &self.adapters
    }

    pub fn scaling(&self) -> f64 {
        self.lora.scaling()
    }
}

/// Copies adapter factors from `source`, matched by target name.
pub fn init_adapter_from<S: Real>(adapted: &mut AdaptedModel<S>, source: &[LoraAdapter<S>]) -> Result<()> {
    if source.len() != adapted.adapters.len() {
        return Err(Error::Shape(format!(
            "source has {} adapters, model has {}",
            source.len(),
            adapted.adapters.len()
        )));
    }
    let mut staged = Vec::with_capacity(source.len());
    for slot in &adapted.adapters {
        let src = source
            .iter()
            .find(|s| s.target == slot.target)
            .ok_or_else(|| Error::UnknownParam(format!("no source adapter for {}", slot.target)))?;
        if src.a.shape() != slot.a.shape() || src.b.shape() != slot.b.shape() {
            return Err(Error::Shape(format!(
                "{}: source A{:?} B{:?} vs slot A{:?} B{:?}",
                slot.target,
                src.a.shape(),
                src.b.shape(),
                slot.a.shape(),
                slot.b.shape()
            )));
        }
        staged.push(src.clone());
    }
    adapted.adapters = staged;
    Ok(())
}

impl<S: Real> Encoder<S> for AdaptedModel<S> {
    fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    fn bind(&self, g: &mut Graph<S>, train: bool) -> Result<Binding> {
        let mut weights = Vec::with_capacity(self.base.params().len());
        for t in self.base.params() {
            weights.push(g.constant(t)?);
        }
        let scaling = S::lit(self.lora.scaling());
        let mut trainable = Vec::new();
        for (ad, &i) in self.adapters.iter().zip(&self.target_index) {
            let (a, b) = if train { (g.param(&ad.a)?, g.param(&ad.b)?) } else { (g.constant(&ad.a)?, g.constant(&ad.b)?) };
            if train {
                trainable.push(a);
                trainable.push(b);
            }
            let d = g.matmul_t(a, b, true, true)?;
            let d = g.scale(d, scaling)?;
            weights[i] = g.add(weights[i], d)?;
        }
        Ok(Binding { weights, trainable })
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.adapters.iter_mut().flat_map(|ad| [&mut ad.a, &mut ad.b]).collect()
    }

    fn trainable_names(&self) -> Vec<String> {
        self.adapters.iter().flat_map(|ad| [ad.a_name(), ad.b_name()]).collect()
    }

    fn lineage(&self) -> Vec<StageRecord> {
        self.base.lineage.clone()
    }

    fn record_stage(&mut self, record: StageRecord) {
        self.base.lineage.push(record);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::AttentionMode;
    use crate::transformer::forward;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 40, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, max_seq_len: 12, ..Default::default() }
    }

    #[test]
    fn alpha_over_r_scaling() {
        assert_eq!(LoraConfig::default().scaling(), 2.0);
    }

    #[test]
    fn attach_is_a_noop() {
        let m = Model::<f32>::init(tiny(), 1).unwrap();
        let ad = attach_lora(m.clone(), LoraConfig { r: 4, alpha: 8.0, ..Default::default() }, 2).unwrap();
        assert_eq!(ad.adapters().len(), 14);
        let toks = [0u32, 5, 9, 3];
        let a = forward(&m, &toks, AttentionMode::Bidirectional, None).unwrap();
        let b = forward(&ad, &toks, AttentionMode::Bidirectional, None).unwrap();
        assert!(a.logits.bitwise_eq(&b.logits));
        let merged = merge_lora(ad).unwrap();
        for (x, y) in merged.params().iter().zip(m.params()) {
            assert!(x.bitwise_eq(y));
        }
        assert_eq!(merged.lineage.last().unwrap().step, LineageStep::Merge);
    }

    #[test]
    fn target_errors() {
        let m = Model::<f32>::init(tiny(), 1).unwrap();
        let bad = LoraConfig { targets: vec!["nope".into()], ..Default::default() };
        assert!(matches!(attach_lora(m.clone(), bad, 0), Err(Error::UnknownParam(_))));
        let vec_target = LoraConfig { targets: vec!["final_norm".into()], ..Default::default() };
        assert!(matches!(attach_lora(m.clone(), vec_target, 0), Err(Error::Config(_))));
        let zero = LoraConfig { r: 0, ..Default::default() };
        assert!(matches!(attach_lora(m.clone(), zero, 0), Err(Error::Config(_))));
        let one = LoraConfig { targets: vec!["layers.1.wq".into()], ..Default::default() };
        assert_eq!(attach_lora(m, one, 0).unwrap().adapters().len(), 1);
    }

    #[test]
    fn base_gets_no_gradient() {
        let m = Model::<f64>::init(tiny(), 1).unwrap();
        let ad = attach_lora(m, LoraConfig { r: 2, alpha: 4.0, ..Default::default() }, 3).unwrap();
        let mut g = Graph::new();
        let b = ad.bind(&mut g, true).unwrap();
        assert_eq!(b.trainable.len(), 28);
        let fw = crate::transformer::forward_hidden(&mut g, ad.config(), &b, &[&[0, 1, 2]], AttentionMode::Causal, None)
            .unwrap();
        let s = g.sum(*fw.hidden.last().unwrap()).unwrap();
        g.backward(s).unwrap();
        // base weights are constants: asking for their gradient is refused
        assert!(g.grad(b.weights[0]).is_err() || g.grad(b.weights[0]).unwrap().iter().all(|&x| x == 0.0));
        // B starts at zero, so A receives zero gradient while B does not
        assert!(g.grad(b.trainable[0]).unwrap().iter().all(|&x| x == 0.0));
        assert!(g.grad(b.trainable[1]).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn merge_matches_trained_adapters() {
        let m = Model::<f32>::init(tiny(), 1).unwrap();
        let mut ad = attach_lora(m, LoraConfig { r: 4, alpha: 8.0, ..Default::default() }, 2).unwrap();
        let mut rng = Rng::new(9);
        for t in ad.trainable_mut() {
            for x in t.data_mut() {
                *x = 0.1 * rng.normal() as f32;
            }
        }
        let toks = [0u32, 7, 7, 1];
        let a = forward(&ad, &toks, AttentionMode::Bidirectional, None).unwrap();
        let merged = merge_lora(ad).unwrap();
        let b = forward(&merged, &toks, AttentionMode::Bidirectional, None).unwrap();
        assert!(a.logits.max_abs_diff(&b.logits) < 1e-4);
    }

    #[test]
    fn copy_adapters() {
        let m = Model::<f32>::init(tiny(), 1).unwrap();
        let cfg = LoraConfig { r: 4, alpha: 8.0, ..Default::default() };
        let mut src = attach_lora(m.clone(), cfg.clone(), 2).unwrap();
        for t in src.trainable_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += 0.01);
        }
        let mut dst = attach_lora(m.clone(), cfg, 5).unwrap();
        init_adapter_from(&mut dst, src.adapters()).unwrap();
        let toks = [0u32, 2, 3];
        let a = forward(&src, &toks, AttentionMode::Causal, None).unwrap();
        let b = forward(&dst, &toks, AttentionMode::Causal, None).unwrap();
        assert!(a.logits.bitwise_eq(&b.logits));

        let big = attach_lora(m.clone(), LoraConfig { r: 16, alpha: 32.0, ..Default::default() }, 0).unwrap();
        let mut small = attach_lora(m, LoraConfig { r: 8, alpha: 16.0, ..Default::default() }, 0).unwrap();
        assert!(matches!(init_adapter_from(&mut small, big.adapters()), Err(Error::Shape(_))));
    }
}
