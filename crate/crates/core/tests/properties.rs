use enclab_core::graph::{AttentionMode, Graph};
use enclab_core::lora::{attach_lora, merge_lora, LoraConfig};
use enclab_core::objectives::{apply_masking, info_nce, MaskingConfig, MaskingStrategy};
use enclab_core::pool::{pool_weights, PoolingMode};
use enclab_core::tokenizer::{is_special, TokenId, BOS, MASK};
use enclab_core::transformer::{forward, forward_batch, Encoder, Model, ModelConfig};
use enclab_core::{Rng, Tensor};
use proptest::prelude::*;

fn small(layers: usize, heads: usize) -> ModelConfig {
    ModelConfig { vocab_size: 64, d_model: 16, n_heads: heads, n_layers: layers, d_ff: 32, max_seq_len: 24, ..Default::default() }
}

fn tokens() -> impl Strategy<Value = Vec<TokenId>> {
    proptest::collection::vec(0u32..64, 1..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_rows_ignore_later_tokens(seed in any::<u64>(), layers in 1usize..3, toks in tokens(), cut in any::<prop::sample::Index>()) {
        let model: Model = Model::init_with_std(small(layers, 2), seed, 0.2).unwrap();
        let p = 1 + cut.index(toks.len());
        let full = forward_batch::<f32, _>(&model, &[&toks], AttentionMode::Causal).unwrap();
        // packing the prefix next to another sequence must not matter either
        let pre = forward_batch::<f32, _>(&model, &[&[5, 6, 7][..], &toks[..p]], AttentionMode::Causal).unwrap();
        for layer in 0..=layers {
            let a = full.rows(layer, 0).unwrap();
            let b = pre.rows(layer, 1).unwrap();
            for (x, y) in a.data()[..b.len()].iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn lora_attach_is_silent_and_merge_agrees(seed in any::<u64>(), toks in tokens(), r in 1usize..5) {
        let model: Model = Model::init(small(2, 4), seed).unwrap();
        let lora = LoraConfig { r, alpha: 2.0 * r as f64, ..Default::default() };
        let mut adapted = attach_lora(model.clone(), lora, seed ^ 1).unwrap();
        for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
            let a = forward::<f32, _>(&adapted, &toks, mode, None).unwrap();
            let b = forward::<f32, _>(&model, &toks, mode, None).unwrap();
            prop_assert!(a.logits.bitwise_eq(&b.logits));
        }
        let mut rng = Rng::new(seed);
        for t in adapted.trainable_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.normal() as f32 * 0.05);
        }
        let merged = merge_lora(adapted.clone()).unwrap();
        let a = forward::<f32, _>(&adapted, &toks, AttentionMode::Bidirectional, None).unwrap();
        let m = forward::<f32, _>(&merged, &toks, AttentionMode::Bidirectional, None).unwrap();
        prop_assert!(a.logits.max_abs_diff(&m.logits) < 1e-4);
    }

    #[test]
    fn masking_only_touches_regular_positions(
        rows in proptest::collection::vec(proptest::collection::vec(0u32..300, 0..20), 1..6),
        prob in 0.05f64..1.0,
        roberta in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let rows: Vec<Vec<TokenId>> = rows.into_iter().map(|r| std::iter::once(BOS).chain(r).collect()).collect();
        let strategy = if roberta { MaskingStrategy::RobertaStyle } else { MaskingStrategy::BertStyle };
        let cfg = MaskingConfig { strategy, mask_prob: prob };
        let m = apply_masking(&rows, &cfg, 4..300, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(m.input_ids.len(), rows.len());
        let supervised: std::collections::HashSet<(usize, usize)> = m.supervision.iter().map(|s| (s.row, s.pos)).collect();
        for s in &m.supervision {
            prop_assert!(s.pos >= 1);
            prop_assert!(!is_special(s.original));
            prop_assert_eq!(rows[s.row][s.pos], s.original);
            if roberta {
                prop_assert_eq!(m.input_ids[s.row][s.pos], MASK);
            }
        }
        for (r, (orig, masked)) in rows.iter().zip(&m.input_ids).enumerate() {
            prop_assert_eq!(orig.len(), masked.len());
            for (p, (a, b)) in orig.iter().zip(masked).enumerate() {
                if !supervised.contains(&(r, p)) {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn pooling_weights_form_a_distribution(k in 1usize..40, offset in 0usize..10) {
        let positions: Vec<usize> = (offset..offset + k).collect();
        for mode in [PoolingMode::Eos, PoolingMode::Mean, PoolingMode::WeightedMean] {
            let w = pool_weights(&positions, mode).unwrap();
            let total: f64 = w.iter().map(|p| p.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|p| p.1 > 0.0 && positions.contains(&p.0)));
            if mode == PoolingMode::WeightedMean {
                prop_assert!(w.windows(2).all(|p| p[0].1 < p[1].1));
            }
        }
    }

    #[test]
    fn info_nce_is_bounded(vals in proptest::collection::vec(-1.0f64..1.0, 24), tau in 0.01f64..1.0) {
        // 4 queries and 4 documents of width 3
        let mut g: Graph<f64> = Graph::new();
        let q = g.constant(&Tensor::new(vec![4, 3], vals[..12].iter().map(|v| v + 1e-3).collect()).unwrap()).unwrap();
        let d = g.constant(&Tensor::new(vec![4, 3], vals[12..].iter().map(|v| v + 1e-3).collect()).unwrap()).unwrap();
        let loss = info_nce(&mut g, q, d, &[0, 1, 2, 3], tau).unwrap();
        let l = g.scalar(loss).unwrap();
        // cosines lie in [-1, 1], so each term is at most ln(1 + 3 e^{2/tau})
        prop_assert!(l >= 0.0);
        prop_assert!(l <= (1.0 + 3.0 * (2.0 / tau).exp()).ln() + 1e-9);
    }
}
