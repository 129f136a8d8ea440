use enclab::checkpoint::{self, Checkpoint};
use enclab::loaders::{parse_contrastive, parse_sts, parse_triples};
use enclab::vocab_file::{parse_vocab, write_vocab};
use enclab_core::lora::{attach_lora, LoraConfig};
use enclab_core::tokenizer::train_bpe;
use enclab_core::transformer::{Model, ModelConfig};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), layers in 1usize..3, adapted in any::<bool>()) {
        let cfg = ModelConfig { vocab_size: 270, d_model: 8, n_heads: 2, n_layers: layers, d_ff: 12, max_seq_len: 8, ..Default::default() };
        let model: Model = Model::init(cfg, seed).unwrap();
        let ck = if adapted {
            let lora = LoraConfig { r: 2, alpha: 4.0, targets: vec!["wv".into(), "head".into()] };
            Checkpoint::Adapted(attach_lora(model, lora, seed).unwrap())
        } else {
            Checkpoint::Plain(model)
        };
        let bytes = checkpoint::to_bytes(&ck);
        prop_assert_eq!(checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn arbitrary_bytes_never_panic(mut bytes in proptest::collection::vec(any::<u8>(), 0..200), magic in any::<bool>()) {
        if magic && bytes.len() >= 8 {
            bytes[..4].copy_from_slice(checkpoint::MAGIC);
            bytes[4..8].copy_from_slice(&checkpoint::VERSION.to_le_bytes());
        }
        prop_assert!(checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn vocab_files_round_trip(corpus in proptest::collection::vec("[a-z \\t\u{e9}\u{4e2d}!]{0,30}", 1..8), extra in 0usize..60, seed in any::<u64>()) {
        let vocab = train_bpe(corpus.iter().map(String::as_str), 260 + extra, seed).unwrap();
        prop_assert_eq!(parse_vocab(&write_vocab(&vocab)).unwrap(), vocab);
    }

    #[test]
    fn tsv_rows_parse_back(rows in proptest::collection::vec((word(), word(), word(), word(), -5.0f64..5.0), 1..10)) {
        let triples: String = rows.iter().map(|(a, b, c, d, _)| format!("{a}\t{b}\t{c}\t{d}\n")).collect();
        let parsed = parse_triples(&triples).unwrap();
        prop_assert_eq!(parsed.len(), rows.len());
        prop_assert!(parsed.iter().zip(&rows).all(|(t, r)| t.a == r.0 && t.d == r.3));

        let sts: String = rows.iter().map(|(a, b, _, _, s)| format!("{a}\t{b}\t{s}\n")).collect();
        let parsed = parse_sts(&sts).unwrap();
        prop_assert!(parsed.iter().zip(&rows).all(|(p, r)| p.2 == r.4));

        let pairs: String = rows.iter().map(|(a, b, c, d, _)| format!("{a}: \t{b}\t{c}\t{d}\n")).collect();
        let parsed = parse_contrastive(&pairs).unwrap();
        prop_assert!(parsed.iter().all(|e| e.hard_negatives.len() == 1));
    }
}
