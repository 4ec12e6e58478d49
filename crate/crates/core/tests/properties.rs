use proptest::prelude::*;

use lamate::data::{gen_corpus, oracle, read_jsonl, write_jsonl, Direction, Profile, Task, Vocab, World};
use lamate::decoder::Variant;
use lamate::decoding::{beam_search, filter_probs, GenerationConfig, LamateSession, PrefixTable};
use lamate::kv::{kv_bytes, paper_specs};
use lamate::metrics::{bleu, edit_distance, hter};
use lamate::model::{Lamate, ModelConfig};
use lamate::tensor::Partition;

fn seq(max: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5, 0..max)
}

fn small_model(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.layers = 2;
    cfg.encoder.dim = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.kv_heads = 2;
    cfg.encoder.groups = 2;
    cfg.encoder.max_len = 48;
    cfg.adaptor.groups = 2;
    cfg.adaptor.d1 = 16;
    cfg.adaptor.d2 = 8;
    cfg.adaptor.n_enc = 1;
    cfg.adaptor.heads = 2;
    cfg.decoder.variant = variant;
    cfg.decoder.dim = 8;
    cfg.decoder.heads = 2;
    cfg.decoder.layers = 1;
    cfg.decoder.max_target_len = 8;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edit_distance_is_a_metric(a in seq(10), b in seq(10), c in seq(10)) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert!(d >= a.len().abs_diff(b.len()) && d <= a.len().max(b.len()));
        prop_assert!(edit_distance(&a, &c) <= d + edit_distance(&b, &c));
    }

    #[test]
    fn hter_is_zero_only_for_exact_output(a in seq(10), b in prop::collection::vec(0usize..5, 1..10)) {
        let h = hter(&a, &b).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert_eq!(h == 0.0, a == b);
    }

    #[test]
    fn bleu_is_bounded_and_perfect_on_identity(pairs in prop::collection::vec((seq(12), prop::collection::vec(0usize..5, 4..12)), 1..4)) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let s = bleu(&h, &r, 4, false).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
        prop_assert!((bleu(&r, &r, 4, false).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn nucleus_filter_keeps_a_normalized_prefix(
        weights in prop::collection::vec(0.01f64..1.0, 1..12),
        top_k in 0usize..6,
        top_p in 0.05f64..=1.0,
    ) {
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let kept = filter_probs(&probs, top_k, top_p).unwrap();
        prop_assert!(!kept.is_empty());
        if top_k > 0 {
            prop_assert!(kept.len() <= top_k);
        }
        prop_assert!((kept.iter().map(|k| k.1).sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(kept.windows(2).all(|w| w[0].1 >= w[1].1));
        // Every dropped token is no more likely than the least likely kept one.
        let floor = probs[kept.last().unwrap().0];
        for (i, &p) in probs.iter().enumerate() {
            if !kept.iter().any(|k| k.0 == i) {
                prop_assert!(p <= floor + 1e-12);
            }
        }
    }

    #[test]
    fn cache_bytes_scale_linearly(b in 1u64..16, s in 0u64..512, t in 0u64..512) {
        for spec in paper_specs() {
            let one = kv_bytes(&spec, 1, 1, 0).bytes_exact;
            prop_assert_eq!(kv_bytes(&spec, b, s, t).bytes_exact, one * b * (s + t));
        }
    }

    #[test]
    fn corpora_agree_with_the_oracle(seed in 0u64..1000, task_ix in 0usize..5) {
        let prof = Profile { directions: vec![Direction::Fwd, Direction::Bwd, Direction::Copy], ..Profile::default() };
        let world = prof.world().unwrap();
        for e in gen_corpus(Task::ALL[task_ix], 8, seed, &prof).unwrap() {
            prop_assert_eq!(e.prompt[0], e.task.tag());
            prop_assert_eq!(&oracle(&world, &e.prompt, &e.source).unwrap(), &e.target);
        }
    }

    #[test]
    fn beam_scores_are_sequence_log_probs(seed in 0u64..500, width in 1usize..6) {
        let table = PrefixTable::random(4, 4, seed);
        let cfg = GenerationConfig { beam_size: width, max_len: 4, ..GenerationConfig::default() };
        let out = beam_search(&table, &cfg).unwrap();
        for h in &out.beam {
            prop_assert!((h.log_prob - table.log_prob(&h.tokens)).abs() < 1e-9);
        }
    }
}

#[test]
fn cipher_tables_are_bijections() {
    let world = World::standard();
    let content: Vec<usize> = (0..600).filter(|&i| world.is_content(i)).collect();
    let mut image: Vec<usize> = content.iter().map(|&t| world.map(lamate::data::Table::Sigma, t)).collect();
    image.sort_unstable();
    assert_eq!(image, content);
    for &t in &content {
        let there = world.map(lamate::data::Table::Sigma, t);
        assert_eq!(world.map(lamate::data::Table::SigmaInv, there), t);
    }
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::standard();
    let prof = Profile::default();
    for task in Task::ALL {
        let corpus = gen_corpus(task, 20, 3, &prof).unwrap();
        let path = dir.path().join(format!("{task}.jsonl"));
        write_jsonl(&path, &corpus, &vocab).unwrap();
        assert_eq!(read_jsonl(&path, &vocab).unwrap(), corpus);
    }
}

#[test]
fn decoded_scores_match_rescoring() {
    for variant in Variant::ALL {
        let m = Lamate::<f64>::new(small_model(variant), 4).unwrap();
        let (c, x) = (vec![4, 9], vec![20, 31, 42, 17]);
        let session = LamateSession::new(&m, &c, &x).unwrap();
        let cfg = GenerationConfig { beam_size: 3, max_len: 6, ..GenerationConfig::default() };
        for h in beam_search(&session, &cfg).unwrap().beam {
            let rescored = m.net.score(&m.params, &c, &x, &h.tokens).unwrap();
            assert!((h.log_prob - rescored).abs() < 1e-5, "{variant:?}: {} vs {rescored}", h.log_prob);
        }
    }
}

#[test]
fn checkpoints_round_trip_every_partition() {
    let dir = tempfile::tempdir().unwrap();
    let m = Lamate::<f32>::new(small_model(Variant::Prefix), 8).unwrap();
    m.save_dir(dir.path()).unwrap();
    let back = Lamate::<f32>::load_dir(dir.path()).unwrap();
    assert_eq!(back.cfg(), m.cfg());
    for p in [Partition::Theta, Partition::Phi, Partition::Omega] {
        assert_eq!(back.params.hash(p), m.params.hash(p));
    }
}
