mod common;

use albert_wop::corpus::SegmentPair;
use albert_wop::corruption::{
    apply_mlm, apply_sop, build_example_with, build_examples, eligible_spans, example_rng, wop_eligible,
    CorruptedExample, CorruptionConfig, Shard,
};
use albert_wop::tokenizer::{MASK_ID, NUM_SPECIALS};
use common::synthetic;
use proptest::prelude::*;

const SEQ_LEN: usize = 32;

struct Corpus {
    vocab_size: usize,
    pairs: Vec<SegmentPair>,
}

fn corpus() -> &'static Corpus {
    static CORPUS: std::sync::OnceLock<Corpus> = std::sync::OnceLock::new();
    CORPUS.get_or_init(|| {
        let docs = synthetic::documents(5, 40, 8, 3, 14);
        // A small vocabulary leaves many words split into several pieces.
        let (vocab, pairs) = synthetic::pairs(&docs, 70, SEQ_LEN);
        Corpus {
            vocab_size: vocab.len(),
            pairs,
        }
    })
}

/// The input ids after SOP and MLM but before WOP, replayed on the same
/// random stream as `build_example_with`.
fn post_mlm(pair: &SegmentPair, cfg: &CorruptionConfig, index: u64) -> (Vec<u32>, usize, usize) {
    let mut rng = example_rng(cfg.seed, index);
    let (packed, _) = apply_sop(pair, SEQ_LEN, &mut rng).unwrap();
    let mut ids = packed.input_ids.clone();
    apply_mlm(&mut ids, &packed.word_spans, corpus().vocab_size, cfg, &mut rng);
    let content = packed.word_spans.iter().map(|s| s.len()).sum();
    let longest = packed.word_spans.iter().map(|s| s.len()).max().unwrap_or(0);
    (ids, content, longest)
}

fn check_example(ex: &CorruptedExample, before: &[u32], content: usize, longest: usize, cfg: &CorruptionConfig) {
    let n = ex.seq_len();
    let spans = eligible_spans(before);
    let span_of = |i: usize| spans.iter().position(|s| s.contains(&i));

    // Inverse permutation reproduces the pre-WOP sequence.
    let mut restored = ex.input_ids.clone();
    let mut sources = Vec::new();
    for i in 0..n {
        if ex.wop_labels[i] >= 0 {
            let j = ex.wop_labels[i] as usize;
            restored[j] = ex.input_ids[i];
            sources.push(j);
            assert_ne!(i, j, "fixed point at {i}");
            assert!(span_of(i).is_some() && span_of(i) == span_of(j), "{i} <- {j} crosses a span");
        }
    }
    assert_eq!(restored, before);
    let mut targets: Vec<usize> = (0..n).filter(|&i| ex.wop_labels[i] >= 0).collect();
    sources.sort_unstable();
    targets.sort_unstable();
    assert_eq!(sources, targets, "moved positions are not a permutation");

    let eligible = before.iter().filter(|&&id| wop_eligible(id)).count();
    let moved = targets.len();
    assert!(moved <= (cfg.wop_rate * eligible as f64).floor() as usize);

    let selected = ex.mlm_labels.iter().filter(|&&l| l >= 0).count();
    let bound = (cfg.mlm_rate * content as f64).ceil() as usize + longest.saturating_sub(1);
    assert!(selected <= bound, "{selected} MLM labels over bound {bound}");
    for i in 0..n {
        if ex.mlm_labels[i] >= 0 {
            assert!(ex.mlm_labels[i] >= NUM_SPECIALS as i64);
            if ex.input_ids[i] == MASK_ID {
                assert_eq!(ex.wop_labels[i], -1, "MLM mask at {i} also moved");
            }
        }
        if ex.input_ids[i] == MASK_ID {
            assert_eq!(ex.wop_labels[i], -1);
        }
    }
}

fn config() -> impl Strategy<Value = CorruptionConfig> {
    (0.0f64..0.5, 0.0f64..=1.0, 0.05f64..0.6, any::<u64>()).prop_map(|(mlm_rate, p_wop, wop_rate, seed)| {
        CorruptionConfig {
            mlm_rate,
            p_wop,
            wop_rate,
            seed,
            ..CorruptionConfig::default()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// 48 configurations x 40 examples.
    #[test]
    fn corruption_invariants(cfg in config(), offset in 0usize..200) {
        let c = corpus();
        for k in 0..40 {
            let idx = (offset + k) % c.pairs.len();
            let pair = &c.pairs[idx];
            let mut rng = example_rng(cfg.seed, idx as u64);
            let (ex, _, wop) = build_example_with(pair, c.vocab_size, SEQ_LEN, &cfg, &mut rng).unwrap();
            let (before, content, longest) = post_mlm(pair, &cfg, idx as u64);
            check_example(&ex, &before, content, longest, &cfg);
            prop_assert_eq!(wop.moved, ex.wop_labels.iter().filter(|&&l| l >= 0).count());
        }
    }
}

#[test]
fn every_example_of_a_full_pass_satisfies_the_invariants() {
    let c = corpus();
    let cfg = CorruptionConfig {
        p_wop: 1.0,
        wop_rate: 0.3,
        ..CorruptionConfig::default()
    };
    let (examples, stats) = build_examples(&c.pairs, c.vocab_size, SEQ_LEN, &cfg).unwrap();
    assert!(examples.len() >= 250, "only {} pairs", examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let (before, content, longest) = post_mlm(&c.pairs[i], &cfg, i as u64);
        check_example(ex, &before, content, longest, &cfg);
    }
    assert!(stats.wop_fraction() > 0.9);
}

#[test]
fn disabled_word_order_never_labels() {
    let c = corpus();
    let cfg = CorruptionConfig {
        p_wop: 1.0,
        enable_wop: false,
        ..CorruptionConfig::default()
    };
    let (examples, stats) = build_examples(&c.pairs, c.vocab_size, SEQ_LEN, &cfg).unwrap();
    assert!(examples.iter().all(|e| e.wop_labels.iter().all(|&l| l == -1)));
    assert_eq!(stats.wop_fraction(), 0.0);
}

#[test]
fn examples_survive_a_shard() {
    let c = corpus();
    let (examples, _) = build_examples(&c.pairs, c.vocab_size, SEQ_LEN, &CorruptionConfig::default()).unwrap();
    let shard = Shard::from_examples(SEQ_LEN, &examples).unwrap();
    assert_eq!(shard.len(), examples.len());
    assert!(shard.iter().eq(examples.iter().cloned()));
    let again = build_examples(&c.pairs, c.vocab_size, SEQ_LEN, &CorruptionConfig::default()).unwrap().0;
    assert_eq!(Shard::from_examples(SEQ_LEN, &again).unwrap().as_bytes(), shard.as_bytes());
}
