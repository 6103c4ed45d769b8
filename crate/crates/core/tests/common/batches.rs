//! Synthetic labeled batches for model-level tests.

use albert_wop::corruption::CorruptedExample;
use albert_wop::model::AlbertConfig;
use albert_wop::tokenizer::{CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID};
use rand::Rng;

/// One example of length `cfg.seq_len` with random content, some padding
/// and at least one label of every kind.
pub fn random_example(rng: &mut impl Rng, cfg: &AlbertConfig) -> CorruptedExample {
    let t = cfg.seq_len;
    let used = rng.random_range(5.min(t)..=t);
    let sep = rng.random_range(2..used - 1);
    let mut ex = CorruptedExample {
        input_ids: vec![PAD_ID; t],
        token_type_ids: vec![0; t],
        attention_mask: vec![0; t],
        mlm_labels: vec![-1; t],
        sop_label: rng.random_range(0..2),
        wop_labels: vec![-1; t],
    };
    for i in 0..used {
        ex.attention_mask[i] = 1;
        ex.token_type_ids[i] = u8::from(i > sep);
        ex.input_ids[i] = if i == 0 {
            CLS_ID
        } else if i == sep || i == used - 1 {
            SEP_ID
        } else if rng.random_bool(0.1) {
            MASK_ID
        } else {
            rng.random_range(NUM_SPECIALS..cfg.vocab_size as u32)
        };
    }
    let content: Vec<usize> = (1..used - 1).filter(|&i| i != sep).collect();
    for (k, &i) in content.iter().enumerate() {
        if k == 0 || rng.random_bool(0.2) {
            ex.mlm_labels[i] = rng.random_range(NUM_SPECIALS as i64..cfg.vocab_size as i64);
        }
        if k == content.len() - 1 || rng.random_bool(0.2) {
            ex.wop_labels[i] = rng.random_range(0..used as i64);
        }
    }
    ex
}

pub fn random_batch(rng: &mut impl Rng, cfg: &AlbertConfig, b: usize) -> Vec<CorruptedExample> {
    (0..b).map(|_| random_example(rng, cfg)).collect()
}
