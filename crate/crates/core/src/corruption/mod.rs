//! Turns packed segment pairs into labeled pretraining examples.
//!
//! The pipeline order is fixed: sentence-order swap and packing, then
//! whole-word masking, then word-order shuffling. Shuffling runs last
//! because its spans are delimited by `[MASK]` tokens as well as specials,
//! so no token ever moves across a mask.

mod shard;

use std::ops::{AddAssign, Range};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{pack_pair, CorpusError, PackedPair, SegmentPair};
use crate::numeric::IGNORE_INDEX;
use crate::tokenizer::{CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID};

pub use shard::{encode_shard, write_shard, Shard, ShardError, SHARD_MAGIC, SHARD_VERSION};

#[derive(Debug, Error)]
pub enum CorruptionError {
    #[error("invalid corruption config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Packing(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Fraction of non-special tokens chosen for masked-LM prediction.
    pub mlm_rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    pub keep_prob: f64,
    /// Probability that an example receives word-order corruption.
    pub p_wop: f64,
    /// Upper bound on the fraction of eligible tokens that are moved.
    pub wop_rate: f64,
    pub enable_mlm: bool,
    pub enable_sop: bool,
    pub enable_wop: bool,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            mlm_rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            keep_prob: 0.1,
            p_wop: 0.30,
            wop_rate: 0.15,
            enable_mlm: true,
            enable_sop: true,
            enable_wop: true,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(CorruptionError::InvalidConfig(format!("{name}={v} outside [0, 1]")))
            }
        };
        unit("mlm_rate", self.mlm_rate)?;
        unit("wop_rate", self.wop_rate)?;
        unit("p_wop", self.p_wop)?;
        unit("mask_prob", self.mask_prob)?;
        unit("random_prob", self.random_prob)?;
        unit("keep_prob", self.keep_prob)?;
        let total = self.mask_prob + self.random_prob + self.keep_prob;
        if (total - 1.0).abs() > 1e-9 {
            return Err(CorruptionError::InvalidConfig(format!(
                "mask_prob + random_prob + keep_prob = {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// One fully labeled training instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptedExample {
    pub input_ids: Vec<u32>,
    pub token_type_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Original token id at positions selected for masked-LM, `-1` elsewhere.
    pub mlm_labels: Vec<i64>,
    /// 1 when the two segments were swapped.
    pub sop_label: u8,
    /// Original absolute position of the token now at each moved position,
    /// `-1` elsewhere.
    pub wop_labels: Vec<i64>,
}

impl CorruptedExample {
    pub fn seq_len(&self) -> usize {
        self.input_ids.len()
    }

    /// A packed pair with every label channel inert.
    pub fn from_packed(packed: PackedPair, sop_label: u8) -> Self {
        let n = packed.input_ids.len();
        Self {
            input_ids: packed.input_ids,
            token_type_ids: packed.token_type_ids,
            attention_mask: packed.attention_mask,
            mlm_labels: vec![IGNORE_INDEX; n],
            sop_label,
            wop_labels: vec![IGNORE_INDEX; n],
        }
    }
}

/// What the MLM step did to one example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MlmOutcome {
    pub content_tokens: usize,
    pub selected_tokens: usize,
    pub words_masked: usize,
    pub words_random: usize,
    pub words_kept: usize,
}

/// What the WOP step did to one example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WopOutcome {
    pub applied: bool,
    pub eligible: usize,
    pub moved: usize,
}

/// Aggregate corruption statistics over many examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CorruptionStats {
    pub examples: usize,
    pub swapped: usize,
    pub content_tokens: usize,
    pub selected_tokens: usize,
    pub words_masked: usize,
    pub words_random: usize,
    pub words_kept: usize,
    pub wop_applied: usize,
    pub wop_examples_moved: usize,
    pub wop_eligible: usize,
    pub wop_moved: usize,
}

impl CorruptionStats {
    pub fn record(&mut self, sop_label: u8, mlm: &MlmOutcome, wop: &WopOutcome) {
        self.examples += 1;
        self.swapped += sop_label as usize;
        self.content_tokens += mlm.content_tokens;
        self.selected_tokens += mlm.selected_tokens;
        self.words_masked += mlm.words_masked;
        self.words_random += mlm.words_random;
        self.words_kept += mlm.words_kept;
        self.wop_applied += wop.applied as usize;
        self.wop_examples_moved += (wop.moved > 0) as usize;
        self.wop_eligible += wop.eligible;
        self.wop_moved += wop.moved;
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// Selected-for-MLM tokens over non-special tokens.
    pub fn masked_fraction(&self) -> f64 {
        Self::ratio(self.selected_tokens, self.content_tokens)
    }

    /// Fractions of selected words that were masked, randomized, kept.
    pub fn action_split(&self) -> (f64, f64, f64) {
        let words = self.words_masked + self.words_random + self.words_kept;
        (
            Self::ratio(self.words_masked, words),
            Self::ratio(self.words_random, words),
            Self::ratio(self.words_kept, words),
        )
    }

    /// Fraction of examples with at least one moved token.
    pub fn wop_fraction(&self) -> f64 {
        Self::ratio(self.wop_examples_moved, self.examples)
    }

    pub fn swapped_fraction(&self) -> f64 {
        Self::ratio(self.swapped, self.examples)
    }
}

impl AddAssign for CorruptionStats {
    fn add_assign(&mut self, o: Self) {
        self.examples += o.examples;
        self.swapped += o.swapped;
        self.content_tokens += o.content_tokens;
        self.selected_tokens += o.selected_tokens;
        self.words_masked += o.words_masked;
        self.words_random += o.words_random;
        self.words_kept += o.words_kept;
        self.wop_applied += o.wop_applied;
        self.wop_examples_moved += o.wop_examples_moved;
        self.wop_eligible += o.wop_eligible;
        self.wop_moved += o.wop_moved;
    }
}

/// Per-example random stream, a pure function of `(seed, index)`.
pub fn example_rng(seed: u64, example_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(example_index);
    rng
}

/// Packs a pair with a fair-coin order swap. Returns the packed input and
/// the order label (1 = swapped).
pub fn apply_sop<R: Rng + ?Sized>(
    pair: &SegmentPair,
    seq_len: usize,
    rng: &mut R,
) -> Result<(PackedPair, u8), CorpusError> {
    pack_for_sop(pair, rng.random_bool(0.5), seq_len)
}

/// Packs a pair in the given order with its order label.
pub fn pack_for_sop(pair: &SegmentPair, swap: bool, seq_len: usize) -> Result<(PackedPair, u8), CorpusError> {
    Ok((pack_pair(pair, swap, seq_len)?, swap as u8))
}

/// Whole-word masking in place. `word_spans` must cover only content
/// positions.
pub fn apply_mlm<R: Rng + ?Sized>(
    input_ids: &mut [u32],
    word_spans: &[Range<usize>],
    vocab_size: usize,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> (Vec<i64>, MlmOutcome) {
    let mut labels = vec![IGNORE_INDEX; input_ids.len()];
    let content: usize = word_spans.iter().map(|s| s.len()).sum();
    let mut outcome = MlmOutcome {
        content_tokens: content,
        ..Default::default()
    };
    if cfg.mlm_rate <= 0.0 || word_spans.is_empty() {
        return (labels, outcome);
    }
    let budget = (cfg.mlm_rate * content as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..word_spans.len()).collect();
    order.shuffle(rng);

    let mut selected = Vec::new();
    for w in order {
        if outcome.selected_tokens >= budget {
            break;
        }
        let len = word_spans[w].len();
        // the first word is always taken, even if it overshoots
        if outcome.selected_tokens > 0 && outcome.selected_tokens + len > budget {
            continue;
        }
        outcome.selected_tokens += len;
        selected.push(w);
    }
    // Action draws happen in selection order.
    for w in selected {
        let span = word_spans[w].clone();
        for i in span.clone() {
            labels[i] = input_ids[i] as i64;
        }
        let u: f64 = rng.random();
        if u < cfg.mask_prob {
            outcome.words_masked += 1;
            input_ids[span].iter_mut().for_each(|t| *t = MASK_ID);
        } else if u < cfg.mask_prob + cfg.random_prob {
            outcome.words_random += 1;
            for t in &mut input_ids[span] {
                *t = rng.random_range(NUM_SPECIALS..vocab_size as u32);
            }
        } else {
            outcome.words_kept += 1;
        }
    }
    (labels, outcome)
}

/// Tokens that may take part in word-order shuffling.
pub fn wop_eligible(id: u32) -> bool {
    !matches!(id, PAD_ID | CLS_ID | SEP_ID | MASK_ID)
}

/// Maximal runs of eligible positions.
pub fn eligible_spans(input_ids: &[u32]) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &id) in input_ids.iter().enumerate() {
        match (wop_eligible(id), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..input_ids.len());
    }
    spans
}

/// Random permutation of `0..n` with no fixed point, by rejection.
fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(n >= 2);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Word-order corruption in place, applied with probability `cfg.p_wop`.
pub fn apply_wop<R: Rng + ?Sized>(
    input_ids: &mut [u32],
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> (Vec<i64>, WopOutcome) {
    let mut labels = vec![IGNORE_INDEX; input_ids.len()];
    let mut outcome = WopOutcome::default();
    if !rng.random_bool(cfg.p_wop) {
        return (labels, outcome);
    }
    outcome.applied = true;
    let spans = eligible_spans(input_ids);
    let eligible: Vec<usize> = spans.iter().flat_map(|s| s.clone()).collect();
    outcome.eligible = eligible.len();
    let k = (cfg.wop_rate * eligible.len() as f64).floor() as usize;
    if k < 2 {
        return (labels, outcome);
    }
    let mut chosen: Vec<usize> = sample(rng, eligible.len(), k)
        .into_iter()
        .map(|j| eligible[j])
        .collect();
    chosen.sort_unstable();

    let original = input_ids.to_vec();
    let mut rest = chosen.as_slice();
    for span in &spans {
        let n = rest.iter().take_while(|&&p| p < span.end).count();
        let (in_span, tail) = rest.split_at(n);
        rest = tail;
        if in_span.len() < 2 {
            continue;
        }
        let perm = derangement(in_span.len(), rng);
        for (dst, &src) in in_span.iter().zip(&perm) {
            input_ids[*dst] = original[in_span[src]];
            labels[*dst] = in_span[src] as i64;
        }
        outcome.moved += in_span.len();
    }
    (labels, outcome)
}

/// Runs the full pipeline on one pair with the given random stream.
pub fn build_example_with<R: Rng + ?Sized>(
    pair: &SegmentPair,
    vocab_size: usize,
    seq_len: usize,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<(CorruptedExample, MlmOutcome, WopOutcome), CorruptionError> {
    let (packed, sop_label) = if cfg.enable_sop {
        apply_sop(pair, seq_len, rng)?
    } else {
        (pack_pair(pair, false, seq_len)?, 0)
    };
    let spans = packed.word_spans.clone();
    let mut ex = CorruptedExample::from_packed(packed, sop_label);
    let mut mlm = MlmOutcome {
        content_tokens: spans.iter().map(|s| s.len()).sum(),
        ..Default::default()
    };
    if cfg.enable_mlm {
        let (labels, outcome) = apply_mlm(&mut ex.input_ids, &spans, vocab_size, cfg, rng);
        ex.mlm_labels = labels;
        mlm = outcome;
    }
    let mut wop = WopOutcome::default();
    if cfg.enable_wop {
        let (labels, outcome) = apply_wop(&mut ex.input_ids, cfg, rng);
        ex.wop_labels = labels;
        wop = outcome;
    }
    Ok((ex, mlm, wop))
}

/// Deterministic example for `(cfg.seed, example_index)`.
pub fn build_example(
    pair: &SegmentPair,
    vocab_size: usize,
    seq_len: usize,
    cfg: &CorruptionConfig,
    example_index: u64,
) -> Result<CorruptedExample, CorruptionError> {
    let mut rng = example_rng(cfg.seed, example_index);
    build_example_with(pair, vocab_size, seq_len, cfg, &mut rng).map(|(ex, _, _)| ex)
}

/// Corrupts every pair, example `i` using stream `i`.
pub fn build_examples(
    pairs: &[SegmentPair],
    vocab_size: usize,
    seq_len: usize,
    cfg: &CorruptionConfig,
) -> Result<(Vec<CorruptedExample>, CorruptionStats), CorruptionError> {
    cfg.validate()?;
    if vocab_size <= NUM_SPECIALS as usize {
        return Err(CorruptionError::InvalidConfig(format!(
            "vocabulary of {vocab_size} has no content tokens"
        )));
    }
    let mut stats = CorruptionStats::default();
    let mut out = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mut rng = example_rng(cfg.seed, i as u64);
        let (ex, mlm, wop) = build_example_with(pair, vocab_size, seq_len, cfg, &mut rng)?;
        stats.record(ex.sop_label, &mlm, &wop);
        out.push(ex);
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenSeq;

    fn seq(ids: &[u32], spans: Vec<Range<usize>>) -> TokenSeq {
        TokenSeq {
            ids: ids.to_vec(),
            pieces: ids.iter().map(|i| format!("t{i}")).collect(),
            word_spans: spans,
        }
    }

    fn pair() -> SegmentPair {
        SegmentPair {
            a_tokens: seq(&[10, 11, 12], vec![0..2, 2..3]),
            b_tokens: seq(&[20, 21], vec![0..1, 1..2]),
            doc_id: "d".into(),
            a_index: 0,
        }
    }

    #[test]
    fn sop_forced_orders() {
        let (packed, label) = pack_for_sop(&pair(), false, 12).unwrap();
        assert_eq!(label, 0);
        assert_eq!(&packed.input_ids[..7], &[CLS_ID, 10, 11, 12, SEP_ID, 20, 21]);
        let (packed, label) = pack_for_sop(&pair(), true, 12).unwrap();
        assert_eq!(label, 1);
        assert_eq!(&packed.input_ids[..7], &[CLS_ID, 20, 21, SEP_ID, 10, 11, 12]);
    }

    #[test]
    fn sop_fair_coin() {
        let mut rng = example_rng(11, 0);
        let swaps = (0..10_000)
            .filter(|_| apply_sop(&pair(), 12, &mut rng).unwrap().1 == 1)
            .count();
        let frac = swaps as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn mlm_rate_zero_is_inert() {
        let mut ids = vec![CLS_ID, 10, 11, SEP_ID];
        let cfg = CorruptionConfig { mlm_rate: 0.0, ..Default::default() };
        let (labels, out) = apply_mlm(&mut ids, &[1..3], 50, &cfg, &mut example_rng(0, 0));
        assert_eq!(ids, [CLS_ID, 10, 11, SEP_ID]);
        assert!(labels.iter().all(|&l| l == IGNORE_INDEX));
        assert_eq!(out.selected_tokens, 0);
    }

    #[test]
    fn mlm_single_word_forced_mask() {
        let mut ids = vec![CLS_ID, 10, 11, 12, SEP_ID];
        let cfg = CorruptionConfig {
            mlm_rate: 1.0,
            mask_prob: 1.0,
            random_prob: 0.0,
            keep_prob: 0.0,
            ..Default::default()
        };
        let (labels, _) = apply_mlm(&mut ids, &[1..4], 50, &cfg, &mut example_rng(0, 0));
        assert_eq!(ids, [CLS_ID, MASK_ID, MASK_ID, MASK_ID, SEP_ID]);
        assert_eq!(labels, [-1, 10, 11, 12, -1]);
    }

    #[test]
    fn mlm_first_word_may_overshoot() {
        // budget ceil(0.15*4)=1 but the only word has 4 pieces
        let mut ids = vec![CLS_ID, 10, 11, 12, 13, SEP_ID];
        let cfg = CorruptionConfig::default();
        let (labels, out) = apply_mlm(&mut ids, &[1..5], 50, &cfg, &mut example_rng(1, 1));
        assert_eq!(out.selected_tokens, 4);
        assert_eq!(labels.iter().filter(|&&l| l != -1).count(), 4);
    }

    #[test]
    fn eligible_spans_split_on_masks_and_specials() {
        let ids = [CLS_ID, 10, 11, MASK_ID, 12, 13, SEP_ID, 14, SEP_ID, PAD_ID];
        assert_eq!(eligible_spans(&ids), vec![1..3, 4..6, 7..8]);
    }

    #[test]
    fn wop_disabled_by_probability() {
        let mut ids = vec![CLS_ID, 10, 11, 12, 13, SEP_ID];
        let cfg = CorruptionConfig { p_wop: 0.0, wop_rate: 1.0, ..Default::default() };
        let (labels, out) = apply_wop(&mut ids, &cfg, &mut example_rng(0, 0));
        assert!(!out.applied);
        assert_eq!(ids, [CLS_ID, 10, 11, 12, 13, SEP_ID]);
        assert!(labels.iter().all(|&l| l == -1));
    }

    #[test]
    fn wop_two_selected_positions_swap() {
        let mut ids = vec![CLS_ID, 10, 11, SEP_ID];
        let cfg = CorruptionConfig { p_wop: 1.0, wop_rate: 1.0, ..Default::default() };
        let (labels, out) = apply_wop(&mut ids, &cfg, &mut example_rng(5, 0));
        assert_eq!(ids, [CLS_ID, 11, 10, SEP_ID]);
        assert_eq!(labels, [-1, 2, 1, -1]);
        assert_eq!(out.moved, 2);
    }

    #[test]
    fn wop_never_crosses_a_mask() {
        let cfg = CorruptionConfig { p_wop: 1.0, wop_rate: 1.0, ..Default::default() };
        let base = [CLS_ID, 21, 22, MASK_ID, 23, 24, SEP_ID];
        for seed in 0..1000 {
            let mut ids = base.to_vec();
            let (labels, _) = apply_wop(&mut ids, &cfg, &mut example_rng(seed, 0));
            for (i, &l) in labels.iter().enumerate() {
                if l >= 0 {
                    assert_eq!(i < 3, (l as usize) < 3, "seed {seed}: {i} <- {l}");
                }
            }
            let mut left = ids[1..3].to_vec();
            left.sort();
            assert_eq!(left, [21, 22]);
        }
    }

    #[test]
    fn disabled_objectives_leave_labels_inert() {
        let cfg = CorruptionConfig {
            enable_mlm: false,
            enable_sop: false,
            enable_wop: false,
            ..Default::default()
        };
        let ex = build_example(&pair(), 50, 12, &cfg, 3).unwrap();
        assert_eq!(ex, CorruptedExample::from_packed(pack_pair(&pair(), false, 12).unwrap(), 0));

        let cfg = CorruptionConfig { enable_wop: false, p_wop: 1.0, ..Default::default() };
        for i in 0..50 {
            let ex = build_example(&pair(), 50, 12, &cfg, i).unwrap();
            assert!(ex.wop_labels.iter().all(|&l| l == -1));
        }
    }

    #[test]
    fn examples_are_deterministic_per_index() {
        let cfg = CorruptionConfig { p_wop: 1.0, ..Default::default() };
        let a = build_example(&pair(), 50, 12, &cfg, 7).unwrap();
        let b = build_example(&pair(), 50, 12, &cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(CorruptionConfig::default().validate().is_ok());
        let bad = CorruptionConfig { keep_prob: 0.2, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = CorruptionConfig { p_wop: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
