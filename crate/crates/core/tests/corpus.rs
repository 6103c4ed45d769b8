use albert_wop::corpus::{pack_pair, truncated_lengths, CorpusError, SegmentPair};
use albert_wop::tokenizer::{TokenSeq, CLS_ID, NUM_SPECIALS, PAD_ID, SEP_ID};
use proptest::prelude::*;

/// A token sequence from word lengths; piece ids encode (word, piece) so
/// that truncation points are recoverable.
fn seq(word_lens: &[usize], base: u32) -> TokenSeq {
    let mut s = TokenSeq::default();
    for (w, &len) in word_lens.iter().enumerate() {
        let start = s.ids.len();
        for p in 0..len {
            s.ids.push(base + (w * 8 + p) as u32);
            s.pieces.push(if p == 0 { format!("w{w}") } else { format!("##p{p}") });
        }
        s.word_spans.push(start..s.ids.len());
    }
    s
}

fn pair(a: &[usize], b: &[usize]) -> SegmentPair {
    SegmentPair {
        a_tokens: seq(a, NUM_SPECIALS),
        b_tokens: seq(b, 1000),
        doc_id: "d".into(),
        a_index: 0,
    }
}

fn word_lens() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..12)
}

/// Whether `len` lands on a word boundary of `s`.
fn on_boundary(s: &TokenSeq, len: usize) -> bool {
    s.word_spans.iter().any(|w| w.end == len)
}

fn next_boundary(s: &TokenSeq, len: usize) -> usize {
    s.word_spans.iter().find(|w| w.start == len).map(|w| w.end).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn packed_layout_invariants(a in word_lens(), b in word_lens(), swap: bool, seq_len in 8usize..48) {
        let p = pair(&a, &b);
        let packed = match pack_pair(&p, swap, seq_len) {
            Ok(packed) => packed,
            Err(CorpusError::SegmentEmptyAfterTruncation { .. }) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        prop_assert_eq!(packed.input_ids.len(), seq_len);
        prop_assert_eq!(packed.token_type_ids.len(), seq_len);
        prop_assert_eq!(packed.attention_mask.len(), seq_len);

        let live: Vec<u32> = packed.input_ids.iter().zip(&packed.attention_mask)
            .filter(|(_, &m)| m == 1).map(|(&id, _)| id).collect();
        prop_assert_eq!(live.iter().filter(|&&id| id == CLS_ID).count(), 1);
        prop_assert_eq!(live.iter().filter(|&&id| id == SEP_ID).count(), 2);
        prop_assert_eq!(live[0], CLS_ID);
        prop_assert_eq!(*live.last().unwrap(), SEP_ID);
        for (i, &id) in packed.input_ids.iter().enumerate() {
            prop_assert_eq!(packed.attention_mask[i] == 0, id == PAD_ID);
        }

        let (a_len, b_len) = truncated_lengths(&p.a_tokens, &p.b_tokens, seq_len).unwrap();
        prop_assert!(a_len + b_len + 3 <= seq_len);
        prop_assert!(on_boundary(&p.a_tokens, a_len) && on_boundary(&p.b_tokens, b_len));
        let (x, y) = if swap { (&p.b_tokens.ids[..b_len], &p.a_tokens.ids[..a_len]) }
                     else { (&p.a_tokens.ids[..a_len], &p.b_tokens.ids[..b_len]) };
        let mut expected = vec![CLS_ID];
        expected.extend(x);
        expected.push(SEP_ID);
        expected.extend(y);
        expected.push(SEP_ID);
        prop_assert_eq!(&live, &expected);

        let first_sep = x.len() + 1;
        for (i, &t) in packed.token_type_ids.iter().enumerate() {
            let want = u8::from(i > first_sep && i < live.len());
            prop_assert_eq!(t, want);
        }
        let covered: usize = packed.word_spans.iter().map(|s| s.len()).sum();
        prop_assert_eq!(covered, a_len + b_len);
        for s in &packed.word_spans {
            prop_assert!(s.start >= 1 && s.end < live.len());
            prop_assert!(packed.input_ids[s.clone()].iter().all(|&id| id >= NUM_SPECIALS));
        }
    }

    #[test]
    fn truncation_is_longest_first(a in word_lens(), b in word_lens(), seq_len in 8usize..48) {
        let p = pair(&a, &b);
        let Ok((a_len, b_len)) = truncated_lengths(&p.a_tokens, &p.b_tokens, seq_len) else {
            return Ok(());
        };
        let budget = seq_len - 3;
        if p.a_tokens.len() + p.b_tokens.len() <= budget {
            prop_assert_eq!((a_len, b_len), (p.a_tokens.len(), p.b_tokens.len()));
        } else {
            prop_assert!(a_len + b_len <= budget);
            // A segment's last trimmed word was removed while that segment
            // was the longer one (ties trim b), and lengths only shrink.
            if a_len < p.a_tokens.len() {
                prop_assert!(next_boundary(&p.a_tokens, a_len) > b_len);
            }
            if b_len < p.b_tokens.len() {
                prop_assert!(next_boundary(&p.b_tokens, b_len) >= a_len);
            }
        }
    }
}
