//! Small deterministic corpora built from a fixed word list.

use albert_wop::corpus::{make_segment_pairs, Document, SegmentPair};
use albert_wop::tokenizer::{build_vocab, Vocab};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &[
    "the", "cat", "sat", "on", "mat", "dog", "ran", "far", "away", "from", "home", "we", "saw", "a", "bird",
    "fly", "over", "tall", "trees", "and", "then", "it", "rained", "all", "day", "long", "children", "played",
    "in", "park", "while", "parents", "watched", "quietly", "river", "flowed", "past", "old", "mill",
];

pub fn sentence(rng: &mut impl Rng, min_words: usize, max_words: usize) -> String {
    let n = rng.random_range(min_words..=max_words);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn documents(seed: u64, docs: usize, sentences: usize, min_words: usize, max_words: usize) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|d| Document {
            id: format!("doc{d}"),
            sentences: (0..sentences).map(|_| sentence(&mut rng, min_words, max_words)).collect(),
        })
        .collect()
}

/// A vocabulary of at most `vocab_size` tokens learned from `docs`, and
/// every segment pair of `docs` at `seq_len`.
pub fn pairs(docs: &[Document], vocab_size: usize, seq_len: usize) -> (Vocab, Vec<SegmentPair>) {
    let vocab = build_vocab(docs.iter().flat_map(|d| d.sentences.iter()), vocab_size).unwrap();
    let pairs = docs.iter().flat_map(|d| make_segment_pairs(d, &vocab, seq_len)).collect();
    (vocab, pairs)
}
