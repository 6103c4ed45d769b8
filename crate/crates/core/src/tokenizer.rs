//! Byte-pair subword vocabulary with explicit word boundaries.
//!
//! Pieces that continue a word carry a reserved prefix (the continuation
//! marker, `##` by default), so whole words can be recovered from a piece
//! sequence alone. Training merges the most frequent adjacent symbol pair
//! until the target size is reached; encoding is greedy longest match.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS as usize] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const DEFAULT_MARKER: &str = "##";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary size {target} is below the {required} tokens needed for specials and alphabet")]
    VocabTooSmall { target: usize, required: usize },
    #[error("token id {id} out of range for vocabulary of {len}")]
    IdOutOfRange { id: u32, len: usize },
    #[error("continuation piece at word-initial position {index}")]
    MalformedSequence { index: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// NFC normalization followed by whitespace splitting.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    normalized.split_whitespace().map(str::to_owned).collect()
}

/// Immutable subword inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    marker: String,
    max_piece_chars: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    continuation_marker: String,
    specials: BTreeMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list whose first five
    /// entries are the special tokens.
    pub fn from_tokens(tokens: Vec<String>, marker: &str) -> Result<Self, TokenizerError> {
        if marker.is_empty() {
            return Err(TokenizerError::InvalidVocab("empty continuation marker".into()));
        }
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(TokenizerError::InvalidVocab("missing special tokens".into()));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(TokenizerError::InvalidVocab(format!(
                    "id {i} must be {s}, found {}",
                    tokens[i]
                )));
            }
        }
        if tokens.len() > u32::MAX as usize {
            return Err(TokenizerError::InvalidVocab("too many tokens".into()));
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TokenizerError::InvalidVocab(format!("empty token at id {i}")));
            }
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let max_piece_chars = tokens
            .iter()
            .skip(SPECIAL_TOKENS.len())
            .map(|t| t.strip_prefix(marker).unwrap_or(t).chars().count())
            .max()
            .unwrap_or(0);
        Ok(Self {
            tokens,
            id_of,
            marker: marker.to_owned(),
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str, TokenizerError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TokenizerError::IdOutOfRange { id, len: self.len() })
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    /// Whether `piece` continues a word rather than starting one.
    pub fn is_continuation(&self, piece: &str) -> bool {
        is_continuation(piece, &self.marker)
    }

    /// Non-special tokens that span more than one character, in vocabulary
    /// order (i.e. the learned merges).
    pub fn merged_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens[SPECIAL_TOKENS.len()..]
            .iter()
            .filter(|t| t.strip_prefix(self.marker.as_str()).unwrap_or(t).chars().count() > 1)
            .map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        let mut seq = TokenSeq::default();
        for word in pre_tokenize(text) {
            let start = seq.ids.len();
            self.encode_word(&word, &mut seq);
            seq.word_spans.push(start..seq.ids.len());
        }
        seq
    }

    fn encode_word(&self, word: &str, seq: &mut TokenSeq) {
        let chars: Vec<char> = word.chars().collect();
        let mut pos = 0;
        let mut candidate = String::new();
        while pos < chars.len() {
            let longest = (chars.len() - pos).min(self.max_piece_chars);
            let mut matched = None;
            for len in (1..=longest).rev() {
                candidate.clear();
                if pos > 0 {
                    candidate.push_str(&self.marker);
                }
                candidate.extend(&chars[pos..pos + len]);
                // a word-initial piece may not look like a continuation
                if pos == 0 && self.is_continuation(&candidate) {
                    continue;
                }
                if let Some(&id) = self.id_of.get(&candidate) {
                    if !Self::is_special(id) {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    seq.ids.push(id);
                    seq.pieces.push(self.tokens[id as usize].clone());
                    pos += len;
                }
                None => {
                    seq.ids.push(UNK_ID);
                    seq.pieces.push(SPECIAL_TOKENS[UNK_ID as usize].to_owned());
                    pos += 1;
                }
            }
        }
    }

    /// Joins pieces back into space-separated words. Specials render as
    /// their literal strings.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id)?;
            match tok.strip_prefix(self.marker.as_str()) {
                Some(rest) if !Self::is_special(id) && !rest.is_empty() && !out.is_empty() => {
                    out.push_str(rest)
                }
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let file = VocabFile {
            continuation_marker: self.marker.clone(),
            specials: SPECIAL_TOKENS
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i as u32))
                .collect(),
            tokens: self.tokens.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let expected: BTreeMap<String, u32> = SPECIAL_TOKENS
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i as u32))
            .collect();
        if file.specials != expected {
            return Err(TokenizerError::InvalidVocab(format!(
                "special token ids {:?} differ from the fixed assignment {:?}",
                file.specials, expected
            )));
        }
        Self::from_tokens(file.tokens, &file.continuation_marker)
    }
}

fn is_continuation(piece: &str, marker: &str) -> bool {
    piece.len() > marker.len() && piece.starts_with(marker)
}

/// Token ids with their pieces and source-word grouping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub pieces: Vec<String>,
    pub word_spans: Vec<Range<usize>>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The first `len` tokens. `len` must fall on a word boundary.
    pub fn prefix(&self, len: usize) -> TokenSeq {
        debug_assert!(len == 0 || self.word_spans.iter().any(|s| s.end == len));
        TokenSeq {
            ids: self.ids[..len].to_vec(),
            pieces: self.pieces[..len].to_vec(),
            word_spans: self
                .word_spans
                .iter()
                .filter(|s| s.end <= len)
                .cloned()
                .collect(),
        }
    }
}

/// Recovers word spans from pieces using the continuation marker.
pub fn word_spans(pieces: &[impl AsRef<str>], marker: &str) -> Result<Vec<Range<usize>>, TokenizerError> {
    let mut spans: Vec<Range<usize>> = Vec::new();
    for (i, p) in pieces.iter().enumerate() {
        if is_continuation(p.as_ref(), marker) {
            match spans.last_mut() {
                Some(last) => last.end = i + 1,
                None => return Err(TokenizerError::MalformedSequence { index: i }),
            }
        } else {
            spans.push(i..i + 1);
        }
    }
    Ok(spans)
}

/// Learns a vocabulary with the default continuation marker.
pub fn build_vocab<I, S>(corpus: I, target_size: usize) -> Result<Vocab, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    BpeTrainer::new(target_size).train(corpus)
}

/// Greedy byte-pair merge learner.
#[derive(Clone, Debug)]
pub struct BpeTrainer {
    target_size: usize,
    marker: String,
}

impl BpeTrainer {
    pub fn new(target_size: usize) -> Self {
        Self {
            target_size,
            marker: DEFAULT_MARKER.to_owned(),
        }
    }

    pub fn with_marker(mut self, marker: &str) -> Self {
        self.marker = marker.to_owned();
        self
    }

    pub fn train<I, S>(&self, corpus: I) -> Result<Vocab, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for w in pre_tokenize(line.as_ref()) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();

        // Every character gets a word-initial and a continuation form so
        // that any string over the alphabet stays encodable.
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet.iter().map(|c| c.to_string()));
        tokens.extend(alphabet.iter().map(|c| format!("{}{c}", self.marker)));
        let required = tokens.len();
        if self.target_size < required {
            return Err(TokenizerError::VocabTooSmall {
                target: self.target_size,
                required,
            });
        }
        let mut id_of: HashMap<String, u32> = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::InvalidVocab(format!(
                    "alphabet symbol {t:?} collides with another token"
                )));
            }
        }

        let mut words: Vec<(Vec<u32>, u64)> = word_counts
            .iter()
            .map(|(w, &count)| {
                let symbols = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        let s = if i == 0 { c.to_string() } else { format!("{}{c}", self.marker) };
                        id_of[&s]
                    })
                    .collect();
                (symbols, count)
            })
            .collect();

        while tokens.len() < self.target_size {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (symbols, count) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts.entry((pair[0], pair[1])).or_default() += count;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .filter(|&((a, b), _)| {
                    // a word-initial merge must not read as a continuation piece
                    let first_is_initial = !is_continuation(&tokens[a as usize], &self.marker);
                    !(first_is_initial && is_continuation(&self.merged(&tokens, a, b), &self.marker))
                })
                .max_by(|&((a1, b1), c1), &((a2, b2), c2)| {
                    c1.cmp(&c2).then_with(|| {
                        let k1 = format!("{}{}", tokens[a1 as usize], tokens[b1 as usize]);
                        let k2 = format!("{}{}", tokens[a2 as usize], tokens[b2 as usize]);
                        // lexicographically smaller concatenation wins
                        k2.cmp(&k1)
                    })
                });
            let Some(((a, b), _)) = best else { break };
            let merged = self.merged(&tokens, a, b);
            let new_id = match id_of.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = tokens.len() as u32;
                    id_of.insert(merged.clone(), id);
                    tokens.push(merged);
                    id
                }
            };
            for (symbols, _) in words.iter_mut() {
                apply_merge(symbols, a, b, new_id);
            }
        }
        Vocab::from_tokens(tokens, &self.marker)
    }

    fn merged(&self, tokens: &[String], a: u32, b: u32) -> String {
        let right = &tokens[b as usize];
        format!(
            "{}{}",
            tokens[a as usize],
            right.strip_prefix(self.marker.as_str()).unwrap_or(right)
        )
    }
}

fn apply_merge(symbols: &mut Vec<u32>, a: u32, b: u32, merged: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}
