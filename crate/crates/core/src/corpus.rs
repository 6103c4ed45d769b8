//! Raw text ingestion and two-segment packing.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::tokenizer::{TokenSeq, Vocab, CLS_ID, PAD_ID, SEP_ID};

/// Smallest supported packed sequence length.
pub const MIN_SEQ_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid UTF-8 (byte {valid_up_to})")]
    InvalidUtf8 { path: PathBuf, valid_up_to: usize },
    #[error("sequence length {0} is below the minimum of {MIN_SEQ_LEN}")]
    SeqLenTooSmall(usize),
    #[error("a segment is empty after truncating to {seq_len} tokens")]
    SegmentEmptyAfterTruncation { seq_len: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<String>,
}

/// NFC-normalizes a line and collapses internal whitespace runs.
pub fn normalize_sentence(line: &str) -> String {
    let nfc: String = line.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits text into documents: blank lines separate documents and every
/// other line is one sentence.
pub fn parse_documents(text: &str, source: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    let flush = |current: &mut Vec<String>, docs: &mut Vec<Document>| {
        if !current.is_empty() {
            docs.push(Document {
                id: format!("{source}#{}", docs.len()),
                sentences: std::mem::take(current),
            });
        }
    };
    for line in text.lines() {
        let s = normalize_sentence(line);
        if s.is_empty() {
            flush(&mut current, &mut docs);
        } else {
            current.push(s);
        }
    }
    flush(&mut current, &mut docs);
    docs
}

/// Reads every file (ordered by path) into documents.
pub fn ingest<P: AsRef<Path>>(files: &[P]) -> Result<Vec<Document>, CorpusError> {
    let mut paths: Vec<&Path> = files.iter().map(AsRef::as_ref).collect();
    paths.sort();
    let mut docs = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|source| CorpusError::Io {
            path: path.to_owned(),
            source,
        })?;
        let text = String::from_utf8(bytes).map_err(|e| CorpusError::InvalidUtf8 {
            path: path.to_owned(),
            valid_up_to: e.utf8_error().valid_up_to(),
        })?;
        docs.extend(parse_documents(&text, &path.display().to_string()));
    }
    Ok(docs)
}

/// Two consecutive sentences of one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPair {
    pub a_tokens: TokenSeq,
    pub b_tokens: TokenSeq,
    pub doc_id: String,
    pub a_index: usize,
}

/// Consecutive sentence pairs of `doc`, pre-truncated to fit `seq_len`.
/// Pairs that cannot fit without emptying a segment are skipped.
pub fn make_segment_pairs(doc: &Document, vocab: &Vocab, seq_len: usize) -> Vec<SegmentPair> {
    let encoded: Vec<TokenSeq> = doc.sentences.iter().map(|s| vocab.encode(s)).collect();
    encoded
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| {
            let (a_len, b_len) = truncated_lengths(&w[0], &w[1], seq_len).ok()?;
            Some(SegmentPair {
                a_tokens: w[0].prefix(a_len),
                b_tokens: w[1].prefix(b_len),
                doc_id: doc.id.clone(),
                a_index: i,
            })
        })
        .collect()
}

/// Token lengths of `a` and `b` after longest-first whole-word trimming to
/// `seq_len - 3` tokens in total. Ties trim `b`.
pub fn truncated_lengths(a: &TokenSeq, b: &TokenSeq, seq_len: usize) -> Result<(usize, usize), CorpusError> {
    if seq_len < MIN_SEQ_LEN {
        return Err(CorpusError::SeqLenTooSmall(seq_len));
    }
    let budget = seq_len - 3;
    let (mut a_len, mut b_len) = (a.len(), b.len());
    let drop_last_word = |seq: &TokenSeq, len: usize| {
        seq.word_spans
            .iter()
            .rev()
            .find(|s| s.start < len)
            .map_or(0, |s| s.start)
    };
    while a_len + b_len > budget {
        if a_len > b_len {
            a_len = drop_last_word(a, a_len);
        } else {
            b_len = drop_last_word(b, b_len);
        }
    }
    if a_len == 0 || b_len == 0 {
        return Err(CorpusError::SegmentEmptyAfterTruncation { seq_len });
    }
    Ok((a_len, b_len))
}

/// Fixed-length model input for one segment pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedPair {
    pub input_ids: Vec<u32>,
    pub token_type_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Word spans in absolute positions of `input_ids`.
    pub word_spans: Vec<Range<usize>>,
}

/// Lays out `[CLS] X [SEP] Y [SEP] [PAD]...` with `(X, Y) = (A, B)`, or
/// `(B, A)` when `swap` is set.
pub fn pack_pair(pair: &SegmentPair, swap: bool, seq_len: usize) -> Result<PackedPair, CorpusError> {
    let (a_len, b_len) = truncated_lengths(&pair.a_tokens, &pair.b_tokens, seq_len)?;
    let a = pair.a_tokens.prefix(a_len);
    let b = pair.b_tokens.prefix(b_len);
    let (x, y) = if swap { (&b, &a) } else { (&a, &b) };

    let mut input_ids = Vec::with_capacity(seq_len);
    let mut token_type_ids = Vec::with_capacity(seq_len);
    let mut word_spans = Vec::with_capacity(x.word_spans.len() + y.word_spans.len());

    input_ids.push(CLS_ID);
    let x_off = input_ids.len();
    input_ids.extend(&x.ids);
    input_ids.push(SEP_ID);
    token_type_ids.resize(input_ids.len(), 0);
    let y_off = input_ids.len();
    input_ids.extend(&y.ids);
    input_ids.push(SEP_ID);
    token_type_ids.resize(input_ids.len(), 1);

    word_spans.extend(x.word_spans.iter().map(|s| s.start + x_off..s.end + x_off));
    word_spans.extend(y.word_spans.iter().map(|s| s.start + y_off..s.end + y_off));

    let used = input_ids.len();
    let mut attention_mask = vec![1u8; used];
    input_ids.resize(seq_len, PAD_ID);
    token_type_ids.resize(seq_len, 0);
    attention_mask.resize(seq_len, 0);
    Ok(PackedPair {
        input_ids,
        token_type_ids,
        attention_mask,
        word_spans,
    })
}
