//! Byte-level BPE: pre-tokenization, merge training, encoding, and the
//! per-byte boundary annotation derived from a segmentation.
//!
//! Token ids `0..=255` are raw bytes, `256..=258` are the specials
//! ([`BOS`], [`EOS`], [`PAD`]) and learned merges start at [`FIRST_MERGE_ID`].
//! A model's `vocab_size` counts bytes plus merges; specials are extra.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const FIRST_MERGE_ID: u32 = 259;
/// Raw byte tokens.
pub const BYTE_VOCAB: usize = 256;

const FORMAT_VERSION: u32 = 1;

/// Byte classes used by the pre-tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Other,
}

fn class_of(b: u8) -> Class {
    match b {
        b' ' => Class::Space,
        b'0'..=b'9' => Class::Digit,
        b if b.is_ascii_alphabetic() || b >= 0x80 => Class::Letter,
        _ => Class::Other,
    }
}

fn is_word(c: Class) -> bool {
    matches!(c, Class::Letter | Class::Digit)
}

/// Pre-tokenization rule identifier stored in tokenizer files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreTokenizer {
    /// Split at byte-class transitions; a single space binds to the word
    /// that follows it. Bytes >= 0x80 count as letters so multi-byte UTF-8
    /// characters stay inside words.
    #[serde(rename = "class-transition-v1")]
    ClassTransition,
}

impl PreTokenizer {
    pub fn id(self) -> &'static str {
        match self {
            PreTokenizer::ClassTransition => "class-transition-v1",
        }
    }

    fn from_id(id: &str) -> Option<Self> {
        (id == "class-transition-v1").then_some(PreTokenizer::ClassTransition)
    }
}

/// Split `bytes` into contiguous pre-token spans.
///
/// A span starts at every class transition except space -> letter/digit,
/// and at the last space of a run of two or more spaces when a word follows,
/// so `"a  b"` becomes `["a", " ", " b"]`.
pub fn pretokenize(bytes: &[u8]) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    if bytes.is_empty() {
        return spans;
    }
    let mut start = 0;
    for i in 1..bytes.len() {
        let (prev, cur) = (class_of(bytes[i - 1]), class_of(bytes[i]));
        let split = if prev != cur {
            !(prev == Class::Space && is_word(cur))
        } else {
            cur == Class::Space && bytes.get(i + 1).is_some_and(|&b| is_word(class_of(b)))
        };
        if split {
            spans.push(start..i);
            start = i;
        }
    }
    spans.push(start..bytes.len());
    spans
}

/// A trained byte-level BPE model.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerModel {
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    /// Byte string of each id; empty for specials.
    vocab: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
    /// Parent ids of each merge, by rank.
    parents: Vec<(u32, u32)>,
    pretokenizer: PreTokenizer,
}

/// Per-byte view of a segmentation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoundaryAnnotation {
    /// 1 at the first byte of each token.
    pub start: Vec<u8>,
    /// 1 at the last byte of each token.
    pub end: Vec<u8>,
    /// Index of the token containing each byte.
    pub token_index: Vec<u32>,
    pub token_ids: Vec<u32>,
    pub offsets: Vec<Range<usize>>,
}

impl BoundaryAnnotation {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    /// Build from the token spans of a segmentation of `n` bytes.
    pub fn from_offsets(n: usize, token_ids: Vec<u32>, offsets: Vec<Range<usize>>) -> Self {
        let mut start = vec![0u8; n];
        let mut end = vec![0u8; n];
        let mut token_index = vec![0u32; n];
        for (m, span) in offsets.iter().enumerate() {
            start[span.start] = 1;
            end[span.end - 1] = 1;
            token_index[span.clone()].iter_mut().for_each(|t| *t = m as u32);
        }
        BoundaryAnnotation {
            start,
            end,
            token_index,
            token_ids,
            offsets,
        }
    }
}

impl TokenizerModel {
    /// A model with no merges: every byte is its own token.
    pub fn byte_level() -> Self {
        Self::from_merges(Vec::new(), PreTokenizer::ClassTransition)
            .expect("empty merge list is valid")
    }

    /// Rebuild a model from an ordered merge list, checking that each merge's
    /// parents exist before it.
    pub fn from_merges(merges: Vec<(Vec<u8>, Vec<u8>)>, pretokenizer: PreTokenizer) -> Result<Self> {
        let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        vocab.extend([Vec::new(), Vec::new(), Vec::new()]);
        let mut by_bytes: HashMap<Vec<u8>, u32> =
            (0..=255u8).map(|b| (vec![b], b as u32)).collect();
        let mut ranks = HashMap::new();
        let mut parents = Vec::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let lookup = |s: &Vec<u8>| {
                by_bytes.get(s).copied().ok_or_else(|| {
                    Error::invalid("tokenizer", format!("merge {rank} uses unknown token {}", escape(s)))
                })
            };
            let (l, r) = (lookup(left)?, lookup(right)?);
            let mut joined = left.clone();
            joined.extend_from_slice(right);
            if by_bytes.contains_key(&joined) {
                return Err(Error::invalid(
                    "tokenizer",
                    format!("merge {rank} duplicates token {}", escape(&joined)),
                ));
            }
            let id = vocab.len() as u32;
            by_bytes.insert(joined.clone(), id);
            vocab.push(joined);
            ranks.insert((l, r), rank as u32);
            parents.push((l, r));
        }
        Ok(TokenizerModel {
            merges,
            vocab,
            ranks,
            parents,
            pretokenizer,
        })
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    /// Bytes plus merges (specials excluded).
    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB + self.merges.len()
    }

    /// Size of the id space including specials; the width of a subword head.
    pub fn id_space(&self) -> usize {
        self.vocab.len()
    }

    pub fn pretokenizer(&self) -> PreTokenizer {
        self.pretokenizer
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    fn merge_span(&self, span: &[u8]) -> Vec<u32> {
        let mut syms: Vec<u32> = span.iter().map(|&b| b as u32).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.parents[rank as usize];
            let new_id = FIRST_MERGE_ID + rank;
            syms = merge_pair(&syms, l, r, new_id);
        }
        syms
    }

    /// Encode to token ids and their half-open byte spans.
    pub fn encode(&self, bytes: &[u8]) -> (Vec<u32>, Vec<Range<usize>>) {
        self.encode_cached(bytes, &mut HashMap::new())
    }

    /// [`encode`](Self::encode) with a caller-owned span cache, for bulk use.
    pub fn encode_cached(
        &self,
        bytes: &[u8],
        cache: &mut HashMap<Vec<u8>, Vec<u32>>,
    ) -> (Vec<u32>, Vec<Range<usize>>) {
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        for span in pretokenize(bytes) {
            let piece = &bytes[span.clone()];
            let toks = if self.merges.is_empty() {
                piece.iter().map(|&b| b as u32).collect()
            } else if let Some(t) = cache.get(piece) {
                t.clone()
            } else {
                let t = self.merge_span(piece);
                cache.insert(piece.to_vec(), t.clone());
                t
            };
            let mut pos = span.start;
            for id in toks {
                let len = self.vocab[id as usize].len();
                offsets.push(pos..pos + len);
                ids.push(id);
                pos += len;
            }
        }
        (ids, offsets)
    }

    /// Concatenate token byte strings. Specials decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.vocab.get(id as usize).ok_or(Error::Index {
                op: "decode",
                index: id as usize,
                extent: self.vocab.len(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn annotate(&self, bytes: &[u8]) -> BoundaryAnnotation {
        self.annotate_cached(bytes, &mut HashMap::new())
    }

    pub fn annotate_cached(
        &self,
        bytes: &[u8],
        cache: &mut HashMap<Vec<u8>, Vec<u32>>,
    ) -> BoundaryAnnotation {
        let (ids, offsets) = self.encode_cached(bytes, cache);
        BoundaryAnnotation::from_offsets(bytes.len(), ids, offsets)
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            vocab_size: self.vocab_size(),
            pretokenizer: self.pretokenizer.id().to_string(),
            merges: self
                .merges
                .iter()
                .map(|(l, r)| [escape(l), escape(r)])
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::invalid(
                "tokenizer",
                format!("unsupported version {}", file.version),
            ));
        }
        let pretokenizer = PreTokenizer::from_id(&file.pretokenizer).ok_or_else(|| {
            Error::invalid("tokenizer", format!("unknown pretokenizer {}", file.pretokenizer))
        })?;
        let merges = file
            .merges
            .iter()
            .map(|[l, r]| Ok((unescape(l)?, unescape(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let model = Self::from_merges(merges, pretokenizer)?;
        if model.vocab_size() != file.vocab_size {
            return Err(Error::invalid(
                "tokenizer",
                format!(
                    "vocab_size {} disagrees with {} merges",
                    file.vocab_size,
                    model.merges.len()
                ),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    version: u32,
    vocab_size: usize,
    pretokenizer: String,
    merges: Vec<[String; 2]>,
}

/// Printable ASCII stays literal; everything else (and `\`) becomes `\xNN`.
pub fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x20..0x7f).contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            write!(s, "\\x{b:02x}").unwrap();
        }
    }
    s
}

pub fn unescape(s: &str) -> Result<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            let hex = raw
                .get(i + 1..i + 4)
                .filter(|h| h[0] == b'x')
                .and_then(|h| std::str::from_utf8(&h[1..]).ok())
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| Error::invalid("tokenizer", format!("bad escape in {s:?}")))?;
            out.push(hex);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    Ok(out)
}

fn merge_pair(syms: &[u32], l: u32, r: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

/// Train BPE merges over the pre-token spans of `docs` until the model has
/// `vocab_size` tokens (bytes + merges) or no adjacent pair occurs twice.
///
/// Each round merges the most frequent pair; ties go to the lexicographically
/// smaller left byte string, then the smaller right one.
pub fn train_bpe<I, D>(docs: I, vocab_size: usize) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = D>,
    D: AsRef<[u8]>,
{
    if vocab_size < BYTE_VOCAB {
        return Err(Error::invalid(
            "train_bpe",
            format!("vocab_size {vocab_size} is below the byte vocabulary"),
        ));
    }
    let mut span_counts: HashMap<Vec<u8>, u64> = HashMap::new();
    let mut any = false;
    for doc in docs {
        let doc = doc.as_ref();
        any |= !doc.is_empty();
        for span in pretokenize(doc) {
            *span_counts.entry(doc[span].to_vec()).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(Vec<u8>, u64)> = span_counts.into_iter().collect();
    words.sort_unstable();
    let counts: Vec<i64> = words.iter().map(|(_, c)| *c as i64).collect();
    let mut syms: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| w.iter().map(|&b| b as u32).collect())
        .collect();
    drop(words);

    let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    vocab.extend([Vec::new(), Vec::new(), Vec::new()]);

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (w, s) in syms.iter().enumerate() {
        for p in s.windows(2) {
            let key = (p[0], p[1]);
            *pair_counts.entry(key).or_default() += counts[w];
            let list = where_.entry(key).or_default();
            if list.last() != Some(&w) {
                list.push(w);
            }
        }
    }

    type Entry = (i64, Reverse<Vec<u8>>, Reverse<Vec<u8>>, (u32, u32));
    let entry = |vocab: &[Vec<u8>], key: (u32, u32), count: i64| -> Entry {
        (
            count,
            Reverse(vocab[key.0 as usize].clone()),
            Reverse(vocab[key.1 as usize].clone()),
            key,
        )
    };
    let mut heap: BinaryHeap<Entry> = pair_counts
        .iter()
        .map(|(&k, &c)| entry(&vocab, k, c))
        .collect();

    let mut merges = Vec::new();
    while BYTE_VOCAB + merges.len() < vocab_size {
        let Some((count, _, _, key)) = heap.pop() else { break };
        if pair_counts.get(&key) != Some(&count) {
            continue;
        }
        if count < 2 {
            break;
        }
        let new_id = vocab.len() as u32;
        let mut joined = vocab[key.0 as usize].clone();
        joined.extend_from_slice(&vocab[key.1 as usize]);
        merges.push((vocab[key.0 as usize].clone(), vocab[key.1 as usize].clone()));
        vocab.push(joined);

        let mut affected = where_.remove(&key).unwrap_or_default();
        affected.sort_unstable();
        affected.dedup();
        let mut touched: Vec<(u32, u32)> = Vec::new();
        for w in affected {
            let old = &syms[w];
            if !old.windows(2).any(|p| (p[0], p[1]) == key) {
                continue;
            }
            let new = merge_pair(old, key.0, key.1, new_id);
            for p in old.windows(2) {
                let k = (p[0], p[1]);
                *pair_counts.get_mut(&k).unwrap() -= counts[w];
                touched.push(k);
            }
            for p in new.windows(2) {
                let k = (p[0], p[1]);
                *pair_counts.entry(k).or_default() += counts[w];
                let list = where_.entry(k).or_default();
                if list.last() != Some(&w) {
                    list.push(w);
                }
                touched.push(k);
            }
            syms[w] = new;
        }
        touched.sort_unstable();
        touched.dedup();
        for k in touched {
            let c = pair_counts[&k];
            if c <= 0 {
                pair_counts.remove(&k);
                where_.remove(&k);
            } else {
                heap.push(entry(&vocab, k, c));
            }
        }
    }
    TokenizerModel::from_merges(merges, PreTokenizer::ClassTransition)
}

/// Mean bytes per token over the first `sample_count` documents.
pub fn fertility<I, D>(model: &TokenizerModel, docs: I, sample_count: usize) -> Result<f64>
where
    I: IntoIterator<Item = D>,
    D: AsRef<[u8]>,
{
    if sample_count == 0 {
        return Err(Error::invalid("fertility", "sample_count must be at least 1"));
    }
    let mut cache = HashMap::new();
    let (mut bytes, mut tokens) = (0usize, 0usize);
    for doc in docs.into_iter().take(sample_count) {
        let doc = doc.as_ref();
        bytes += doc.len();
        tokens += model.encode_cached(doc, &mut cache).0.len();
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(bytes as f64 / tokens as f64)
}
