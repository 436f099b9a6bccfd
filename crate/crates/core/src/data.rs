//! Corpus ingestion, packing and deterministic batch iteration.
//!
//! Documents are concatenated into one buffer, each prefixed with [`BOS`].
//! Every position carries its boundary annotation (start/end bits, token
//! index within the document, and the id of the following token), computed
//! once at ingest. Batches are disjoint length-`L` windows of that buffer,
//! visited in a seeded per-epoch permutation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenizerModel, BOS};

/// Marker for "no following token".
pub const NO_TOKEN: u32 = u32::MAX;

pub const DEFAULT_VAL_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Concatenated, annotated documents of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedDataset {
    pub split: Split,
    /// Byte values, with [`BOS`] at each document start.
    pub ids: Vec<u16>,
    pub start: Vec<u8>,
    pub end: Vec<u8>,
    /// Token index within the document; the BOS is token 0.
    pub token_index: Vec<u32>,
    /// Id of the token after the one containing this byte, or [`NO_TOKEN`].
    pub next_token: Vec<u32>,
    /// Token ids of all documents, BOS included.
    pub token_ids: Vec<u32>,
    /// Buffer offset of each document's BOS.
    pub doc_offsets: Vec<usize>,
}

impl PackedDataset {
    pub fn from_documents<D: AsRef<[u8]>>(
        docs: &[D],
        tokenizer: &TokenizerModel,
        split: Split,
    ) -> Self {
        let total: usize = docs.iter().map(|d| d.as_ref().len() + 1).sum();
        let mut ds = PackedDataset {
            split,
            ids: Vec::with_capacity(total),
            start: Vec::with_capacity(total),
            end: Vec::with_capacity(total),
            token_index: Vec::with_capacity(total),
            next_token: Vec::with_capacity(total),
            token_ids: Vec::new(),
            doc_offsets: Vec::with_capacity(docs.len()),
        };
        let mut cache = HashMap::new();
        for doc in docs {
            let doc = doc.as_ref();
            let ann = tokenizer.annotate_cached(doc, &mut cache);
            ds.push_document(doc, &ann.start, &ann.end, &ann.token_index, &ann.token_ids);
        }
        ds
    }

    fn push_document(&mut self, doc: &[u8], start: &[u8], end: &[u8], tix: &[u32], tokens: &[u32]) {
        self.doc_offsets.push(self.ids.len());
        self.ids.push(BOS as u16);
        self.start.push(1);
        self.end.push(1);
        self.token_index.push(0);
        self.next_token.push(tokens.first().copied().unwrap_or(NO_TOKEN));
        self.token_ids.push(BOS);
        self.token_ids.extend_from_slice(tokens);
        self.ids.extend(doc.iter().map(|&b| b as u16));
        self.start.extend_from_slice(start);
        self.end.extend_from_slice(end);
        self.token_index.extend(tix.iter().map(|&t| t + 1));
        self.next_token.extend(
            tix.iter()
                .map(|&t| tokens.get(t as usize + 1).copied().unwrap_or(NO_TOKEN)),
        );
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_docs(&self) -> usize {
        self.doc_offsets.len()
    }

    /// Non-BOS bytes in the buffer.
    pub fn text_bytes(&self) -> usize {
        self.len() - self.num_docs()
    }
}

/// `.txt` files under `dir`, sorted by path.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "txt") {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Read each file as one raw-byte document, skipping empty files.
pub fn read_documents(paths: &[PathBuf]) -> Result<Vec<Vec<u8>>> {
    let mut docs = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        if !bytes.is_empty() {
            docs.push(bytes);
        }
    }
    Ok(docs)
}

/// Number of trailing documents held out for validation.
pub fn val_doc_count(num_docs: usize, val_fraction: f64) -> usize {
    ((num_docs as f64 * val_fraction).floor() as usize).max(1)
}

/// Split documents (last `val_fraction`, at least one, go to validation) and
/// pack both sides.
pub fn ingest_documents(
    docs: &[Vec<u8>],
    tokenizer: &TokenizerModel,
    val_fraction: f64,
) -> Result<(PackedDataset, PackedDataset)> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} not in [0, 1)")));
    }
    let n_val = val_doc_count(docs.len(), val_fraction);
    if n_val >= docs.len() {
        return Err(Error::Config(format!(
            "{} documents leave nothing to train on after holding out {n_val}",
            docs.len()
        )));
    }
    let (train, val) = docs.split_at(docs.len() - n_val);
    Ok((
        PackedDataset::from_documents(train, tokenizer, Split::Train),
        PackedDataset::from_documents(val, tokenizer, Split::Val),
    ))
}

pub fn ingest(
    paths: &[PathBuf],
    tokenizer: &TokenizerModel,
    val_fraction: f64,
) -> Result<(PackedDataset, PackedDataset)> {
    ingest_documents(&read_documents(paths)?, tokenizer, val_fraction)
}

/// One batch of `rows` packed windows of `len` positions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub len: usize,
    pub inputs: Vec<u32>,
    /// Input shifted left by one within the row.
    pub targets: Vec<u32>,
    /// False at the last position of each row and where the target is BOS.
    pub target_mask: Vec<bool>,
    pub start: Vec<u8>,
    pub end: Vec<u8>,
    pub token_index: Vec<u32>,
    pub next_token: Vec<u32>,
    /// Subword starts among each row's predicted bytes.
    pub subwords: Vec<usize>,
    /// Predicted (unmasked) bytes per row.
    pub bytes: Vec<usize>,
}

impl Batch {
    /// Assemble a batch from explicit windows `[offset, offset + len)`.
    pub fn from_windows(ds: &PackedDataset, offsets: &[usize], len: usize) -> Self {
        let rows = offsets.len();
        let n = rows * len;
        let mut b = Batch {
            rows,
            len,
            inputs: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
            target_mask: Vec::with_capacity(n),
            start: Vec::with_capacity(n),
            end: Vec::with_capacity(n),
            token_index: Vec::with_capacity(n),
            next_token: Vec::with_capacity(n),
            subwords: Vec::with_capacity(rows),
            bytes: Vec::with_capacity(rows),
        };
        for &off in offsets {
            let w = off..off + len;
            b.inputs.extend(ds.ids[w.clone()].iter().map(|&x| x as u32));
            b.start.extend_from_slice(&ds.start[w.clone()]);
            b.end.extend_from_slice(&ds.end[w.clone()]);
            b.token_index.extend_from_slice(&ds.token_index[w.clone()]);
            b.next_token.extend_from_slice(&ds.next_token[w]);
            let (mut m, mut count) = (0, 0);
            for j in 0..len {
                let next = off + j + 1;
                if j + 1 < len && ds.ids[next] as u32 != BOS {
                    b.targets.push(ds.ids[next] as u32);
                    b.target_mask.push(true);
                    count += 1;
                    m += ds.start[next] as usize;
                } else {
                    b.targets.push(BOS);
                    b.target_mask.push(false);
                }
            }
            b.subwords.push(m);
            b.bytes.push(count);
        }
        b
    }

    pub fn positions(&self) -> usize {
        self.rows * self.len
    }

    pub fn total_bytes(&self) -> usize {
        self.bytes.iter().sum()
    }

    pub fn total_subwords(&self) -> usize {
        self.subwords.iter().sum()
    }
}

/// Batches of length-`C` chunks with first-byte-of-next-chunk targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedBatch {
    pub rows: usize,
    /// Chunk positions per row (`L / C`).
    pub positions: usize,
    pub chunk: usize,
    /// `[rows * positions * chunk]`
    pub inputs: Vec<u32>,
    /// `[rows * positions]`
    pub targets: Vec<u32>,
    pub target_mask: Vec<bool>,
}

impl ChunkedBatch {
    /// Undo the chunking of the inputs.
    pub fn flatten(&self) -> Vec<u32> {
        self.inputs.clone()
    }

    pub fn predicted(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

/// Reshape a batch into `[B x L/C x C]` chunks. The target of chunk `j` is
/// the first byte of chunk `j + 1`; the final chunk of each row is masked.
pub fn chunk_view(batch: &Batch, chunk: usize) -> Result<ChunkedBatch> {
    if chunk == 0 || batch.len % chunk != 0 {
        return Err(Error::invalid(
            "chunk_view",
            format!("sequence length {} is not divisible by chunk {chunk}", batch.len),
        ));
    }
    let positions = batch.len / chunk;
    let mut targets = Vec::with_capacity(batch.rows * positions);
    let mut mask = Vec::with_capacity(batch.rows * positions);
    for r in 0..batch.rows {
        let row = &batch.inputs[r * batch.len..(r + 1) * batch.len];
        for j in 0..positions {
            match row.get((j + 1) * chunk) {
                Some(&t) if t != BOS => {
                    targets.push(t);
                    mask.push(true);
                }
                _ => {
                    targets.push(BOS);
                    mask.push(false);
                }
            }
        }
    }
    Ok(ChunkedBatch {
        rows: batch.rows,
        positions,
        chunk,
        inputs: batch.inputs.clone(),
        targets,
        target_mask: mask,
    })
}

/// Deterministic stream of batches addressed by step.
///
/// Window `g = step * rows + r` of the stream is window `perm_e[g mod W]`
/// of epoch `e = g / W`, where `W` is the number of disjoint windows and
/// `perm_e` is a shuffle seeded with `seed + e`.
pub struct BatchStream<'a> {
    dataset: &'a PackedDataset,
    rows: usize,
    len: usize,
    seed: u64,
    windows: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl<'a> BatchStream<'a> {
    pub fn new(dataset: &'a PackedDataset, rows: usize, len: usize, seed: u64) -> Result<Self> {
        if rows == 0 || len < 2 {
            return Err(Error::invalid("batches", "need rows >= 1 and len >= 2"));
        }
        if len > dataset.len() {
            return Err(Error::invalid(
                "batches",
                format!("sequence length {len} exceeds corpus of {} bytes", dataset.len()),
            ));
        }
        Ok(BatchStream {
            dataset,
            rows,
            len,
            seed,
            windows: dataset.len() / len,
            cached: None,
        })
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.windows
    }

    pub fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.windows).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch));
            perm.shuffle(&mut rng);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().unwrap().1
    }

    /// Window offsets of the batch at `step`.
    pub fn offsets(&mut self, step: u64) -> Vec<usize> {
        let w = self.windows as u64;
        (0..self.rows as u64)
            .map(|r| {
                let g = step * self.rows as u64 + r;
                let idx = (g % w) as usize;
                self.permutation(g / w)[idx] * self.len
            })
            .collect()
    }

    pub fn batch(&mut self, step: u64) -> Batch {
        let offsets = self.offsets(step);
        Batch::from_windows(self.dataset, &offsets, self.len)
    }

    pub fn iter_from(self, start_step: u64) -> impl Iterator<Item = Batch> + 'a {
        let mut stream = self;
        (start_step..).map(move |s| stream.batch(s))
    }
}

/// Batch stream starting at `start_step`.
pub fn batches(
    dataset: &PackedDataset,
    rows: usize,
    len: usize,
    seed: u64,
    start_step: u64,
) -> Result<impl Iterator<Item = Batch> + '_> {
    Ok(BatchStream::new(dataset, rows, len, seed)?.iter_from(start_step))
}

/// Windows `(offset, len)` covering the dataset for evaluation. Consecutive
/// windows overlap by one position, so every position after the first is a
/// prediction target exactly once. The last window may be shorter.
pub fn eval_windows(ds: &PackedDataset, len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut off = 0;
    while len >= 2 && off + 1 < ds.len() {
        let l = len.min(ds.len() - off);
        out.push((off, l));
        off += l - 1;
    }
    out
}

// Annotation cache ("BLBD"): binary side file per split.

const CACHE_MAGIC: &[u8; 4] = b"BLBD";
const CACHE_VERSION: u32 = 1;

fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, "truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn varint(&mut self) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.take(1)?[0];
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::format(self.path, "varint overflow"))
    }

    fn bits(&mut self, n: usize) -> Result<Vec<u8>> {
        let packed = self.take(n.div_ceil(8))?;
        Ok((0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect())
    }
}

/// 64-bit FNV-1a, used to tie caches to the tokenizer that produced them.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    crate::interventions::fnv1a(bytes)
}

/// Write a dataset as: magic, u32 version, u8 split, u64 tokenizer
/// fingerprint, u64 lengths (positions, documents, tokens), varint document
/// offset deltas, raw bytes (BOS slots as 0), bit-packed start and end masks,
/// varint token indices, varint token ids.
pub fn write_cache(ds: &PackedDataset, tokenizer_fp: u64, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(ds.len() * 3);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.push(match ds.split {
        Split::Train => 0,
        Split::Val => 1,
    });
    out.extend_from_slice(&tokenizer_fp.to_le_bytes());
    for n in [ds.len(), ds.num_docs(), ds.token_ids.len()] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    let mut prev = 0;
    for &o in &ds.doc_offsets {
        write_varint(&mut out, (o - prev) as u64);
        prev = o;
    }
    out.extend(ds.ids.iter().map(|&x| if x as u32 == BOS { 0 } else { x as u8 }));
    out.extend(pack_bits(&ds.start));
    out.extend(pack_bits(&ds.end));
    for &t in &ds.token_index {
        write_varint(&mut out, t as u64);
    }
    for &t in &ds.token_ids {
        write_varint(&mut out, t as u64);
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&out).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a cache, returning the dataset and the stored tokenizer fingerprint.
pub fn read_cache(path: &Path) -> Result<(PackedDataset, u64)> {
    let mut buf = Vec::new();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    if c.take(4)? != CACHE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let split = match c.take(1)?[0] {
        0 => Split::Train,
        1 => Split::Val,
        s => return Err(Error::format(path, format!("bad split tag {s}"))),
    };
    let fp = c.u64()?;
    let (n, n_docs, n_tokens) = (c.u64()? as usize, c.u64()? as usize, c.u64()? as usize);
    let mut doc_offsets = Vec::with_capacity(n_docs);
    let mut pos = 0usize;
    for _ in 0..n_docs {
        pos += c.varint()? as usize;
        if pos >= n {
            return Err(Error::format(path, "document offset out of range"));
        }
        doc_offsets.push(pos);
    }
    let mut ids: Vec<u16> = c.take(n)?.iter().map(|&b| b as u16).collect();
    for &o in &doc_offsets {
        ids[o] = BOS as u16;
    }
    let start = c.bits(n)?;
    let end = c.bits(n)?;
    let token_index = (0..n)
        .map(|_| c.varint().map(|v| v as u32))
        .collect::<Result<Vec<_>>>()?;
    let token_ids = (0..n_tokens)
        .map(|_| c.varint().map(|v| v as u32))
        .collect::<Result<Vec<_>>>()?;
    if c.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    // Rebuild next-token ids from the per-document token lists.
    let mut next_token = vec![NO_TOKEN; n];
    let mut tok_base = 0usize;
    for (d, &o) in doc_offsets.iter().enumerate() {
        let stop = doc_offsets.get(d + 1).copied().unwrap_or(n);
        let doc_tokens = token_index[stop - 1] as usize + 1;
        if tok_base + doc_tokens > token_ids.len() {
            return Err(Error::format(path, "token count mismatch"));
        }
        for p in o..stop {
            let t = tok_base + token_index[p] as usize;
            if token_index[p] as usize + 1 < doc_tokens {
                next_token[p] = token_ids[t + 1];
            }
        }
        tok_base += doc_tokens;
    }
    Ok((
        PackedDataset {
            split,
            ids,
            start,
            end,
            token_index,
            next_token,
            token_ids,
            doc_offsets,
        },
        fp,
    ))
}
