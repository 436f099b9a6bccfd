//! Training interventions as transforms over model inputs, targets and loss.
//!
//! Every kind is active for steps `1..=S` (or for the whole run when
//! `S == 0`) and afterwards reduces to the baseline byte-level regime.
//! [`prepare`] turns a [`Batch`] into the forward inputs, targets and loss
//! normalization of one regime and phase.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{chunk_view, Batch, NO_TOKEN};
use crate::error::{Error, Result};
use crate::model::{Head, ModelInput, ModelParams};
use crate::tensor::{BagTerm, Graph, Scalar, Var};
use crate::tokenizer::BOS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    Baseline,
    Engram,
    Throughput4,
    BoundaryStart,
    BoundaryEnd,
    BoundaryStartTrainOnly,
    BoundaryEndTrainOnly,
    SubwordPos,
    SubwordPosTrainOnly,
    PerSubwordCe,
    NextSubword,
}

/// Which boundary mask a boundary kind feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryVariant {
    Start,
    End,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 11] = [
        InterventionKind::Baseline,
        InterventionKind::Engram,
        InterventionKind::Throughput4,
        InterventionKind::BoundaryStart,
        InterventionKind::BoundaryEnd,
        InterventionKind::BoundaryStartTrainOnly,
        InterventionKind::BoundaryEndTrainOnly,
        InterventionKind::SubwordPos,
        InterventionKind::SubwordPosTrainOnly,
        InterventionKind::PerSubwordCe,
        InterventionKind::NextSubword,
    ];

    pub fn name(self) -> &'static str {
        use InterventionKind::*;
        match self {
            Baseline => "baseline",
            Engram => "engram",
            Throughput4 => "throughput4",
            BoundaryStart => "boundary-start",
            BoundaryEnd => "boundary-end",
            BoundaryStartTrainOnly => "boundary-start-train-only",
            BoundaryEndTrainOnly => "boundary-end-train-only",
            SubwordPos => "subword-pos",
            SubwordPosTrainOnly => "subword-pos-train-only",
            PerSubwordCe => "per-subword-ce",
            NextSubword => "next-subword",
        }
    }

    /// Priors that are never shown at evaluation.
    pub fn train_only(self) -> bool {
        matches!(
            self,
            InterventionKind::BoundaryStartTrainOnly
                | InterventionKind::BoundaryEndTrainOnly
                | InterventionKind::SubwordPosTrainOnly
        )
    }

    pub fn boundary(self) -> Option<BoundaryVariant> {
        use InterventionKind::*;
        match self {
            BoundaryStart | BoundaryStartTrainOnly => Some(BoundaryVariant::Start),
            BoundaryEnd | BoundaryEndTrainOnly => Some(BoundaryVariant::End),
            _ => None,
        }
    }

    pub fn subword_positions(self) -> bool {
        matches!(self, InterventionKind::SubwordPos | InterventionKind::SubwordPosTrainOnly)
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterventionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown intervention {s:?}")))
    }
}

/// Hashed n-gram input tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngramConfig {
    pub max_order: usize,
    pub base_vocab: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for EngramConfig {
    fn default() -> Self {
        EngramConfig {
            max_order: 3,
            base_vocab: 15_000,
            heads: 8,
            seed: 0,
        }
    }
}

/// One (order, head) table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EngramTable {
    pub order: usize,
    pub head: usize,
    /// Prime number of rows.
    pub rows: usize,
    pub seed: u64,
}

pub fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    if n % 2 == 0 {
        return n == 2;
    }
    let mut i = 3;
    while i * i <= n {
        if n % i == 0 {
            return false;
        }
        i += 2;
    }
    true
}

fn next_prime(mut n: usize) -> usize {
    while !is_prime(n) {
        n += 1;
    }
    n
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl EngramConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.max_order < 2 || self.heads == 0 || self.base_vocab < 2 {
            return Err(Error::Config(
                "engram needs max_order >= 2, heads >= 1 and base_vocab >= 2".into(),
            ));
        }
        if dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "engram heads {} do not divide dim {dim}",
                self.heads
            )));
        }
        Ok(())
    }

    /// Tables ordered by order then head. Row counts are the consecutive
    /// primes from `base_vocab` up, so every table has a distinct size.
    pub fn tables(&self) -> Vec<EngramTable> {
        let mut out = Vec::new();
        let mut p = self.base_vocab;
        for order in 2..=self.max_order {
            for head in 0..self.heads {
                p = next_prime(p);
                let index = out.len() as u64;
                out.push(EngramTable {
                    order,
                    head,
                    rows: p,
                    seed: self.seed.wrapping_add(index).wrapping_mul(0x9e3779b97f4a7c15),
                });
                p += 1;
            }
        }
        out
    }

    pub fn extra_params(&self, dim: usize) -> u64 {
        let w = (dim / self.heads) as u64;
        self.tables().iter().map(|t| t.rows as u64 * w).sum()
    }
}

impl EngramTable {
    pub fn index(&self, gram: &[u8]) -> u32 {
        ((fnv1a(gram) ^ self.seed) % self.rows as u64) as u32
    }
}

/// Row ids per table for `rows` sequences of `len` ids. A position gets
/// [`BagTerm::SKIP`] for order `o` when fewer than `o` bytes end at it
/// inside the row, or when the gram would include a BOS.
pub fn engram_ids(cfg: &EngramConfig, ids: &[u32], rows: usize, len: usize) -> Vec<Vec<u32>> {
    let tables = cfg.tables();
    let mut out = vec![Vec::with_capacity(rows * len); tables.len()];
    let mut gram = Vec::with_capacity(cfg.max_order);
    for r in 0..rows {
        let row = &ids[r * len..(r + 1) * len];
        for j in 0..len {
            for (t, ids_t) in tables.iter().zip(out.iter_mut()) {
                let o = t.order;
                let id = if j + 1 >= o && row[j + 1 - o..=j].iter().all(|&b| b < BOS) {
                    gram.clear();
                    gram.extend(row[j + 1 - o..=j].iter().map(|&b| b as u8));
                    t.index(&gram)
                } else {
                    BagTerm::SKIP
                };
                ids_t.push(id);
            }
        }
    }
    out
}

/// Sum of the engram rows at one position, for inspection.
pub fn engram_vector<F: Scalar>(
    params: &ModelParams<F>,
    ids: &[u32],
    position: usize,
) -> Result<Vec<F>> {
    let cfg = params
        .options
        .engram
        .as_ref()
        .ok_or_else(|| Error::invalid("engram_vector", "model has no engram tables"))?;
    let d = params.config.dim;
    let w = d / cfg.heads;
    let mut out = vec![F::zero(); d];
    let all = engram_ids(cfg, ids, 1, ids.len());
    for (t, per_table) in cfg.tables().iter().zip(&all) {
        let id = per_table[position];
        if id == BagTerm::SKIP {
            continue;
        }
        let table = params
            .get(&format!("engram.{}.{}", t.order, t.head))
            .expect("table allocated");
        let row = &table.data()[id as usize * w..(id as usize + 1) * w];
        out[t.head * w..(t.head + 1) * w]
            .iter_mut()
            .zip(row)
            .for_each(|(o, &x)| *o += x);
    }
    Ok(out)
}

/// Position ids counting bytes from the row start or the latest BOS.
pub fn byte_positions(batch: &Batch) -> Vec<u32> {
    positions_by(batch, |_| 1)
}

/// Position ids counting subwords: a byte inherits the position of its
/// subword's first byte. Counts restart at the row start and at every BOS.
pub fn subword_positions(batch: &Batch) -> Vec<u32> {
    positions_by(batch, |j| batch.start[j] as u32)
}

fn positions_by(batch: &Batch, step: impl Fn(usize) -> u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(batch.positions());
    for r in 0..batch.rows {
        let mut p = 0u32;
        for j in 0..batch.len {
            let i = r * batch.len + j;
            if j > 0 {
                p = if batch.inputs[i] == BOS { 0 } else { p + step(i) };
            }
            out.push(p);
        }
    }
    out
}

pub fn boundary_mask(batch: &Batch, variant: BoundaryVariant) -> Vec<u8> {
    match variant {
        BoundaryVariant::Start => batch.start.clone(),
        BoundaryVariant::End => batch.end.clone(),
    }
}

/// Targets for the next-subword head: at the end byte of a subword, the id
/// of the subword that follows. Everything else is masked, as are end bytes
/// whose subword has no successor and the last position of each row.
pub fn next_subword_targets(batch: &Batch) -> (Vec<u32>, Vec<bool>) {
    let mut targets = Vec::with_capacity(batch.positions());
    let mut mask = Vec::with_capacity(batch.positions());
    for i in 0..batch.positions() {
        let last = i % batch.len == batch.len - 1;
        let next = batch.next_token[i];
        if batch.end[i] == 1 && next != NO_TOKEN && !last {
            targets.push(next);
            mask.push(true);
        } else {
            targets.push(0);
            mask.push(false);
        }
    }
    (targets, mask)
}

/// Cross-entropy per subword from a summed byte NLL.
pub fn per_subword_loss(nll_sum: f64, subwords: usize) -> Result<f64> {
    if subwords == 0 {
        return Err(Error::invalid("per_subword_loss", "no subwords in batch"));
    }
    Ok(nll_sum / subwords as f64)
}

/// Denominator of the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossNorm {
    /// Mean over predicted targets.
    PerTarget,
    /// Summed byte NLL over the subword count of the batch.
    PerSubword,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Intervention selection with its switch step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    /// Last step of the intervention regime; 0 keeps it for the whole run.
    pub switch_step: u64,
    /// Bytes per position in the throughput regime.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    #[serde(default)]
    pub engram: EngramConfig,
}

fn default_chunk() -> usize {
    4
}

impl InterventionSpec {
    pub fn new(kind: InterventionKind, switch_step: u64) -> Self {
        InterventionSpec {
            kind,
            switch_step,
            chunk: default_chunk(),
            engram: EngramConfig::default(),
        }
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.kind == InterventionKind::Throughput4 && (self.chunk == 0 || seq_len % self.chunk != 0) {
            return Err(Error::Config(format!(
                "sequence length {seq_len} is not divisible by chunk {}",
                self.chunk
            )));
        }
        Ok(())
    }

    /// Whether step `n` (1-based) runs the intervention regime.
    pub fn active_at(&self, step: u64) -> bool {
        self.kind != InterventionKind::Baseline && (self.switch_step == 0 || step <= self.switch_step)
    }

    /// Bytes per row the regime reads for `seq_len` transformer positions.
    pub fn window_len(&self, seq_len: usize, active: bool) -> usize {
        if active && self.kind == InterventionKind::Throughput4 {
            seq_len * self.chunk
        } else {
            seq_len
        }
    }
}

/// Forward inputs, targets and loss normalization of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub input: ModelInput,
    pub head: Head,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub norm: LossNorm,
    /// Subword count M of the predicted bytes.
    pub subwords: usize,
    /// Input bytes read.
    pub bytes_read: usize,
}

impl Prepared {
    pub fn predicted(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Build the forward pass for `batch` under `spec`.
///
/// `active` selects the intervention regime. At evaluation the byte head and
/// per-byte normalization are always used, chunking is undone, and
/// train-only priors are replaced by the zero mask or byte positions.
pub fn prepare(spec: &InterventionSpec, batch: &Batch, active: bool, phase: Phase) -> Result<Prepared> {
    use InterventionKind::*;
    let kind = spec.kind;
    let train = phase == Phase::Train;
    let show_prior = active && (train || !kind.train_only());

    if active && train && kind == Throughput4 {
        let c = chunk_view(batch, spec.chunk)?;
        return Ok(Prepared {
            input: ModelInput {
                batch: c.rows,
                seq: c.positions,
                chunk: c.chunk,
                positions: (0..c.rows).flat_map(|_| 0..c.positions as u32).collect(),
                ids: c.inputs,
                boundary: None,
                engram: None,
            },
            head: Head::Byte,
            targets: c.targets,
            mask: c.target_mask,
            norm: LossNorm::PerTarget,
            subwords: batch.total_subwords(),
            bytes_read: batch.positions(),
        });
    }

    let mut input = ModelInput {
        batch: batch.rows,
        seq: batch.len,
        chunk: 1,
        ids: batch.inputs.clone(),
        positions: if kind.subword_positions() && show_prior {
            subword_positions(batch)
        } else {
            byte_positions(batch)
        },
        boundary: None,
        engram: None,
    };
    if let Some(variant) = kind.boundary() {
        input.boundary = Some(if show_prior {
            boundary_mask(batch, variant)
        } else {
            vec![0; batch.positions()]
        });
    }
    if kind == Engram && active {
        input.engram = Some(engram_ids(&spec.engram, &batch.inputs, batch.rows, batch.len));
    }
    let (head, targets, mask, norm) = match kind {
        NextSubword if active && train => {
            let (t, m) = next_subword_targets(batch);
            (Head::Subword, t, m, LossNorm::PerTarget)
        }
        PerSubwordCe if active && train => (
            Head::Byte,
            batch.targets.clone(),
            batch.target_mask.clone(),
            LossNorm::PerSubword,
        ),
        _ => (
            Head::Byte,
            batch.targets.clone(),
            batch.target_mask.clone(),
            LossNorm::PerTarget,
        ),
    };
    Ok(Prepared {
        input,
        head,
        targets,
        mask,
        norm,
        subwords: batch.total_subwords(),
        bytes_read: batch.positions(),
    })
}

/// Graph nodes of one objective evaluation.
pub struct Objective {
    pub loss: Var,
    pub nll_sum: Var,
    pub predicted: usize,
}

/// Forward pass plus normalized cross-entropy.
pub fn objective<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    vars: &[Var],
    prep: &Prepared,
) -> Result<Objective> {
    let logits = params.forward(g, vars, &prep.input, prep.head)?;
    let (nll_sum, predicted) = g.softmax_cross_entropy(logits, &prep.targets, &prep.mask)?;
    let denom = match prep.norm {
        LossNorm::PerTarget => predicted.max(1),
        LossNorm::PerSubword => {
            if prep.subwords == 0 {
                return Err(Error::invalid("objective", "no subwords in batch"));
            }
            prep.subwords
        }
    };
    let loss = g.scale(nll_sum, F::one() / F::of(denom as f64));
    Ok(Objective {
        loss,
        nll_sum,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PackedDataset, Split};
    use crate::tokenizer::TokenizerModel;

    fn batch_of(text: &str, tok: &TokenizerModel) -> Batch {
        let ds = PackedDataset::from_documents(&[text.as_bytes().to_vec()], tok, Split::Train);
        Batch::from_windows(&ds, &[1], text.len())
    }

    fn hi_yo() -> TokenizerModel {
        TokenizerModel::from_merges(
            vec![
                (b"h".to_vec(), b"i".to_vec()),
                (b" ".to_vec(), b"y".to_vec()),
                (b" y".to_vec(), b"o".to_vec()),
            ],
            crate::tokenizer::PreTokenizer::ClassTransition,
        )
        .unwrap()
    }

    #[test]
    fn names_round_trip() {
        for k in InterventionKind::ALL {
            assert_eq!(k.name().parse::<InterventionKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("boundary_end".parse::<InterventionKind>().is_err());
    }

    #[test]
    fn fnv_matches_reference() {
        // reference FNV-1a, written out longhand
        let mut h: u64 = 14695981039346656037;
        for b in "hi".bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(1099511628211);
        }
        let table = EngramConfig::default().tables()[0];
        assert_eq!((table.rows, table.seed), (15013, 0));
        assert_eq!(table.index(b"hi") as u64, h % 15013);
    }

    #[test]
    fn tables_have_distinct_prime_sizes() {
        let cfg = EngramConfig::default();
        let tables = cfg.tables();
        assert_eq!(tables.len(), 16);
        let mut sizes: Vec<usize> = tables.iter().map(|t| t.rows).collect();
        assert!(sizes.iter().all(|&p| is_prime(p) && p >= 15_000));
        sizes.dedup();
        assert_eq!(sizes.len(), 16);
    }

    #[test]
    fn engram_ids_respect_boundaries() {
        let cfg = EngramConfig {
            max_order: 3,
            base_vocab: 11,
            heads: 2,
            seed: 1,
        };
        let ids = [BOS, 97, 98, 99, 97, 98, 99];
        let out = engram_ids(&cfg, &ids, 1, 7);
        // tables: order 2 heads 0,1 then order 3 heads 0,1
        for t in &out {
            assert_eq!(t[0], BagTerm::SKIP);
            assert_eq!(t[1], BagTerm::SKIP);
        }
        assert_ne!(out[0][2], BagTerm::SKIP);
        assert_eq!(out[2][2], BagTerm::SKIP);
        // identical 3-byte context "abc" at positions 3 and 6
        for t in &out {
            assert_eq!(t[3], t[6]);
        }
    }

    #[test]
    fn positions_follow_subwords() {
        let tok = hi_yo();
        let b = batch_of("hi yo", &tok);
        assert_eq!(b.start, [1, 0, 1, 0, 0]);
        assert_eq!(subword_positions(&b), [0, 0, 1, 1, 1]);
        assert_eq!(byte_positions(&b), [0, 1, 2, 3, 4]);
        let bytes = batch_of("hi yo", &TokenizerModel::byte_level());
        assert_eq!(subword_positions(&bytes), byte_positions(&bytes));
    }

    #[test]
    fn next_subword_targets_hi_yo() {
        let tok = hi_yo();
        let b = batch_of("hi yo", &tok);
        let (t, m) = next_subword_targets(&b);
        let yo = tok.encode(b" yo").0[0];
        assert_eq!(t[1], yo);
        assert_eq!(m, [false, true, false, false, false]);

        let single = batch_of("hi", &tok);
        assert!(next_subword_targets(&single).1.iter().all(|&m| !m));
    }

    #[test]
    fn end_mask_is_shifted_start() {
        let tok = hi_yo();
        let b = batch_of("hi yo hi", &tok);
        for n in 0..b.len - 1 {
            assert_eq!(b.end[n], b.start[n + 1]);
        }
    }

    #[test]
    fn per_subword_scaling() {
        // N = 10 bytes at mean 2 nats, M = 2 subwords
        assert_eq!(per_subword_loss(20.0, 2).unwrap(), 10.0);
        assert_eq!(per_subword_loss(20.0, 10).unwrap(), 20.0 / 10.0);
        assert!(per_subword_loss(1.0, 0).is_err());
    }

    #[test]
    fn regime_switch() {
        let spec = InterventionSpec::new(InterventionKind::BoundaryEnd, 10);
        assert!(spec.active_at(1) && spec.active_at(10) && !spec.active_at(11));
        assert!(InterventionSpec::new(InterventionKind::BoundaryEnd, 0).active_at(1_000_000));
        assert!(!InterventionSpec::new(InterventionKind::Baseline, 0).active_at(1));
        let t4 = InterventionSpec::new(InterventionKind::Throughput4, 4);
        assert_eq!(t4.window_len(8, true), 32);
        assert_eq!(t4.window_len(8, false), 8);
        assert!(InterventionSpec { chunk: 3, ..t4 }.validate(8).is_err());
    }

    #[test]
    fn prepare_strips_train_only_priors_at_eval() {
        let tok = hi_yo();
        let b = batch_of("hi yo", &tok);
        let spec = InterventionSpec::new(InterventionKind::BoundaryEndTrainOnly, 5);
        let train = prepare(&spec, &b, true, Phase::Train).unwrap();
        assert_eq!(train.input.boundary.as_deref(), Some(&b.end[..]));
        let eval = prepare(&spec, &b, true, Phase::Eval).unwrap();
        assert_eq!(eval.input.boundary.as_deref(), Some(&[0u8; 5][..]));
        let after = prepare(&spec, &b, false, Phase::Train).unwrap();
        assert_eq!(after.input.boundary.as_deref(), Some(&[0u8; 5][..]));

        let kept = InterventionSpec::new(InterventionKind::BoundaryStart, 0);
        let eval = prepare(&kept, &b, true, Phase::Eval).unwrap();
        assert_eq!(eval.input.boundary.as_deref(), Some(&b.start[..]));

        let pos = InterventionSpec::new(InterventionKind::SubwordPosTrainOnly, 0);
        assert_eq!(prepare(&pos, &b, true, Phase::Train).unwrap().input.positions, [0, 0, 1, 1, 1]);
        assert_eq!(prepare(&pos, &b, true, Phase::Eval).unwrap().input.positions, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn throughput_phase_reads_four_times_the_bytes() {
        let tok = TokenizerModel::byte_level();
        let ds = PackedDataset::from_documents(&[(1..=40u8).collect::<Vec<_>>()], &tok, Split::Train);
        let spec = InterventionSpec::new(InterventionKind::Throughput4, 4);
        let wide = Batch::from_windows(&ds, &[1], spec.window_len(2, true));
        let p = prepare(&spec, &wide, true, Phase::Train).unwrap();
        assert_eq!((p.input.seq, p.input.chunk), (2, 4));
        assert_eq!(p.predicted(), 1);
        let base = prepare(&spec, &Batch::from_windows(&ds, &[1], 2), false, Phase::Train).unwrap();
        assert_eq!(p.bytes_read, 4 * base.bytes_read);
        assert_eq!(p.input.rows(), base.input.rows());
    }
}
