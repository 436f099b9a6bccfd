//! LLaMA-style decoder over byte vocabularies.
//!
//! Pre-norm blocks with grouped-query attention, rotary positions supplied
//! per row, and a SwiGLU feed-forward. The input embedding is an embedding
//! bag, so chunk sums, boundary rows and hashed n-gram rows are all extra
//! terms of the same gather.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::EngramConfig;
use crate::tensor::{AttentionShape, BagTerm, Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    /// Output size of the next-subword head, when present.
    #[serde(default)]
    pub subword_vocab: Option<usize>,
    pub max_seq: usize,
    pub rope_base: f64,
    pub eps: f64,
}

impl ModelConfig {
    /// Small CPU configuration.
    pub fn desk() -> Self {
        ModelConfig {
            dim: 256,
            layers: 4,
            heads: 4,
            kv_heads: 2,
            ffn_hidden: 896,
            vocab: 512,
            subword_vocab: None,
            max_seq: 512,
            rope_base: 500_000.0,
            eps: 1e-5,
        }
    }

    /// The 1.7B configuration (1,747,060,736 parameters untied).
    pub fn full_scale() -> Self {
        ModelConfig {
            dim: 2048,
            layers: 32,
            heads: 32,
            kv_heads: 8,
            ffn_hidden: 7168,
            vocab: 512,
            subword_vocab: None,
            max_seq: 8192,
            rope_base: 500_000.0,
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.kv_heads == 0 {
            return bad("dim, layers, heads and kv_heads must be positive".into());
        }
        if self.heads % self.kv_heads != 0 {
            return bad(format!("heads {} not divisible by kv_heads {}", self.heads, self.kv_heads));
        }
        if self.dim % self.heads != 0 || (self.dim / self.heads) % 2 != 0 {
            return bad(format!("dim {} must split into even-width heads", self.dim));
        }
        if self.ffn_hidden == 0 || self.vocab == 0 || self.max_seq == 0 {
            return bad("ffn_hidden, vocab and max_seq must be positive".into());
        }
        if self.subword_vocab == Some(0) {
            return bad("subword_vocab must be positive".into());
        }
        if !(self.rope_base > 1.0) || !(self.eps > 0.0) {
            return bad("rope_base must exceed 1 and eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn kv_dim(&self) -> usize {
        self.dim * self.kv_heads / self.heads
    }
}

/// Optional input-side parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    /// Two-row boundary embedding table.
    #[serde(default)]
    pub boundary: bool,
    #[serde(default)]
    pub engram: Option<EngramConfig>,
}

/// Output head selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Byte,
    Subword,
}

/// Everything a forward pass reads besides the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub batch: usize,
    /// Positions per row seen by the transformer.
    pub seq: usize,
    /// Bytes summed into each position (1 = plain lookup).
    pub chunk: usize,
    /// `[batch * seq * chunk]`
    pub ids: Vec<u32>,
    /// Rotary position of each of the `batch * seq` rows.
    pub positions: Vec<u32>,
    /// Boundary mask value per position, selecting a boundary-table row.
    pub boundary: Option<Vec<u8>>,
    /// Row ids per engram table (`BagTerm::SKIP` where no gram exists).
    pub engram: Option<Vec<Vec<u32>>>,
}

impl ModelInput {
    /// Plain lookup with positions `0..seq` in every row.
    pub fn plain(batch: usize, seq: usize, ids: Vec<u32>) -> Self {
        ModelInput {
            batch,
            seq,
            chunk: 1,
            ids,
            positions: (0..batch).flat_map(|_| 0..seq as u32).collect(),
            boundary: None,
            engram: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Indices of the non-layer tensors in [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
struct Slots {
    final_norm: usize,
    head: usize,
    subword_head: Option<usize>,
    boundary: Option<usize>,
    engram: Vec<usize>,
}

const PER_LAYER: usize = 9;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub options: ModelOptions,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    slots: Slots,
}

/// Names and shapes of every parameter, in allocation order.
pub fn param_shapes(config: &ModelConfig, options: &ModelOptions) -> Vec<(String, Vec<usize>)> {
    let (d, kv, h) = (config.dim, config.kv_dim(), config.ffn_hidden);
    let mut out = vec![("embed".to_string(), vec![config.vocab, d])];
    for l in 0..config.layers {
        let shapes = [
            vec![d],
            vec![d, d],
            vec![d, kv],
            vec![d, kv],
            vec![d, d],
            vec![d],
            vec![d, h],
            vec![d, h],
            vec![h, d],
        ];
        for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("final_norm".into(), vec![d]));
    out.push(("head".into(), vec![d, config.vocab]));
    if let Some(vs) = config.subword_vocab {
        out.push(("subword_head".into(), vec![d, vs]));
    }
    if options.boundary {
        out.push(("boundary".into(), vec![2, d]));
    }
    if let Some(e) = &options.engram {
        for t in e.tables() {
            out.push((
                format!("engram.{}.{}", t.order, t.head),
                vec![t.rows, d / e.heads],
            ));
        }
    }
    out
}

/// Closed-form parameter count.
pub fn count_params(config: &ModelConfig, options: &ModelOptions) -> u64 {
    let (d, kv, h, v) = (
        config.dim as u64,
        config.kv_dim() as u64,
        config.ffn_hidden as u64,
        config.vocab as u64,
    );
    let per_layer = 2 * d + 2 * d * d + 2 * d * kv + 3 * d * h;
    let mut total = v * d + config.layers as u64 * per_layer + d + d * v;
    if let Some(vs) = config.subword_vocab {
        total += d * vs as u64;
    }
    if options.boundary {
        total += 2 * d;
    }
    if let Some(e) = &options.engram {
        let width = d / e.heads as u64;
        total += e.tables().iter().map(|t| t.rows as u64 * width).sum::<u64>();
    }
    total
}

/// Per-step FLOP breakdown (forward and backward).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepFlops {
    /// Projections and feed-forward matmuls of all layers.
    pub hidden: u64,
    /// Attention score and value products.
    pub attention: u64,
    /// Output head.
    pub head: u64,
}

impl StepFlops {
    pub fn total(&self) -> u64 {
        self.hidden + self.attention + self.head
    }

    /// Everything except the output head.
    pub fn non_embedding(&self) -> u64 {
        self.hidden + self.attention
    }
}

/// FLOPs of one training step over `batch` rows of `seq` positions:
/// `2 * weights * tokens` per matmul plus `4 * batch * seq^2 * d` per layer
/// for attention, tripled to cover the backward pass. Lookups are free.
pub fn step_flops(config: &ModelConfig, batch: usize, seq: usize) -> StepFlops {
    let (d, kv, h) = (config.dim as u64, config.kv_dim() as u64, config.ffn_hidden as u64);
    let tokens = (batch * seq) as u64;
    let layer_weights = 2 * d * d + 2 * d * kv + 3 * d * h;
    StepFlops {
        hidden: 3 * 2 * layer_weights * config.layers as u64 * tokens,
        attention: 3 * 4 * batch as u64 * (seq as u64).pow(2) * d * config.layers as u64,
        head: 3 * 2 * d * config.vocab as u64 * tokens,
    }
}

pub fn count_step_flops(config: &ModelConfig, batch: usize, seq: usize) -> u64 {
    step_flops(config, batch, seq).total()
}

impl<F: Scalar> ModelParams<F> {
    /// Normal(0, `std`) matrices and embeddings, unit norm weights.
    pub fn init(config: ModelConfig, options: ModelOptions, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        if let Some(e) = &options.engram {
            e.validate(config.dim)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = param_shapes(&config, &options)
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 1 {
                    Tensor::ones(&shape)
                } else {
                    Tensor::normal(&shape, std, &mut rng)
                };
                (name, t.with_requires_grad(true))
            })
            .unzip();
        Ok(Self::assemble(config, options, names, tensors))
    }

    fn assemble(
        config: ModelConfig,
        options: ModelOptions,
        names: Vec<String>,
        tensors: Vec<Tensor<F>>,
    ) -> Self {
        let pos = |n: &str| names.iter().position(|x| x == n);
        let slots = Slots {
            final_norm: pos("final_norm").expect("final_norm allocated"),
            head: pos("head").expect("head allocated"),
            subword_head: pos("subword_head"),
            boundary: pos("boundary"),
            engram: names
                .iter()
                .enumerate()
                .filter(|(_, n)| n.starts_with("engram."))
                .map(|(i, _)| i)
                .collect(),
        };
        ModelParams {
            config,
            options,
            names,
            tensors,
            slots,
        }
    }

    /// Build from explicit tensors, checking names and shapes.
    pub fn from_tensors(
        config: ModelConfig,
        options: ModelOptions,
        named: Vec<(String, Tensor<F>)>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config, &options);
        if expected.len() != named.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {n} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named
            .into_iter()
            .map(|(n, t)| (n, t.with_requires_grad(true)))
            .unzip();
        Ok(Self::assemble(config, options, names, tensors))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            options: self.options.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            slots: self.slots.clone(),
        }
    }

    /// Register every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    /// Move leaf gradients from the graph into the tensors. Tensors the
    /// backward pass never reached are left without a gradient.
    pub fn collect_grads(&mut self, g: &Graph<F>, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }

    /// Logits `[batch * seq, V]` (or `V_s` for the subword head).
    pub fn forward(&self, g: &mut Graph<F>, vars: &[Var], input: &ModelInput, head: Head) -> Result<Var> {
        let cfg = &self.config;
        let x = self.embed(g, vars, input)?;
        let shape = AttentionShape {
            batch: input.batch,
            seq: input.seq,
            heads: cfg.heads,
            kv_heads: cfg.kv_heads,
            head_dim: cfg.head_dim(),
        };
        let mut x = x;
        for l in 0..cfg.layers {
            let p = |i: usize| vars[1 + l * PER_LAYER + i];
            let h = g.rmsnorm(x, p(0), cfg.eps)?;
            let q = g.matmul(h, p(1))?;
            let k = g.matmul(h, p(2))?;
            let v = g.matmul(h, p(3))?;
            let q = g.rope(q, &input.positions, cfg.head_dim(), cfg.rope_base)?;
            let k = g.rope(k, &input.positions, cfg.head_dim(), cfg.rope_base)?;
            let a = g.attention(q, k, v, shape)?;
            let o = g.matmul(a, p(4))?;
            x = g.add(x, o)?;
            let h = g.rmsnorm(x, p(5), cfg.eps)?;
            let gate = g.matmul(h, p(6))?;
            let up = g.matmul(h, p(7))?;
            let act = g.swiglu(gate, up)?;
            let down = g.matmul(act, p(8))?;
            x = g.add(x, down)?;
        }
        let x = g.rmsnorm(x, vars[self.slots.final_norm], cfg.eps)?;
        let w = match head {
            Head::Byte => vars[self.slots.head],
            Head::Subword => vars[self.slots.subword_head.ok_or_else(|| {
                Error::invalid("forward", "model has no subword head")
            })?],
        };
        g.matmul(x, w)
    }

    /// Input embedding `[batch * seq, d]`.
    pub fn embed(&self, g: &mut Graph<F>, vars: &[Var], input: &ModelInput) -> Result<Var> {
        let d = self.config.dim;
        let rows = input.rows();
        let c = input.chunk;
        if c == 0 || input.ids.len() != rows * c || input.positions.len() != rows {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![input.ids.len(), input.positions.len()],
                rhs: vec![rows, c],
            });
        }
        if input.seq > self.config.max_seq {
            return Err(Error::invalid(
                "embed",
                format!("{} positions exceed max_seq {}", input.seq, self.config.max_seq),
            ));
        }
        if c > 1 && (input.boundary.is_some() || input.engram.is_some()) {
            return Err(Error::invalid(
                "embed",
                "chunk sums do not combine with boundary or engram inputs",
            ));
        }
        let mut terms: Vec<BagTerm> = (0..c)
            .map(|j| BagTerm {
                table: vars[0],
                ids: (0..rows).map(|r| input.ids[r * c + j]).collect(),
                col_offset: 0,
            })
            .collect();
        if let Some(mask) = &input.boundary {
            let slot = self
                .slots
                .boundary
                .ok_or_else(|| Error::invalid("embed", "model has no boundary table"))?;
            terms.push(BagTerm {
                table: vars[slot],
                ids: mask.iter().map(|&m| m as u32).collect(),
                col_offset: 0,
            });
        }
        if let Some(ids) = &input.engram {
            let e = self
                .options
                .engram
                .as_ref()
                .ok_or_else(|| Error::invalid("embed", "model has no engram tables"))?;
            if ids.len() != self.slots.engram.len() {
                return Err(Error::invalid(
                    "embed",
                    format!("{} engram id lists for {} tables", ids.len(), self.slots.engram.len()),
                ));
            }
            let width = d / e.heads;
            for ((t, &slot), ids) in e.tables().iter().zip(&self.slots.engram).zip(ids) {
                terms.push(BagTerm {
                    table: vars[slot],
                    ids: ids.clone(),
                    col_offset: t.head * width,
                });
            }
        }
        g.embedding_bag(rows, d, terms)
    }

    /// Forward without keeping gradients; returns logits.
    pub fn logits(&self, input: &ModelInput, head: Head) -> Result<Vec<F>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| g.constant(t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<_>>()?;
        let out = self.forward(&mut g, &vars, input, head)?;
        Ok(g.value(out).to_vec())
    }
}

// Checkpoint container ("BLAB"): named little-endian f32 tensors.

const CKPT_MAGIC: &[u8; 4] = b"BLAB";
const CKPT_VERSION: u32 = 1;

pub fn write_tensors(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(CKPT_MAGIC)?;
    put(&CKPT_VERSION.to_le_bytes())?;
    put(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&(t.shape().len() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            put(&(dim as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        put(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf
            .get(pos..pos + n)
            .ok_or_else(|| Error::format(path, "truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CKPT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != CKPT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = u32_at(take(4)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let data = take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        out.push((name, t));
    }
    if pos != buf.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(out)
}

impl ModelParams<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor<f32>)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(&self.tensors)
            .collect();
        write_tensors(path, &named)
    }

    pub fn load(path: &Path, config: ModelConfig, options: ModelOptions) -> Result<Self> {
        Self::from_tensors(config, options, read_tensors(path)?)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 16,
            layers: 2,
            heads: 4,
            kv_heads: 2,
            ffn_hidden: 24,
            vocab: 260,
            subword_vocab: None,
            max_seq: 32,
            rope_base: 10_000.0,
            eps: 1e-5,
        }
    }

    #[test]
    fn full_scale_parameter_count() {
        let cfg = ModelConfig::full_scale();
        assert_eq!(count_params(&cfg, &ModelOptions::default()), 1_747_060_736);
        let wider = ModelConfig { vocab: 513, ..cfg.clone() };
        assert_eq!(
            count_params(&wider, &ModelOptions::default()) - 1_747_060_736,
            2 * cfg.dim as u64
        );
    }

    #[test]
    fn counts_match_allocation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let kv = [1, 2][rng.random_range(0..2)];
            let heads = kv * rng.random_range(1..3);
            let cfg = ModelConfig {
                dim: heads * 2 * rng.random_range(1..4),
                layers: rng.random_range(1..3),
                heads,
                kv_heads: kv,
                ffn_hidden: rng.random_range(1..20),
                vocab: rng.random_range(1..40),
                subword_vocab: rng.random_bool(0.5).then(|| rng.random_range(1..30)),
                max_seq: 8,
                ..tiny()
            };
            let options = ModelOptions {
                boundary: rng.random_bool(0.5),
                engram: rng.random_bool(0.3).then(|| EngramConfig {
                    max_order: 3,
                    base_vocab: rng.random_range(2..50),
                    heads: cfg.heads,
                    seed: 0,
                }),
            };
            let p = ModelParams::<f32>::init(cfg.clone(), options.clone(), 0, 0.02).unwrap();
            assert_eq!(p.num_params(), count_params(&cfg, &options));
        }
    }

    #[test]
    fn chunked_flops_match_plain_at_equal_positions() {
        let cfg = ModelConfig::desk();
        let plain = step_flops(&cfg, 16, 512);
        // throughput mode: 4x the bytes, same 512 positions per row
        let chunked = step_flops(&cfg, 16, 2048 / 4);
        let ratio = chunked.non_embedding() as f64 / plain.non_embedding() as f64;
        assert!((ratio - 1.0).abs() < 0.01);
        assert!(count_step_flops(&cfg, 16, 512) > 0);
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelConfig { kv_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dim: 18, ..tiny() }.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn plain_and_chunk_embeddings() {
        let p = ModelParams::<f64>::init(tiny(), ModelOptions::default(), 1, 0.02).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let e = p.embed(&mut g, &vars, &ModelInput::plain(1, 1, vec![65])).unwrap();
        let table = p.get("embed").unwrap().data();
        assert_eq!(g.value(e), &table[65 * 16..66 * 16]);

        let input = ModelInput {
            chunk: 4,
            ids: vec![97; 4],
            ..ModelInput::plain(1, 1, vec![])
        };
        let e = p.embed(&mut g, &vars, &input).unwrap();
        for (x, t) in g.value(e).iter().zip(&table[97 * 16..98 * 16]) {
            assert!((x - 4.0 * t).abs() < 1e-15);
        }
    }

    #[test]
    fn boundary_zero_mask_is_constant_shift() {
        let options = ModelOptions {
            boundary: true,
            engram: None,
        };
        let p = ModelParams::<f64>::init(tiny(), options, 2, 0.02).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let ids = vec![3, 9, 27];
        let plain = p.embed(&mut g, &vars, &ModelInput::plain(1, 3, ids.clone())).unwrap();
        let with = ModelInput {
            boundary: Some(vec![0; 3]),
            ..ModelInput::plain(1, 3, ids)
        };
        let b = p.embed(&mut g, &vars, &with).unwrap();
        let row0 = &p.get("boundary").unwrap().data()[..16];
        for r in 0..3 {
            for c in 0..16 {
                let diff = g.value(b)[r * 16 + c] - g.value(plain)[r * 16 + c];
                assert!((diff - row0[c]).abs() < 1e-15);
            }
        }
        let bad = ModelInput {
            chunk: 3,
            boundary: Some(vec![0]),
            ..ModelInput::plain(1, 1, vec![1, 2, 3])
        };
        assert!(p.embed(&mut g, &vars, &bad).is_err());
    }

    #[test]
    fn residual_identity_with_zero_outputs() {
        let mut p = ModelParams::<f64>::init(tiny(), ModelOptions::default(), 4, 0.02).unwrap();
        for l in 0..2 {
            for n in ["wo", "w_down"] {
                p.get_mut(&format!("layers.{l}.{n}")).unwrap().data_mut().fill(0.0);
            }
        }
        let input = ModelInput::plain(1, 3, vec![5, 6, 7]);
        let logits = p.logits(&input, Head::Byte).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let e = p.embed(&mut g, &vars, &input).unwrap();
        let n = g.rmsnorm(e, vars[p.slots.final_norm], 1e-5).unwrap();
        let direct = g.matmul(n, vars[p.slots.head]).unwrap();
        assert_eq!(g.value(direct), logits.as_slice());
        assert_eq!(logits.len(), 3 * 260);
        assert!(p.logits(&input, Head::Subword).is_err());
    }

    #[test]
    fn causal_under_suffix_permutation() {
        let p = ModelParams::<f64>::init(tiny(), ModelOptions::default(), 5, 0.5).unwrap();
        let ids: Vec<u32> = vec![10, 20, 30, 40, 50, 60];
        let base = p.logits(&ModelInput::plain(1, 6, ids.clone()), Head::Byte).unwrap();
        for j in 0..5 {
            let mut perm = ids.clone();
            perm[j + 1..].reverse();
            perm[j + 1..].rotate_left(1);
            let out = p.logits(&ModelInput::plain(1, 6, perm), Head::Byte).unwrap();
            assert_eq!(&out[..(j + 1) * 260], &base[..(j + 1) * 260], "prefix {j}");
        }
    }

    #[test]
    fn gqa_with_full_kv_is_multi_head() {
        // Repeating each kv head by hand must give the grouped result.
        let cfg = tiny();
        let p = ModelParams::<f64>::init(cfg.clone(), ModelOptions::default(), 6, 0.3).unwrap();
        let full_cfg = ModelConfig { kv_heads: cfg.heads, ..cfg.clone() };
        let group = cfg.heads / cfg.kv_heads;
        let hd = cfg.head_dim();
        let expand = |t: &Tensor<f64>| {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(rows * cols * group);
            for r in 0..rows {
                for kvh in 0..cols / hd {
                    for _ in 0..group {
                        out.extend_from_slice(&t.data()[r * cols + kvh * hd..][..hd]);
                    }
                }
            }
            Tensor::new(vec![rows, cols * group], out).unwrap()
        };
        let named = p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(n, t)| {
                let t = if n.ends_with(".wk") || n.ends_with(".wv") { expand(t) } else { t.clone() };
                (n.clone(), t)
            })
            .collect();
        let mha = ModelParams::from_tensors(full_cfg, ModelOptions::default(), named).unwrap();
        let input = ModelInput::plain(2, 5, (0..10).map(|i| i * 7 % 256).collect());
        let a = p.logits(&input, Head::Byte).unwrap();
        let b = mha.logits(&input, Head::Byte).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig { subword_vocab: Some(7), ..tiny() };
        let options = ModelOptions { boundary: true, engram: None };
        let p = ModelParams::<f32>::init(cfg.clone(), options.clone(), 9, 0.02).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.blab");
        p.save(&path).unwrap();
        let back = ModelParams::load(&path, cfg.clone(), options).unwrap();
        assert_eq!(back, p);
        assert!(ModelParams::load(&path, cfg, ModelOptions::default()).is_err());
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"BLAB");
    }

    proptest! {
        #[test]
        fn rope_relative(p1 in 0u32..16, p2 in 0u32..16, shift in 0u32..16) {
            // <R(p1) q, R(p2) k> depends on p1 - p2 only
            let q: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
            let k: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
            let dot = |a: u32, b: u32| {
                let mut g = Graph::<f64>::new();
                let qv = g.constant(vec![1, 8], q.clone()).unwrap();
                let kv = g.constant(vec![1, 8], k.clone()).unwrap();
                let qr = g.rope(qv, &[a], 8, 10_000.0).unwrap();
                let kr = g.rope(kv, &[b], 8, 10_000.0).unwrap();
                g.value(qr).iter().zip(g.value(kr)).map(|(x, y)| x * y).sum::<f64>()
            };
            prop_assert!((dot(p1, p2) - dot(p1 + shift, p2 + shift)).abs() < 1e-5);
        }
    }

    #[test]
    fn rope_repeated_positions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![5, 4], [1.0, 2.0, 3.0, 4.0].repeat(5)).unwrap();
        let r = g.rope(x, &[0, 0, 1, 1, 1], 4, 10_000.0).unwrap();
        let v = g.value(r);
        assert_eq!(&v[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&v[..4], &v[4..8]);
        assert_eq!(&v[8..12], &v[12..16]);
        assert_eq!(&v[8..12], &v[16..20]);
    }
}
