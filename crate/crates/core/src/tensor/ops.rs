//! Differentiable operations. Each op computes its value eagerly, records
//! whatever the adjoint needs, and implements its backward rule in
//! [`Graph::backward_node`].

use super::kernels::{gemm, Layout};
use super::{Graph, Scalar, Var};
use crate::error::{Error, Result};

/// Pointwise operation selector for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Silu,
}

/// One contribution to an embedding bag: row `ids[r]` of `table` is added
/// into output row `r` at columns `[col_offset, col_offset + table width)`.
/// An id of [`BagTerm::SKIP`] contributes nothing.
#[derive(Clone, Debug)]
pub struct BagTerm {
    pub table: Var,
    pub ids: Vec<u32>,
    pub col_offset: usize,
}

impl BagTerm {
    pub const SKIP: u32 = u32::MAX;
}

/// Geometry of a packed `[batch * seq, heads * head_dim]` attention input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

pub(crate) enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Silu {
        x: Var,
        sig: Vec<F>,
    },
    SwiGlu {
        gate: Var,
        up: Var,
        sig: Vec<F>,
    },
    Scale {
        x: Var,
        c: F,
    },
    Sum {
        x: Var,
    },
    RmsNorm {
        x: Var,
        w: Var,
        d: usize,
        inv_rms: Vec<F>,
    },
    Rope {
        x: Var,
        head_dim: usize,
        cos: Vec<F>,
        sin: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<F>,
    },
    EmbeddingBag {
        terms: Vec<BagTerm>,
        width: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<F>,
    },
}

/// Query rows per causal attention tile.
const ATTENTION_TILE: usize = 128;

fn sigmoids<F: Scalar>(xs: &[F]) -> Vec<F> {
    let mut s: Vec<F> = xs.iter().map(|&x| -x).collect();
    F::exp_slice(&mut s);
    s.iter_mut().for_each(|e| *e = F::one() / (F::one() + *e));
    s
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    row.iter_mut().for_each(|x| *x -= max);
    F::exp_slice(row);
    let total: F = row.iter().copied().sum();
    let inv = F::one() / total;
    row.iter_mut().for_each(|x| *x *= inv);
}

impl<F: Scalar> Graph<F> {
    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = self.shape(v);
        let cols = *shape.last().expect("tensors have rank >= 1");
        (self.value(v).len() / cols, cols)
    }

    /// `[.. x k] . [k x n] -> [.. x n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k) = self.rows_cols(a);
        let n = sb[1];
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a),
            Layout::row_major(0, k),
            self.value(b),
            Layout::row_major(0, n),
            F::zero(),
            &mut out,
            Layout::row_major(0, n),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Pointwise op. Binary ops accept equal shapes, or `b` with the shape of
    /// `a`'s trailing axis (broadcast over the leading axes).
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Silu, None) => Ok(self.silu(a)),
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            _ => Err(Error::invalid("elementwise", format!("{op:?} given wrong arity"))),
        }
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sb.len() == 1 && sa.last() == sb.last() {
            Ok(true)
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip_with(&self, a: Var, b: Var, broadcast: bool, f: impl Fn(F, F) -> F) -> Vec<F> {
        let (va, vb) = (self.value(a), self.value(b));
        if broadcast {
            let d = vb.len();
            va.chunks_exact(d)
                .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("add", a, b)?;
        let out = self.zip_with(a, b, broadcast, |x, y| x + y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b, broadcast }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("mul", a, b)?;
        let out = self.zip_with(a, b, broadcast, |x, y| x * y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b, broadcast }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let sig = sigmoids(self.value(x));
        let out = self.value(x).iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, Op::Silu { x, sig }, rg)
    }

    /// `silu(gate) * up`, equal shapes.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        if self.shape(gate) != self.shape(up) {
            return Err(Error::Shape {
                op: "swiglu",
                lhs: self.shape(gate).to_vec(),
                rhs: self.shape(up).to_vec(),
            });
        }
        let sig = sigmoids(self.value(gate));
        let out = self
            .value(gate)
            .iter()
            .zip(self.value(up))
            .zip(&sig)
            .map(|((&a, &b), &s)| a * s * b)
            .collect();
        let rg = self.requires_grad(gate) || self.requires_grad(up);
        Ok(self.push(self.shape(gate).to_vec(), out, Op::SwiGlu { gate, up, sig }, rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![F::of(total)], Op::Sum { x }, rg)
    }

    /// `x * w / sqrt(mean(x^2) + eps)` over the trailing axis.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let d = *sx.last().unwrap();
        if sw != [d] {
            return Err(Error::Shape {
                op: "rmsnorm",
                lhs: sx,
                rhs: sw,
            });
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("rmsnorm", "eps must be positive"));
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        let eps = F::of(eps);
        let inv_d = F::one() / F::of(d as f64);
        for row in xv.chunks_exact(d) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() * inv_d;
            let r = F::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(wv).map(|(&v, &g)| v * r * g));
        }
        let rg = self.requires_grad(x) || self.requires_grad(w);
        Ok(self.push(sx, out, Op::RmsNorm { x, w, d, inv_rms }, rg))
    }

    /// Rotary embedding over interleaved pairs of each `head_dim` block.
    /// Row `r` is rotated by `positions[r] * base^(-2i / head_dim)` for pair `i`.
    pub fn rope(&mut self, x: Var, positions: &[u32], head_dim: usize, base: f64) -> Result<Var> {
        let (rows, width) = self.rows_cols(x);
        if head_dim == 0 || head_dim % 2 != 0 || width % head_dim != 0 {
            return Err(Error::invalid(
                "rope",
                format!("head_dim {head_dim} incompatible with width {width}"),
            ));
        }
        if positions.len() != rows {
            return Err(Error::Shape {
                op: "rope",
                lhs: self.shape(x).to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let half = head_dim / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for &f in &inv_freq {
                let angle = p as f64 * f;
                cos.push(F::of(angle.cos()));
                sin.push(F::of(angle.sin()));
            }
        }
        let xv = self.value(x);
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
            for h in 0..width / head_dim {
                let base_idx = r * width + h * head_dim;
                for i in 0..half {
                    let (x0, x1) = (xv[base_idx + 2 * i], xv[base_idx + 2 * i + 1]);
                    out[base_idx + 2 * i] = x0 * c[i] - x1 * s[i];
                    out[base_idx + 2 * i + 1] = x0 * s[i] + x1 * c[i];
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            },
            rg,
        ))
    }

    /// Causal grouped-query attention. Query head `h` reads key/value head
    /// `h / (heads / kv_heads)`. Inputs are `[batch*seq, heads*head_dim]`
    /// for `q` and `[batch*seq, kv_heads*head_dim]` for `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let AttentionShape {
            batch,
            seq,
            heads,
            kv_heads,
            head_dim,
        } = shape;
        if kv_heads == 0 || heads % kv_heads != 0 {
            return Err(Error::invalid("attention", "heads must be a multiple of kv_heads"));
        }
        let dq = heads * head_dim;
        let dkv = kv_heads * head_dim;
        let rows = batch * seq;
        for (var, width) in [(q, dq), (k, dkv), (v, dkv)] {
            if self.rows_cols(var) != (rows, width) {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: self.shape(var).to_vec(),
                    rhs: vec![rows, width],
                });
            }
        }
        let group = heads / kv_heads;
        let scale = F::one() / F::of(head_dim as f64).sqrt();
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut out = vec![F::zero(); rows * dq];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                let g = h / group;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                // query tiles only see keys up to their own end
                for i0 in (0..seq).step_by(ATTENTION_TILE) {
                    let i1 = (i0 + ATTENTION_TILE).min(seq);
                    gemm(
                        i1 - i0,
                        head_dim,
                        i1,
                        scale,
                        qv,
                        Layout {
                            offset: (b * seq + i0) * dq + h * head_dim,
                            rs: dq,
                            cs: 1,
                        },
                        kv,
                        Layout {
                            offset: b * seq * dkv + g * head_dim,
                            rs: 1,
                            cs: dkv,
                        },
                        F::zero(),
                        p,
                        Layout::row_major(i0 * seq, seq),
                    );
                    for i in i0..i1 {
                        let row = &mut p[i * seq..(i + 1) * seq];
                        softmax_in_place(&mut row[..=i]);
                        row[i + 1..i1].iter_mut().for_each(|x| *x = F::zero());
                    }
                    gemm(
                        i1 - i0,
                        i1,
                        head_dim,
                        F::one(),
                        p,
                        Layout::row_major(i0 * seq, seq),
                        vv,
                        Layout {
                            offset: b * seq * dkv + g * head_dim,
                            rs: dkv,
                            cs: 1,
                        },
                        F::zero(),
                        &mut out,
                        Layout {
                            offset: (b * seq + i0) * dq + h * head_dim,
                            rs: dq,
                            cs: 1,
                        },
                    );
                }
            }
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        Ok(self.push(
            self.shape(q).to_vec(),
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Sum of gathered table rows, written into a `[rows, width]` output.
    pub fn embedding_bag(&mut self, rows: usize, width: usize, terms: Vec<BagTerm>) -> Result<Var> {
        let mut out = vec![F::zero(); rows * width];
        let mut rg = false;
        for term in &terms {
            let shape = self.shape(term.table);
            if shape.len() != 2 || term.col_offset + shape[1] > width || term.ids.len() != rows {
                return Err(Error::Shape {
                    op: "embedding_bag",
                    lhs: shape.to_vec(),
                    rhs: vec![rows, width],
                });
            }
            let (n_rows, w) = (shape[0], shape[1]);
            let table = self.value(term.table);
            for (r, &id) in term.ids.iter().enumerate() {
                if id == BagTerm::SKIP {
                    continue;
                }
                let id = id as usize;
                if id >= n_rows {
                    return Err(Error::Index {
                        op: "embedding_bag",
                        index: id,
                        extent: n_rows,
                    });
                }
                let dst = &mut out[r * width + term.col_offset..][..w];
                dst.iter_mut()
                    .zip(&table[id * w..(id + 1) * w])
                    .for_each(|(o, &t)| *o += t);
            }
            rg |= self.requires_grad(term.table);
        }
        Ok(self.push(vec![rows, width], out, Op::EmbeddingBag { terms, width }, rg))
    }

    /// Masked softmax cross-entropy. Returns the summed negative
    /// log-likelihood (nats) over unmasked rows and the unmasked count.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<(Var, usize)> {
        let (n, vocab) = self.rows_cols(logits);
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); n * vocab];
        let mut total = 0.0f64;
        let mut count = 0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let t = targets[r] as usize;
            if t >= vocab {
                return Err(Error::Index {
                    op: "softmax_cross_entropy",
                    index: t,
                    extent: vocab,
                });
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, F::neg_infinity()), |acc, (j, x)| if x > acc.1 { (j, x) } else { acc });
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = x - max;
            }
            F::exp_slice(p);
            // log-sum-exp relative to the max, as ln(1 + rest) for precision
            let rest: F = p
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, &e)| e)
                .sum();
            let log_z = rest.ln_1p();
            total += ((max - row[t]) + log_z).f64();
            let inv_z = F::one() / (F::one() + rest);
            p.iter_mut().for_each(|pj| *pj *= inv_z);
            count += 1;
        }
        let rg = self.requires_grad(logits);
        let var = self.push(
            vec![1],
            vec![F::of(total)],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        );
        Ok((var, count))
    }

    /// Probabilities recorded by a cross-entropy node (zero rows where masked).
    pub fn cross_entropy_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub(crate) fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = self.grad_slot(grads, a) {
                    // dA += dC B^T
                    gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        g,
                        Layout::row_major(0, n),
                        self.value(b),
                        Layout::transposed(0, n),
                        F::one(),
                        da,
                        Layout::row_major(0, k),
                    );
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    // dB += A^T dC
                    gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        self.value(a),
                        Layout::transposed(0, k),
                        g,
                        Layout::row_major(0, n),
                        F::one(),
                        db,
                        Layout::row_major(0, n),
                    );
                }
            }
            &Op::Add { a, b, broadcast } => {
                if let Some(da) = self.grad_slot(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    if broadcast {
                        for row in g.chunks_exact(db.len()) {
                            db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                        }
                    } else {
                        db.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            &Op::Mul { a, b, broadcast } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(da) = self.grad_slot(grads, a) {
                    if broadcast {
                        let d = vb.len();
                        for (drow, grow) in da.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                            for j in 0..d {
                                drow[j] += grow[j] * vb[j];
                            }
                        }
                    } else {
                        for j in 0..da.len() {
                            da[j] += g[j] * vb[j];
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    if broadcast {
                        let d = db.len();
                        for (arow, grow) in va.chunks_exact(d).zip(g.chunks_exact(d)) {
                            for j in 0..d {
                                db[j] += grow[j] * arow[j];
                            }
                        }
                    } else {
                        for j in 0..db.len() {
                            db[j] += g[j] * va[j];
                        }
                    }
                }
            }
            Op::Silu { x, sig } => {
                let xv = self.value(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for j in 0..dx.len() {
                        let s = sig[j];
                        dx[j] += g[j] * s * (F::one() + xv[j] * (F::one() - s));
                    }
                }
            }
            Op::SwiGlu { gate, up, sig } => {
                let (gv, uv) = (self.value(*gate), self.value(*up));
                if let Some(dg) = self.grad_slot(grads, *gate) {
                    for j in 0..dg.len() {
                        let s = sig[j];
                        dg[j] += g[j] * uv[j] * s * (F::one() + gv[j] * (F::one() - s));
                    }
                }
                if let Some(du) = self.grad_slot(grads, *up) {
                    for j in 0..du.len() {
                        du[j] += g[j] * gv[j] * sig[j];
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(dx) = self.grad_slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = self.grad_slot(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::RmsNorm { x, w, d, inv_rms } => {
                let (x, w, d) = (*x, *w, *d);
                let (xv, wv) = (self.value(x), self.value(w));
                if let Some(dw) = self.grad_slot(grads, w) {
                    for ((row, grow), &r) in xv.chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms)
                    {
                        for j in 0..d {
                            dw[j] += grow[j] * row[j] * r;
                        }
                    }
                }
                if let Some(dx) = self.grad_slot(grads, x) {
                    let inv_d = F::one() / F::of(d as f64);
                    for (((drow, row), grow), &r) in dx
                        .chunks_exact_mut(d)
                        .zip(xv.chunks_exact(d))
                        .zip(g.chunks_exact(d))
                        .zip(inv_rms)
                    {
                        let dot: F = (0..d).map(|j| grow[j] * wv[j] * row[j]).sum();
                        let coef = r * r * r * dot * inv_d;
                        for j in 0..d {
                            drow[j] += r * grow[j] * wv[j] - coef * row[j];
                        }
                    }
                }
            }
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            } => {
                let (x, head_dim) = (*x, *head_dim);
                let (rows, width) = self.rows_cols(x);
                let half = head_dim / 2;
                if let Some(dx) = self.grad_slot(grads, x) {
                    for r in 0..rows {
                        let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
                        for h in 0..width / head_dim {
                            let base_idx = r * width + h * head_dim;
                            for i in 0..half {
                                let (g0, g1) = (g[base_idx + 2 * i], g[base_idx + 2 * i + 1]);
                                dx[base_idx + 2 * i] += g0 * c[i] + g1 * s[i];
                                dx[base_idx + 2 * i + 1] += g1 * c[i] - g0 * s[i];
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, g, grads),
            Op::EmbeddingBag { terms, width } => {
                for term in terms {
                    let w = self.shape(term.table)[1];
                    if let Some(dt) = self.grad_slot(grads, term.table) {
                        for (r, &id) in term.ids.iter().enumerate() {
                            if id == BagTerm::SKIP {
                                continue;
                            }
                            let src = &g[r * width + term.col_offset..][..w];
                            dt[id as usize * w..][..w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let (_, vocab) = self.rows_cols(*logits);
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    let scale = g[0];
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        for (d, &p) in drow.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d += scale * p;
                        }
                        drow[t as usize] -= scale;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let AttentionShape {
            batch,
            seq,
            heads,
            kv_heads,
            head_dim,
        } = shape;
        let dq_w = heads * head_dim;
        let dkv_w = kv_heads * head_dim;
        let group = heads / kv_heads;
        let scale = F::one() / F::of(head_dim as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dscores = vec![F::zero(); seq * seq];
        // Gradients are computed into local buffers first: q, k, v may alias.
        let mut dq = vec![F::zero(); qv.len()];
        let mut dk = vec![F::zero(); kv.len()];
        let mut dv = vec![F::zero(); vv.len()];
        for b in 0..batch {
            for h in 0..heads {
                let gh = h / group;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                let q_l = Layout {
                    offset: b * seq * dq_w + h * head_dim,
                    rs: dq_w,
                    cs: 1,
                };
                let kv_l = Layout {
                    offset: b * seq * dkv_w + gh * head_dim,
                    rs: dkv_w,
                    cs: 1,
                };
                for i0 in (0..seq).step_by(ATTENTION_TILE) {
                    let i1 = (i0 + ATTENTION_TILE).min(seq);
                    let qt = Layout {
                        offset: q_l.offset + i0 * dq_w,
                        ..q_l
                    };
                    // dV += P^T dO
                    gemm(
                        i1,
                        i1 - i0,
                        head_dim,
                        F::one(),
                        p,
                        Layout {
                            offset: i0 * seq,
                            rs: 1,
                            cs: seq,
                        },
                        g,
                        qt,
                        F::one(),
                        &mut dv,
                        kv_l,
                    );
                    // dP = dO V^T
                    gemm(
                        i1 - i0,
                        head_dim,
                        i1,
                        F::one(),
                        g,
                        qt,
                        vv,
                        Layout {
                            offset: kv_l.offset,
                            rs: 1,
                            cs: dkv_w,
                        },
                        F::zero(),
                        &mut dscores,
                        Layout::row_major(i0 * seq, seq),
                    );
                    // dS = P * (dP - rowsum(P * dP)), scaled for the score scale
                    for i in i0..i1 {
                        let prow = &p[i * seq..(i + 1) * seq];
                        let drow = &mut dscores[i * seq..(i + 1) * seq];
                        let dot: F = (0..=i).map(|j| prow[j] * drow[j]).sum();
                        for j in 0..=i {
                            drow[j] = prow[j] * (drow[j] - dot) * scale;
                        }
                        drow[i + 1..i1].iter_mut().for_each(|x| *x = F::zero());
                    }
                    // dQ += dS K
                    gemm(
                        i1 - i0,
                        i1,
                        head_dim,
                        F::one(),
                        &dscores,
                        Layout::row_major(i0 * seq, seq),
                        kv,
                        kv_l,
                        F::one(),
                        &mut dq,
                        qt,
                    );
                    // dK += dS^T Q
                    gemm(
                        i1,
                        i1 - i0,
                        head_dim,
                        F::one(),
                        &dscores,
                        Layout {
                            offset: i0 * seq,
                            rs: 1,
                            cs: seq,
                        },
                        qv,
                        qt,
                        F::one(),
                        &mut dk,
                        kv_l,
                    );
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.grad_slot(grads, var) {
                slot.iter_mut().zip(&local).for_each(|(d, &x)| *d += x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    /// Central-difference check of `d(sum(f(inputs) * probe)) / d(inputs)`.
    fn check_grad(
        inputs: &[Tensor<f64>],
        f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x)).collect();
        let out = f(&mut g, &vars);
        let probe: Vec<f64> = (0..g.value(out).len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let loss_of = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ins.iter().map(|x| g.leaf(x)).collect();
            let o = f(&mut g, &vs);
            g.value(o).iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let pv = g.constant(g.shape(out).to_vec(), probe.clone()).unwrap();
        let prod = g.mul(out, pv).unwrap();
        let s = g.sum(prod);
        g.backward(s).unwrap();
        let h = 1e-3;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[idx]).map(|x| x.to_vec()).unwrap_or(vec![0.0; input.numel()]);
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[idx].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[idx].data_mut()[j] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-3);
                assert!(
                    err < tol,
                    "input {idx} coord {j}: analytic {} numeric {numeric} rel {err}",
                    analytic[j]
                );
            }
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let i2 = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = g.leaf(&t(&[2, 2], &[0.0; 4]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_sum_backward_is_ones_times_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        let da = g.grad(va).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let expect: f64 = (0..2).map(|j| b.data()[p * 2 + j]).sum();
                assert!((da[i * 4 + p] - expect).abs() < 1e-12);
            }
        }
        check_grad(&[a, b], &|g, v| g.matmul(v[0], v[1]).unwrap(), 1e-6);
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0]));
        let b = g.leaf(&t(&[2], &[3.0, 4.0]));
        let s = g.elementwise(Elementwise::Add, a, Some(b)).unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);
        let z = g.leaf(&t(&[1], &[0.0]));
        let y = g.elementwise(Elementwise::Silu, z, None).unwrap();
        assert_eq!(g.value(y), &[0.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[0.5]);
        assert!(g.elementwise(Elementwise::Add, a, None).is_err());
        let c = g.leaf(&t(&[3], &[0.0; 3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random(&[2, 3], &mut rng), random(&[2, 3], &mut rng));
        let row = random(&[3], &mut rng);
        check_grad(&[a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap(), 1e-6);
        check_grad(&[a.clone(), b], &|g, v| g.add(v[0], v[1]).unwrap(), 1e-6);
        check_grad(&[a.clone(), row.clone()], &|g, v| g.add(v[0], v[1]).unwrap(), 1e-6);
        check_grad(&[a.clone(), row], &|g, v| g.mul(v[0], v[1]).unwrap(), 1e-6);
        check_grad(&[a.clone()], &|g, v| g.silu(v[0]), 1e-4);
        let c = random(&[2, 3], &mut rng);
        check_grad(&[a, c], &|g, v| g.swiglu(v[0], v[1]).unwrap(), 1e-4);
    }

    #[test]
    fn swiglu_matches_silu_times_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng));
        let mut g = Graph::<f64>::new();
        let (x, y) = (g.leaf(&a), g.leaf(&b));
        let fused = g.swiglu(x, y).unwrap();
        let s = g.silu(x);
        let split = g.mul(s, y).unwrap();
        for (p, q) in g.value(fused).iter().zip(g.value(split)) {
            assert!((p - q).abs() < 1e-15);
        }
        let row = g.leaf(&random(&[4], &mut rng));
        assert!(g.swiglu(x, row).is_err());
    }

    #[test]
    fn rmsnorm_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[4], &[1.0; 4]));
        let w = g.leaf(&t(&[4], &[1.0; 4]));
        let y = g.rmsnorm(x, w, 1e-12).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let x = g.leaf(&t(&[2], &[2.0, 2.0]));
        let w = g.leaf(&t(&[2], &[1.0, 1.0]));
        let y = g.rmsnorm(x, w, 1e-12).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(g.rmsnorm(x, w, 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, w) = (random(&[3, 5], &mut rng), random(&[5], &mut rng));
        check_grad(&[x, w], &|g, v| g.rmsnorm(v[0], v[1], 1e-6).unwrap(), 1e-5);
    }

    #[test]
    fn rope_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 8], &mut rng);
        check_grad(&[x], &|g, v| g.rope(v[0], &[0, 5, 2], 4, 10000.0).unwrap(), 1e-6);
    }

    #[test]
    fn attention_gradient_gqa() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = AttentionShape {
            batch: 2,
            seq: 3,
            heads: 4,
            kv_heads: 2,
            head_dim: 2,
        };
        let q = random(&[6, 8], &mut rng);
        let k = random(&[6, 4], &mut rng);
        let v = random(&[6, 4], &mut rng);
        check_grad(&[q, k, v], &|g, x| g.attention(x[0], x[1], x[2], shape).unwrap(), 1e-5);
    }

    #[test]
    fn attention_across_tiles_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (seq, heads, kv_heads, hd) = (2 * ATTENTION_TILE + 44, 2, 1, 2);
        let shape = AttentionShape {
            batch: 1,
            seq,
            heads,
            kv_heads,
            head_dim: hd,
        };
        let q = random(&[seq, heads * hd], &mut rng);
        let k = random(&[seq, hd], &mut rng);
        let v = random(&[seq, hd], &mut rng);
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (g.leaf(&q), g.leaf(&k), g.leaf(&v));
        let out = g.attention(qv, kv, vv, shape).unwrap();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        for h in 0..heads {
            for i in 0..seq {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|c| qd[i * 4 + h * hd + c] * kd[j * hd + c]).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for c in 0..hd {
                    let want: f64 = (0..=i).map(|j| (scores[j] - m).exp() / z * vd[j * hd + c]).sum();
                    let got = g.value(out)[i * 4 + h * hd + c];
                    assert!((got - want).abs() < 1e-12, "row {i} head {h}: {got} vs {want}");
                }
            }
        }
        let shape = AttentionShape {
            seq: ATTENTION_TILE + 3,
            heads: 1,
            head_dim: 1,
            ..shape
        };
        let n = shape.seq;
        let (q, k, v) = (random(&[n, 1], &mut rng), random(&[n, 1], &mut rng), random(&[n, 1], &mut rng));
        check_grad(&[q, k, v], &|g, x| g.attention(x[0], x[1], x[2], shape).unwrap(), 1e-4);
    }

    #[test]
    fn attention_with_shared_input() {
        // q, k and v all the same node: gradients from the three roles add up.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = AttentionShape {
            batch: 1,
            seq: 4,
            heads: 2,
            kv_heads: 2,
            head_dim: 2,
        };
        let x = random(&[4, 4], &mut rng);
        check_grad(&[x], &|g, v| g.attention(v[0], v[0], v[0], shape).unwrap(), 1e-5);
    }

    #[test]
    fn embedding_bag_gradient_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = random(&[5, 2], &mut rng);
        let other = random(&[3, 4], &mut rng);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            g.embedding_bag(
                3,
                4,
                vec![
                    BagTerm {
                        table: v[0],
                        ids: vec![1, 1, BagTerm::SKIP],
                        col_offset: 2,
                    },
                    BagTerm {
                        table: v[1],
                        ids: vec![0, 2, 2],
                        col_offset: 0,
                    },
                ],
            )
            .unwrap()
        };
        check_grad(&[table.clone(), other], &f, 1e-6);
        let mut g = Graph::new();
        let v = g.leaf(&table);
        let bad = g.embedding_bag(
            1,
            2,
            vec![BagTerm {
                table: v,
                ids: vec![9],
                col_offset: 0,
            }],
        );
        assert!(matches!(bad, Err(Error::Index { index: 9, .. })));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(&t(&[1, 256], &[0.3; 256]));
        let (nll, count) = g.softmax_cross_entropy(logits, &[17], &[true]).unwrap();
        assert_eq!(count, 1);
        assert!((g.scalar(nll) - 256f64.ln()).abs() < 1e-12);

        let logits = g.leaf(&t(&[1, 2], &[10.0, -10.0]));
        let (nll, _) = g.softmax_cross_entropy(logits, &[0], &[true]).unwrap();
        // log(1 + e^-20) computed independently
        let oracle = (-20f64).exp().ln_1p();
        assert!((g.scalar(nll) - oracle).abs() / oracle < 1e-12);
        assert!((g.scalar(nll) - 2.06e-9).abs() < 1e-11);

        let logits = g.leaf(&t(&[2, 3], &[1.0; 6]));
        let (nll, count) = g.softmax_cross_entropy(logits, &[0, 1], &[false, false]).unwrap();
        assert_eq!((g.scalar(nll), count), (0.0, 0));

        assert!(g.softmax_cross_entropy(logits, &[0, 3], &[true, true]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_masks_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = random(&[3, 5], &mut rng);
        let mut g = Graph::new();
        let l = g.leaf(&logits);
        let (nll, _) = g.softmax_cross_entropy(l, &[1, 4, 2], &[true, false, true]).unwrap();
        let probs = g.cross_entropy_probs(nll).unwrap().to_vec();
        for r in [0, 2] {
            let s: f64 = probs[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        g.backward(nll).unwrap();
        let d = g.grad(l).unwrap();
        assert!(d[5..10].iter().all(|&x| x == 0.0));
        assert!((d[1] - (probs[1] - 1.0)).abs() < 1e-15);
        check_grad(
            &[logits],
            &|g, v| g.softmax_cross_entropy(v[0], &[1, 4, 2], &[true, false, true]).unwrap().0,
            1e-6,
        );
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let (a, b) = (random(&[8, 6], &mut rng), random(&[6, 5], &mut rng));
            let mut g = Graph::new();
            let (va, vb) = (g.leaf(&a), g.leaf(&b));
            let c = g.matmul(va, vb).unwrap();
            let c = g.silu(c);
            let s = g.sum(c);
            g.backward(s).unwrap();
            g.grad(va).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
