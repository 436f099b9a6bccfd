//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Parameters live in [`Tensor`]s owned by the model. Every forward pass
//! builds a fresh [`Graph`]: parameters enter as leaves, each operation
//! appends one node, and [`Graph::backward`] walks the nodes in reverse
//! insertion order (a reverse topological order, since a node's inputs are
//! always older than the node). Leaf gradients accumulate across calls.
//!
//! Everything is generic over [`Scalar`], implemented for `f32` (training)
//! and `f64` (gradient verification).

mod kernels;
mod ops;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use kernels::{set_threads, threads, THREADS_ENV};
pub use ops::{softmax_in_place, BagTerm, Elementwise, AttentionShape};

/// Floating-point element type of tensors and graphs.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Raw strided GEMM, `C = alpha A B + beta C`.
    ///
    /// # Safety
    /// All pointers must be valid for every index addressed by the strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `x = exp(x)` for every element.
    fn exp_slice(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = x.exp());
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn exp_slice(xs: &mut [f32]) {
        xs.iter_mut().for_each(|x| *x = exp_f32(*x));
    }
}

/// Branch-free `exp` for f32 (Cephes polynomial, within 2 ulp of the
/// correctly rounded result); saturates above 88. Written so that slice
/// loops vectorize.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const ROUND: f32 = 12_582_912.0;
    let c = x.max(-87.336_54).min(88.0);
    let t = c * LOG2E + ROUND;
    let n = t - ROUND;
    let r = c - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    // the low mantissa bits of t hold n
    let k = t.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127);
    let y = y * f32::from_bits(k << 23);
    if x != x {
        x
    } else {
        y
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// An owned dense tensor with an optional, lazily allocated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: true,
        }
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| F::of(dist.sample(rng))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [F]> {
        self.grad.as_deref_mut()
    }

    /// Borrow data and gradient together (for optimizer updates).
    pub fn data_and_grad_mut(&mut self) -> (&mut [F], Option<&[F]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Convert to another precision, dropping the gradient.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

/// Handle of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: ops::Op<F>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<F>>,
}

/// A differentiation tape for one forward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. The data is copied into the graph.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), ops::Op::Leaf, t.requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_requires_grad(false);
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clear every leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<F>,
        op: ops::Op<F>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar root. Leaf gradients accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.nodes[root.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, ops::Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    /// Gradient buffer for `v`, allocated on first use. `None` if `v` needs no gradient.
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }
}
