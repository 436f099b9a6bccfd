//! Dense GEMM dispatch and the worker-count knob.
//!
//! Matrix products go through `matrixmultiply`. When more than one worker is
//! allowed, the output rows are split into contiguous blocks and each block is
//! computed by the same single-threaded kernel. The kernel's summation order
//! along the inner dimension does not depend on how the rows are split, so the
//! result is bit-identical for every worker count.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::Scalar;

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Environment variable bounding the number of matmul workers.
pub const THREADS_ENV: &str = "BYTELAB_THREADS";

/// Worker count for matmul fan-out. Reads `BYTELAB_THREADS` once; defaults to 1.
pub fn threads() -> usize {
    let n = THREADS.load(Ordering::Relaxed);
    if n != 0 {
        return n;
    }
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    THREADS.store(n, Ordering::Relaxed);
    n
}

/// Override the worker count for this process.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Layout {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` block.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Layout {
            offset,
            rs: 1,
            cs: cols,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C = alpha * A B + beta * C` with `A: m x k`, `B: k x n`, `C: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    la: Layout,
    b: &[F],
    lb: Layout,
    beta: F,
    c: &mut [F],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = lc.offset + i * lc.rs + j * lc.cs;
                c[idx] = if beta == F::zero() {
                    F::zero()
                } else {
                    beta * c[idx]
                };
            }
        }
        return;
    }
    assert!(la.last_index(m, k) < a.len(), "gemm: A out of bounds");
    assert!(lb.last_index(k, n) < b.len(), "gemm: B out of bounds");
    assert!(lc.last_index(m, n) < c.len(), "gemm: C out of bounds");

    let workers = threads().min(m);
    let big = m * n * k >= 1 << 18;
    if workers > 1 && big && lc.cs == 1 && lc.rs >= n {
        let rows_per = m.div_ceil(workers);
        let c_tail = &mut c[lc.offset..];
        std::thread::scope(|scope| {
            let mut rest = c_tail;
            let mut row = 0;
            while row < m {
                let rows = rows_per.min(m - row);
                let take = if row + rows == m {
                    rest.len()
                } else {
                    rows * lc.rs
                };
                let (block, tail) = rest.split_at_mut(take);
                rest = tail;
                let la_block = Layout {
                    offset: la.offset + row * la.rs,
                    ..la
                };
                scope.spawn(move || {
                    // SAFETY: bounds checked above; the block holds exactly the
                    // rows [row, row + rows) of C.
                    unsafe {
                        F::gemm_raw(
                            rows,
                            k,
                            n,
                            alpha,
                            a.as_ptr().add(la_block.offset),
                            la.rs as isize,
                            la.cs as isize,
                            b.as_ptr().add(lb.offset),
                            lb.rs as isize,
                            lb.cs as isize,
                            beta,
                            block.as_mut_ptr(),
                            lc.rs as isize,
                            1,
                        )
                    }
                });
                row += rows;
            }
        });
        return;
    }

    // SAFETY: every index touched lies within the bounds asserted above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &a,
            Layout::row_major(0, k),
            &b,
            Layout::row_major(0, n),
            0.0,
            &mut c,
            Layout::row_major(0, n),
        );
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_layout() {
        // A^T B where A is stored row-major as k x m
        let (m, k, n) = (2, 3, 2);
        let a_t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(
            m,
            k,
            n,
            1.0f64,
            &a_t,
            Layout::transposed(0, m),
            &b,
            Layout::row_major(0, n),
            0.0,
            &mut c,
            Layout::row_major(0, n),
        );
        // A = [[1,3,5],[2,4,6]]
        assert_eq!(c, [6.0, 8.0, 8.0, 10.0]);
    }

    #[test]
    fn row_split_is_bit_identical() {
        let (m, k, n) = (96, 80, 72);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7919) % 1000) as f32 / 997.0 - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 104729) % 1000) as f32 / 991.0 - 0.5).collect();
        let run = |workers: usize| {
            set_threads(workers);
            let mut c = vec![0.0f32; m * n];
            gemm(
                m,
                k,
                n,
                1.0,
                &a,
                Layout::row_major(0, k),
                &b,
                Layout::row_major(0, n),
                0.0,
                &mut c,
                Layout::row_major(0, n),
            );
            c
        };
        let single = run(1);
        let multi = run(4);
        set_threads(1);
        assert_eq!(
            single.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            multi.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
