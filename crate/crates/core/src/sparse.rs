//! Weight-gradient GEMM that skips frozen weights.
//!
//! The gradient of weight `(i, j)` is one dot product between row `i` of the
//! output gradient and row `j` of the unfolded activations. A frozen weight's
//! dot product is never evaluated; rows that are entirely frozen are skipped
//! before any memory is touched.
//!
//! Each dot product keeps [`LANES`] interleaved partial sums (element `p`
//! goes to lane `p % LANES`, ascending `p` within a lane) that are combined
//! pairwise at the end. The order depends only on `p`, never on which other
//! elements are computed alongside, so the skipped kernel reproduces the
//! dense one bit-for-bit on every unfrozen position.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LANES: usize = 16;

const L2_BYTES: usize = 256 * 1024;
const MAX_BLOCK: usize = 4096;

/// MAC accounting for one weight-gradient GEMM.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SkipGemmReport {
    pub macs_performed: u64,
    pub macs_skipped: u64,
    pub elapsed: Duration,
}

impl SkipGemmReport {
    pub fn total_macs(&self) -> u64 {
        self.macs_performed + self.macs_skipped
    }

    /// Fraction of MACs skipped; equals the frozen fraction of the weight.
    pub fn sparsity(&self) -> f64 {
        let total = self.total_macs();
        if total == 0 {
            0.0
        } else {
            self.macs_skipped as f64 / total as f64
        }
    }
}

/// Combine the lane partial sums in a fixed pairwise order.
#[inline(always)]
pub fn combine_lanes<T: Scalar>(l: &[T; LANES]) -> T {
    let mut v = *l;
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for i in 0..width {
            v[i] = v[2 * i] + v[2 * i + 1];
        }
    }
    v[0]
}

fn check_shapes<T: Scalar>(act_cols: &Tensor<T>, g_out: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if act_cols.rank() != 2 || g_out.rank() != 2 || act_cols.dim(1) != g_out.dim(1) {
        return Err(Error::dim("weight_grad", g_out.shape(), act_cols.shape()));
    }
    Ok((g_out.dim(0), act_cols.dim(0), act_cols.dim(1)))
}

/// Dense weight gradient `G[M×K] = g_out[M×P] · act_colsᵀ` (act_cols is `K×P`).
pub fn weight_grad_dense<T: Scalar>(act_cols: &Tensor<T>, g_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, p) = check_shapes(act_cols, g_out)?;
    let mut out = vec![T::zero(); m * k];
    kernel(m, k, p, act_cols.data(), g_out.data(), None, &mut out);
    Tensor::new(&[m, k], out)
}

/// Weight gradient with frozen positions skipped and written as exact zero.
///
/// `frozen` is row-major over the `M×K` output.
pub fn weight_grad_skipped<T: Scalar>(
    act_cols: &Tensor<T>,
    g_out: &Tensor<T>,
    frozen: &[bool],
) -> Result<(Tensor<T>, SkipGemmReport)> {
    let (m, k, p) = check_shapes(act_cols, g_out)?;
    if frozen.len() != m * k {
        return Err(Error::dim("weight_grad_skipped mask", &[frozen.len()], &[m, k]));
    }
    let start = Instant::now();
    let mut out = vec![T::zero(); m * k];
    let active = kernel(m, k, p, act_cols.data(), g_out.data(), Some(frozen), &mut out);
    let elapsed = start.elapsed();
    let total = (m * k * p) as u64;
    let performed = active as u64 * p as u64;
    Ok((
        Tensor::new(&[m, k], out)?,
        SkipGemmReport {
            macs_performed: performed,
            macs_skipped: total - performed,
            elapsed,
        },
    ))
}

/// Reduction columns per pass, sized so the `M` output-gradient rows of one
/// pass stay in L2 while activation rows stream past them.
fn block_len<T>(m: usize) -> usize {
    let fit = L2_BYTES / (m.max(1) * std::mem::size_of::<T>());
    (fit / LANES * LANES).clamp(4 * LANES, MAX_BLOCK)
}

/// One pass over reduction columns `p0..p1`. Partial sums carry over between
/// passes in `lanes`; the last pass adds the tail past the last full lane
/// chunk and writes the combined sum to `out`.
struct Pass<'a, T> {
    act: &'a [T],
    g: &'a [T],
    m: usize,
    k: usize,
    p: usize,
    p0: usize,
    p1: usize,
    first: bool,
    last: bool,
}

impl<'a, T: Scalar> Pass<'a, T> {
    #[inline(always)]
    fn grow(&self, i: usize) -> &'a [T] {
        &self.g[i * self.p + self.p0..i * self.p + self.p1]
    }

    #[inline(always)]
    fn arow(&self, j: usize) -> &'a [T] {
        &self.act[j * self.p + self.p0..j * self.p + self.p1]
    }

    #[inline(always)]
    fn load(&self, lanes: &[[T; LANES]], i: usize, j: usize) -> [T; LANES] {
        if self.first {
            [T::zero(); LANES]
        } else {
            lanes[j * self.m + i]
        }
    }

    #[inline(always)]
    fn store(&self, lanes: &mut [[T; LANES]], out: &mut [T], i: usize, j: usize, acc: &[T; LANES]) {
        if self.last {
            let (full, p) = (self.p1, self.p);
            out[i * self.k + j] = if full == p {
                combine_lanes(acc)
            } else {
                finish(acc, &self.g[i * p + full..(i + 1) * p], &self.act[j * p + full..(j + 1) * p])
            };
        } else {
            lanes[j * self.m + i] = *acc;
        }
    }
}

/// Add the tail past the last full lane chunk and combine.
#[inline(never)]
fn finish<T: Scalar>(acc: &[T; LANES], g_tail: &[T], a_tail: &[T]) -> T {
    let mut acc = *acc;
    for (l, (&x, &y)) in g_tail.iter().zip(a_tail).enumerate() {
        acc[l] += x * y;
    }
    combine_lanes(&acc)
}

/// Returns the number of output elements that were computed.
fn kernel<T: Scalar>(
    m: usize,
    k: usize,
    p: usize,
    act: &[T],
    g: &[T],
    frozen: Option<&[bool]>,
    out: &mut [T],
) -> usize {
    // Unfrozen output rows for each activation row, flattened: rows of
    // column `j` are `rows[start[j]..start[j + 1]]`. A fully frozen column is
    // never visited.
    let mut rows: Vec<usize> = Vec::with_capacity(m * k);
    let mut start = Vec::with_capacity(k + 1);
    start.push(0);
    for j in 0..k {
        match frozen {
            Some(mask) => rows.extend((0..m).filter(|&i| !mask[i * k + j])),
            None => rows.extend(0..m),
        }
        start.push(rows.len());
    }
    let n_active = rows.len();
    if n_active == 0 {
        return 0;
    }

    let full = p / LANES * LANES;
    let block = block_len::<T>(m);
    let mut lanes = if full > block {
        vec![[T::zero(); LANES]; m * k]
    } else {
        Vec::new()
    };
    // Leftover (i, j) pairs, batched four at a time across columns.
    let mut pending: Vec<(usize, usize)> = Vec::with_capacity(4);
    let mut p0 = 0;
    loop {
        let p1 = (p0 + block).min(full);
        let pass = Pass {
            act,
            g,
            m,
            k,
            p,
            p0,
            p1,
            first: p0 == 0,
            last: p1 == full,
        };
        for j in 0..k {
            let mut groups = rows[start[j]..start[j + 1]].chunks_exact(SHARED);
            for q in &mut groups {
                dot_shared::<T, SHARED>(&pass, q, j, &mut lanes, out);
            }
            let rest = groups.remainder();
            match rest.len() {
                4 => dot_shared::<T, 4>(&pass, rest, j, &mut lanes, out),
                5 => dot_shared::<T, 5>(&pass, rest, j, &mut lanes, out),
                6 => dot_shared::<T, 6>(&pass, rest, j, &mut lanes, out),
                7 => dot_shared::<T, 7>(&pass, rest, j, &mut lanes, out),
                _ => {
                    for &i in rest {
                        pending.push((i, j));
                        if pending.len() == 4 {
                            dot_pairs::<T, 4>(&pass, &pending, &mut lanes, out);
                            pending.clear();
                        }
                    }
                }
            }
        }
        match pending.len() {
            1 => dot_pairs::<T, 1>(&pass, &pending, &mut lanes, out),
            2 => dot_pairs::<T, 2>(&pass, &pending, &mut lanes, out),
            3 => dot_pairs::<T, 3>(&pass, &pending, &mut lanes, out),
            _ => {}
        }
        pending.clear();
        if pass.last {
            break;
        }
        p0 = p1;
    }
    n_active
}

/// Output rows that share one activation row per pass.
const SHARED: usize = 8;

/// `N` dot products of output-gradient rows `rows` against activation row `j`.
#[inline(always)]
fn dot_shared<T: Scalar, const N: usize>(
    pass: &Pass<'_, T>,
    rows: &[usize],
    j: usize,
    lanes: &mut [[T; LANES]],
    out: &mut [T],
) {
    let shared = pass.arow(j);
    let gs: [&[T]; N] = std::array::from_fn(|r| pass.grow(rows[r]));
    let mut acc: [[T; LANES]; N] = std::array::from_fn(|r| pass.load(lanes, rows[r], j));
    accumulate_shared(shared, gs, &mut acc);
    for (r, &i) in rows.iter().enumerate() {
        pass.store(lanes, out, i, j, &acc[r]);
    }
}

/// `N` independent dot products, interleaved so their accumulation chains overlap.
#[inline(always)]
fn dot_pairs<T: Scalar, const N: usize>(
    pass: &Pass<'_, T>,
    pairs: &[(usize, usize)],
    lanes: &mut [[T; LANES]],
    out: &mut [T],
) {
    let gs: [&[T]; N] = std::array::from_fn(|r| pass.grow(pairs[r].0));
    let as_: [&[T]; N] = std::array::from_fn(|r| pass.arow(pairs[r].1));
    let mut acc: [[T; LANES]; N] = std::array::from_fn(|r| pass.load(lanes, pairs[r].0, pairs[r].1));
    accumulate_pairs(as_, gs, &mut acc);
    for (r, &(i, j)) in pairs.iter().enumerate() {
        pass.store(lanes, out, i, j, &acc[r]);
    }
}

#[inline(always)]
fn accumulate_shared<T: Scalar, const N: usize>(shared: &[T], rows: [&[T]; N], acc: &mut [[T; LANES]; N]) {
    let n = shared.len() / LANES;
    for c in 0..n {
        let sc: &[T; LANES] = shared[c * LANES..(c + 1) * LANES].try_into().expect("lane chunk");
        for r in 0..N {
            let rc: &[T; LANES] = rows[r][c * LANES..(c + 1) * LANES]
                .try_into()
                .expect("lane chunk");
            for l in 0..LANES {
                acc[r][l] += sc[l] * rc[l];
            }
        }
    }
}

#[inline(always)]
fn accumulate_pairs<T: Scalar, const N: usize>(a: [&[T]; N], b: [&[T]; N], acc: &mut [[T; LANES]; N]) {
    let n = a[0].len() / LANES;
    for c in 0..n {
        for r in 0..N {
            let ac: &[T; LANES] = a[r][c * LANES..(c + 1) * LANES].try_into().expect("lane chunk");
            let bc: &[T; LANES] = b[r][c * LANES..(c + 1) * LANES].try_into().expect("lane chunk");
            for l in 0..LANES {
                acc[r][l] += ac[l] * bc[l];
            }
        }
    }
}

/// Backward-pass FLOPs for one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFlops {
    /// MACs actually executed (weight-gradient plus activation-gradient GEMMs).
    pub performed: u64,
    /// MACs a dense backward pass would execute.
    pub baseline: u64,
    /// `skipped / baseline`.
    pub reduction: f64,
}

/// Counts backward work as weight-gradient GEMMs plus activation-gradient
/// GEMMs; only the former can be skipped. With equal-sized GEMMs and uniform
/// sparsity `s` the reduction is `s / 2`.
pub fn backward_flops_accounting(
    reports: &[SkipGemmReport],
    activation_grad_macs: &[u64],
) -> Result<BackwardFlops> {
    if reports.len() != activation_grad_macs.len() {
        return Err(Error::dim(
            "backward_flops_accounting",
            &[reports.len()],
            &[activation_grad_macs.len()],
        ));
    }
    let baseline: u64 = reports
        .iter()
        .zip(activation_grad_macs)
        .map(|(r, &a)| r.total_macs() + a)
        .sum();
    let skipped: u64 = reports.iter().map(|r| r.macs_skipped).sum();
    Ok(BackwardFlops {
        performed: baseline - skipped,
        baseline,
        reduction: if baseline == 0 {
            0.0
        } else {
            skipped as f64 / baseline as f64
        },
    })
}
