//! Dense row-major matrix kernels used by the classifier.
//!
//! Everything here is single-threaded and evaluates in a fixed operation
//! order, so results are bitwise reproducible run to run. All three GEMM
//! variants share one register-tiled 8x16 microkernel and pack their
//! operands into small contiguous scratch buffers: the active A block is
//! stored column-major so the kernel reads one contiguous 8-vector per step,
//! and the active B panel is repacked per column tile so the streamed
//! operand stays cache- and TLB-friendly no matter how large B is.

use num_traits::Float;

/// Scalar type the network math is generic over. `f32` is the production
/// type; `f64` backs the finite-difference gradient oracle.
pub(crate) trait Real:
    Float + num_traits::FromPrimitive + std::ops::AddAssign + std::fmt::Debug + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

const TILE_J: usize = 16;
const ROW_BLOCK: usize = 8;

/// Reusable packing buffers for the GEMM calls on one thread.
#[derive(Debug, Default)]
pub(crate) struct GemmScratch<T> {
    at: Vec<T>,
    panel: Vec<T>,
}

impl<T: Real> GemmScratch<T> {
    pub(crate) fn new() -> Self {
        GemmScratch {
            at: Vec::new(),
            panel: Vec::new(),
        }
    }
}

/// `out += a * b` where `a` is `m x k`, `b` is `k x n`, `out` is `m x n`.
pub(crate) fn gemm_nn<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    scratch: &mut GemmScratch<T>,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    pack_a_rows(a, m, k, &mut scratch.at);
    gemm_packed(&scratch.at, b, out, m, k, n, &mut scratch.panel, PanelSource::Columns);
    for row in (m - m % ROW_BLOCK)..m {
        let arow = &a[row * k..(row + 1) * k];
        let orow = &mut out[row * n..(row + 1) * n];
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a^T * b` where `a` is `k x m`, `b` is `k x n`, `out` is `m x n`.
pub(crate) fn gemm_tn<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    scratch: &mut GemmScratch<T>,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    pack_a_cols(a, m, k, &mut scratch.at);
    gemm_packed(&scratch.at, b, out, m, k, n, &mut scratch.panel, PanelSource::Columns);
    for row in (m - m % ROW_BLOCK)..m {
        let orow = &mut out[row * n..(row + 1) * n];
        for (kk, brow) in b.chunks_exact(n).enumerate() {
            let av = a[kk * m + row];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T` where `a` is `m x k`, `b` is `n x k`, `out` is `m x n`.
pub(crate) fn gemm_nt<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    scratch: &mut GemmScratch<T>,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    pack_a_rows(a, m, k, &mut scratch.at);
    gemm_packed(&scratch.at, b, out, m, k, n, &mut scratch.panel, PanelSource::Rows);
    for row in (m - m % ROW_BLOCK)..m {
        let arow = &a[row * k..(row + 1) * k];
        let orow = &mut out[row * n..(row + 1) * n];
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            *o += dot(arow, brow);
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum PanelSource {
    /// B is `k x n`; a panel is 16 consecutive columns.
    Columns,
    /// B is `n x k`; a panel is 16 consecutive rows, read transposed.
    Rows,
}

/// Column-major 8-row blocks of A: `at[blk][kk][r] = a[blk * 8 + r][kk]`.
/// Only full blocks are packed; trailing rows stay with the caller.
fn pack_a_rows<T: Real>(a: &[T], m: usize, k: usize, at: &mut Vec<T>) {
    let blocks = m / ROW_BLOCK;
    at.clear();
    at.resize(blocks * k * ROW_BLOCK, T::zero());
    for blk in 0..blocks {
        let dst = &mut at[blk * k * ROW_BLOCK..(blk + 1) * k * ROW_BLOCK];
        for r in 0..ROW_BLOCK {
            let row = &a[(blk * ROW_BLOCK + r) * k..(blk * ROW_BLOCK + r + 1) * k];
            for (kk, &v) in row.iter().enumerate() {
                dst[kk * ROW_BLOCK + r] = v;
            }
        }
    }
}

/// Same layout as [`pack_a_rows`] for a transposed A operand:
/// `a` is `k x m` and `at[blk][kk][r] = a[kk][blk * 8 + r]`.
fn pack_a_cols<T: Real>(a: &[T], m: usize, k: usize, at: &mut Vec<T>) {
    let blocks = m / ROW_BLOCK;
    at.clear();
    at.resize(blocks * k * ROW_BLOCK, T::zero());
    for (kk, arow) in a.chunks_exact(m).enumerate() {
        for blk in 0..blocks {
            let src: &[T; ROW_BLOCK] = arow[blk * ROW_BLOCK..(blk + 1) * ROW_BLOCK]
                .try_into()
                .unwrap();
            at[blk * k * ROW_BLOCK + kk * ROW_BLOCK..][..ROW_BLOCK].copy_from_slice(src);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_packed<T: Real>(
    at: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    panel: &mut Vec<T>,
    source: PanelSource,
) {
    let blocks = m / ROW_BLOCK;
    panel.clear();
    panel.resize(k * TILE_J, T::zero());

    let mut j = 0;
    while j + TILE_J <= n {
        match source {
            PanelSource::Columns => {
                for (dst, brow) in panel.chunks_exact_mut(TILE_J).zip(b.chunks_exact(n)) {
                    dst.copy_from_slice(&brow[j..j + TILE_J]);
                }
            }
            PanelSource::Rows => {
                for (t, brow) in b[j * k..(j + TILE_J) * k].chunks_exact(k).enumerate() {
                    for (kk, &v) in brow.iter().enumerate() {
                        panel[kk * TILE_J + t] = v;
                    }
                }
            }
        }
        for blk in 0..blocks {
            kernel_8x16(
                &at[blk * k * ROW_BLOCK..(blk + 1) * k * ROW_BLOCK],
                panel,
                &mut out[blk * ROW_BLOCK * n..(blk + 1) * ROW_BLOCK * n],
                n,
                j,
            );
        }
        j += TILE_J;
    }

    if j < n {
        for blk in 0..blocks {
            let at_block = &at[blk * k * ROW_BLOCK..(blk + 1) * k * ROW_BLOCK];
            let out_block = &mut out[blk * ROW_BLOCK * n..(blk + 1) * ROW_BLOCK * n];
            for (kk, avals) in at_block.chunks_exact(ROW_BLOCK).enumerate() {
                for col in j..n {
                    let bv = match source {
                        PanelSource::Columns => b[kk * n + col],
                        PanelSource::Rows => b[col * k + kk],
                    };
                    for (r, &av) in avals.iter().enumerate() {
                        out_block[r * n + col] += av * bv;
                    }
                }
            }
        }
    }
}

/// One 8-row block against one 16-column panel; all 128 accumulators stay in
/// registers across the k loop.
fn kernel_8x16<T: Real>(at_block: &[T], panel: &[T], out: &mut [T], n: usize, j: usize) {
    let mut acc0: [T; TILE_J] = out[j..j + TILE_J].try_into().unwrap();
    let mut acc1: [T; TILE_J] = out[n + j..n + j + TILE_J].try_into().unwrap();
    let mut acc2: [T; TILE_J] = out[2 * n + j..2 * n + j + TILE_J].try_into().unwrap();
    let mut acc3: [T; TILE_J] = out[3 * n + j..3 * n + j + TILE_J].try_into().unwrap();
    let mut acc4: [T; TILE_J] = out[4 * n + j..4 * n + j + TILE_J].try_into().unwrap();
    let mut acc5: [T; TILE_J] = out[5 * n + j..5 * n + j + TILE_J].try_into().unwrap();
    let mut acc6: [T; TILE_J] = out[6 * n + j..6 * n + j + TILE_J].try_into().unwrap();
    let mut acc7: [T; TILE_J] = out[7 * n + j..7 * n + j + TILE_J].try_into().unwrap();
    for (avals, tile) in at_block
        .chunks_exact(ROW_BLOCK)
        .zip(panel.chunks_exact(TILE_J))
    {
        let avals: &[T; ROW_BLOCK] = avals.try_into().unwrap();
        let tile: &[T; TILE_J] = tile.try_into().unwrap();
        for t in 0..TILE_J {
            let bv = tile[t];
            acc0[t] = acc0[t] + avals[0] * bv;
            acc1[t] = acc1[t] + avals[1] * bv;
            acc2[t] = acc2[t] + avals[2] * bv;
            acc3[t] = acc3[t] + avals[3] * bv;
            acc4[t] = acc4[t] + avals[4] * bv;
            acc5[t] = acc5[t] + avals[5] * bv;
            acc6[t] = acc6[t] + avals[6] * bv;
            acc7[t] = acc7[t] + avals[7] * bv;
        }
    }
    out[j..j + TILE_J].copy_from_slice(&acc0);
    out[n + j..n + j + TILE_J].copy_from_slice(&acc1);
    out[2 * n + j..2 * n + j + TILE_J].copy_from_slice(&acc2);
    out[3 * n + j..3 * n + j + TILE_J].copy_from_slice(&acc3);
    out[4 * n + j..4 * n + j + TILE_J].copy_from_slice(&acc4);
    out[5 * n + j..5 * n + j + TILE_J].copy_from_slice(&acc5);
    out[6 * n + j..6 * n + j + TILE_J].copy_from_slice(&acc6);
    out[7 * n + j..7 * n + j + TILE_J].copy_from_slice(&acc7);
}

/// Dot product with eight partial accumulators in a fixed lane order.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    for (ac, bc) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        let ac: &[T; 8] = ac.try_into().unwrap();
        let bc: &[T; 8] = bc.try_into().unwrap();
        for t in 0..8 {
            lanes[t] = lanes[t] + ac[t] * bc[t];
        }
    }
    let mut sum = T::zero();
    for t in 0..8 {
        sum = sum + lanes[t];
    }
    let rem = a.len() - a.len() % 8;
    for i in rem..a.len() {
        sum = sum + a[i] * b[i];
    }
    sum
}
