//! Shared kernels with pinned reduction order.
//!
//! Every reduction in this module runs sequentially from index 0 upward, so
//! results are bitwise reproducible for fixed inputs no matter how callers
//! distribute work across threads. Matrices are dense, row-major slices.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating-point element type used throughout the pipeline.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from a double-precision constant.
    fn of(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const TILE: usize = 4;
const TILE_N: usize = 8;

/// `out (m×n) += a (m×k) · b (k×n)`, or `=` when `overwrite` is set. Each
/// output element is summed over `k` in order, in 4×8 register tiles.
fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T], overwrite: bool) {
    let (m4, n4) = (m - m % TILE, n - n % TILE_N);
    for i in (0..m4).step_by(TILE) {
        for j in (0..n4).step_by(TILE_N) {
            let mut acc = [[T::zero(); TILE_N]; TILE];
            let rows = a[i * k..(i + TILE) * k].chunks_exact(k);
            let (a0, a1, a2, a3) = match rows.collect::<Vec<_>>()[..] {
                [a0, a1, a2, a3] => (a0, a1, a2, a3),
                _ => unreachable!(),
            };
            for ((((b_row, &x0), &x1), &x2), &x3) in b.chunks_exact(n).zip(a0).zip(a1).zip(a2).zip(a3) {
                let bp: &[T; TILE_N] = b_row[j..j + TILE_N].try_into().expect("tile width");
                for (row, x) in acc.iter_mut().zip([x0, x1, x2, x3]) {
                    for (v, &y) in row.iter_mut().zip(bp) {
                        *v += x * y;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + TILE_N];
                for (dst, &v) in o.iter_mut().zip(row) {
                    *dst = if overwrite { v } else { *dst + v };
                }
            }
        }
        for r in i..i + TILE {
            edge_columns(a, b, r, k, n, n4, out, overwrite);
        }
    }
    for r in m4..m {
        let o = &mut out[r * n..(r + 1) * n];
        if overwrite {
            o.fill(T::zero());
        }
        for (&x, b_row) in a[r * k..(r + 1) * k].iter().zip(b.chunks_exact(n)) {
            axpy(x, b_row, o);
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn edge_columns<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, n: usize, from: usize, out: &mut [T], overwrite: bool) {
    for j in from..n {
        let mut v = T::zero();
        for p in 0..k {
            v += a[r * k + p] * b[p * n + j];
        }
        let dst = &mut out[r * n + j];
        *dst = if overwrite { v } else { *dst + v };
    }
}

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for (r, row) in x.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t[c * rows + r] = v;
        }
    }
    t
}

/// `out (m×n) = a (m×k) · b (k×n)`; `out` is overwritten.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm(a, b, m, k, n, out, true);
}

/// `out (m×n) = a (m×k) · b (k×n) + bias (n)` broadcast over rows.
pub fn matmul_bias<T: Scalar>(
    a: &[T],
    b: &[T],
    bias: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul(a, b, m, k, n, &mut out);
    for row in out.chunks_exact_mut(n) {
        for (o, &bj) in row.iter_mut().zip(bias) {
            *o += bj;
        }
    }
    out
}

/// `out (k×n) += aᵀ · g` for `a (m×k)`, `g (m×n)`. Used for weight gradients.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if m == 1 {
        for (&aik, out_row) in a.iter().zip(out.chunks_exact_mut(n)) {
            if aik != T::zero() {
                axpy(aik, g, out_row);
            }
        }
        return;
    }
    gemm(&transpose(a, m, k), g, k, m, n, out, false);
}

/// `out (m×k) += g (m×n) · wᵀ` for `w (k×n)`. Used for input gradients.
pub fn matmul_nt_acc<T: Scalar>(g: &[T], w: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    if m == 1 {
        for (o, w_row) in out.iter_mut().zip(w.chunks_exact(n)) {
            *o += dot(g, w_row);
        }
        return;
    }
    gemm(g, &transpose(w, k, n), m, n, k, out, false);
}

/// Column sums of an `m×n` matrix accumulated into `out`.
pub fn col_sum_acc<T: Scalar>(g: &[T], n: usize, out: &mut [T]) {
    for row in g.chunks_exact(n) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
}

fn check_finite<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite value at index {i}")));
    }
    Ok(())
}

/// Softmax of `v / tau` with the maximum subtracted before exponentiation.
pub fn stable_softmax<T: Scalar>(v: &[T], tau: T) -> Result<Vec<T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::Config(format!("softmax temperature must be > 0, got {tau}")));
    }
    check_finite(v, "softmax input")?;
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out, tau);
    Ok(out)
}

/// Unchecked in-place variant of [`stable_softmax`] for hot loops whose inputs
/// are finite by construction.
pub fn softmax_in_place<T: Scalar>(v: &mut [T], tau: T) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = ((*x - max) / tau).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// `log softmax(v / tau)`.
pub fn log_softmax<T: Scalar>(v: &[T], tau: T) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &x in v {
        total += ((x - max) / tau).exp();
    }
    let log_z = total.ln();
    v.iter().map(|&x| (x - max) / tau - log_z).collect()
}

/// Lowest index of the maximum; ties resolve to the smallest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub const LN_EPS: f64 = 1e-5;

/// Cached statistics of one layer-norm row, needed by the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct NormStats<T> {
    pub mean: T,
    pub rstd: T,
}

/// Layer norm of every row of `x (m×n)` with gain and bias.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    n: usize,
) -> (Vec<T>, Vec<NormStats<T>>) {
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(x.len() / n);
    let inv_n = T::one() / T::of(n as f64);
    let eps = T::of(LN_EPS);
    for (row, out_row) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let mut var = T::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        let rstd = T::one() / (var * inv_n + eps).sqrt();
        for (((o, &v), &g), &b) in out_row.iter_mut().zip(row).zip(gain).zip(bias) {
            *o = (v - mean) * rstd * g + b;
        }
        stats.push(NormStats { mean, rstd });
    }
    (out, stats)
}

/// Backward of [`layer_norm`]: accumulates input gradients into `dx` and
/// parameter gradients into `dgain`/`dbias` when given.
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    stats: &[NormStats<T>],
    gain: &[T],
    dy: &[T],
    n: usize,
    dx: &mut [T],
    mut dparams: Option<(&mut [T], &mut [T])>,
) {
    let inv_n = T::one() / T::of(n as f64);
    let mut xhat = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for (((row, st), dy_row), dx_row) in x
        .chunks_exact(n)
        .zip(stats)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        for j in 0..n {
            xhat[j] = (row[j] - st.mean) * st.rstd;
            dxhat[j] = dy_row[j] * gain[j];
        }
        if let Some((dg, db)) = dparams.as_mut() {
            for j in 0..n {
                dg[j] += dy_row[j] * xhat[j];
                db[j] += dy_row[j];
            }
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_n;
        let mean_dxhat_xhat = dot(&dxhat, &xhat) * inv_n;
        for j in 0..n {
            dx_row[j] += st.rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Counter-based random stream: a 64-bit key selects a ChaCha8 keystream and
/// the counter is the position within it.
///
/// Children derived with [`RngStream::split`] depend only on the parent key
/// and the label, never on how far the parent has advanced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(key: u64) -> Self {
        Self { key, inner: ChaCha8Rng::seed_from_u64(key) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn split(&self, label: &str) -> RngStream {
        RngStream::new(splitmix64(self.key ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    pub fn split_index(&self, label: &str, index: u64) -> RngStream {
        let base = self.split(label);
        RngStream::new(splitmix64(base.key ^ splitmix64(index.wrapping_add(1))))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn softmax_of_constant_is_uniform() {
        let w = stable_softmax(&[3.0f64; 5], 1.0).unwrap();
        for x in w {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let w = stable_softmax(&[1000.0f64, 0.0], 1.0).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!(w[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(stable_softmax(&[f64::NAN, 1.0], 1.0), Err(Error::Numeric(_))));
        assert!(matches!(stable_softmax(&[1.0f64], 0.0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_ignores_shifts(
            v in prop::collection::vec(-50.0f64..50.0, 1..40),
            shift in -100.0f64..100.0,
            tau in 0.05f64..5.0,
        ) {
            let w = stable_softmax(&v, tau).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let w2 = stable_softmax(&shifted, tau).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0f64, 5.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0f64, 2.0, 2.0]), 0);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        matmul(&a, &b, 2, 3, 4, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ·c has shape 3×4; g·bᵀ has shape 2×3
        let mut atc = vec![0.0; 12];
        matmul_tn_acc(&a, &c, 2, 3, 4, &mut atc);
        let mut cbt = vec![0.0; 6];
        matmul_nt_acc(&c, &b, 2, 3, 4, &mut cbt);
        for k in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|i| a[i * 3 + k] * c[i * 4 + j]).sum();
                assert!((atc[k * 4 + j] - want).abs() < 1e-12);
            }
        }
        for i in 0..2 {
            for k in 0..3 {
                let want: f64 = (0..4).map(|j| c[i * 4 + j] * b[k * 4 + j]).sum();
                assert!((cbt[i * 3 + k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let n = 5;
        let x = vec![0.3f64, -1.2, 2.0, 0.7, -0.4, 1.1, 0.0, -0.9, 0.25, 0.6];
        let g = vec![1.0, 0.5, -0.3, 2.0, 1.5];
        let b = vec![0.1, 0.0, -0.2, 0.3, 0.0];
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = layer_norm(x, &g, &b, n);
            dot(&y, &w)
        };
        let (_, stats) = layer_norm(&x, &g, &b, n);
        let mut dx = vec![0.0; 10];
        layer_norm_backward(&x, &stats, &g, &w, n, &mut dx, None);
        let h = 1e-6;
        for i in 0..10 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7, "coord {i}: fd {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.2, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn split_is_pure_and_label_sensitive() {
        let mut parent = RngStream::new(42);
        let a = parent.split("weights");
        let b = parent.split("weights");
        assert_eq!(a, b);
        assert_ne!(parent.split("weights").key(), parent.split("rollout").key());
        let before = parent.clone();
        let _ = parent.split("x");
        assert_eq!(parent, before);
        parent.next_u64();
        assert_eq!(parent.split("weights"), a);
    }

    #[test]
    fn stream_is_reproducible() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), 20);
    }
}
