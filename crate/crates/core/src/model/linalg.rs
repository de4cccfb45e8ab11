//! Dense kernels and the per-thread operation counter used to measure step cost.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Starts counting floating-point operations on the current thread.
pub fn start_instrumentation() {
    COUNTER.with(|c| c.set(Some(0)));
}

/// Stops counting and returns the total, or `None` if counting was off.
pub fn stop_instrumentation() -> Option<u64> {
    COUNTER.with(|c| c.take())
}

pub fn instrumentation_enabled() -> bool {
    COUNTER.with(|c| c.get().is_some())
}

#[inline]
pub(crate) fn record(flops: u64) {
    COUNTER.with(|c| {
        if let Some(n) = c.get() {
            c.set(Some(n + flops));
        }
    });
}

/// `c = alpha * op(a) * op(b) + beta * c` over row-major storage.
///
/// `op(a)` is `m x k`; when `a_t` is set, `a` is stored as `k x m`. Likewise
/// `op(b)` is `k x n`, stored `n x k` when `b_t` is set. `c` is `m x n`.
/// With `beta == 0` the prior contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let sa = if a_t { (1, m) } else { (k, 1) };
    let sb = if b_t { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, alpha, a, sa, b, sb, beta, c, n);
}

/// [`gemm`] over sub-matrices: `a[i * sa.0 + p * sa.1]` is element `(i, p)`
/// of `op(a)`, likewise for `b`, and row `i` of `c` starts at `i * ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n);
    if k > 0 {
        assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
        assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    }
    record(2 * (m * n * k) as u64);
    // SAFETY: the asserts above bound every index reachable through the
    // strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const LN2_HI: f64 = 0.693_147_180_369_123_816_49;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// 1.5 * 2^52: adding it to a float below 2^51 in magnitude leaves the
/// rounded integer in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `2^k` for integral `k` in the normal exponent range.
#[inline(always)]
fn pow2(k: f64) -> f64 {
    let biased = (k + ROUND_MAGIC).to_bits().wrapping_sub(ROUND_MAGIC.to_bits()).wrapping_add(1023);
    f64::from_bits(biased << 52)
}

/// `x <- exp(x)` element-wise, written so the loop vectorizes.
///
/// Range reduction `x = k ln 2 + r` with `|r| <= ln(2) / 2`, then a degree-12
/// Taylor polynomial for `exp(r)`; relative error stays within a few ulps.
/// Inputs are clamped to `[-708, 709]`, so very negative arguments give a
/// tiny positive value rather than an exact zero.
pub(crate) fn exp_in_place(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        let v = x.clamp(-708.0, 709.0);
        let kf = (v * std::f64::consts::LOG2_E + ROUND_MAGIC) - ROUND_MAGIC;
        let r = (v - kf * LN2_HI) - kf * LN2_LO;
        let mut p = 1.0 / 479_001_600.0;
        p = p * r + 1.0 / 39_916_800.0;
        p = p * r + 1.0 / 3_628_800.0;
        p = p * r + 1.0 / 362_880.0;
        p = p * r + 1.0 / 40_320.0;
        p = p * r + 1.0 / 5_040.0;
        p = p * r + 1.0 / 720.0;
        p = p * r + 1.0 / 120.0;
        p = p * r + 1.0 / 24.0;
        p = p * r + 1.0 / 6.0;
        p = p * r + 0.5;
        p = p * r + 1.0;
        p = p * r + 1.0;
        // 2^k in two halves so k down to -1022 and up to 1024 stay normal;
        // only unsigned adds and left shifts, which vectorize
        // floor(k / 2) by rounding, since `floor` is a library call on baseline x86-64
        let k1 = (kf * 0.5 - 0.25 + ROUND_MAGIC) - ROUND_MAGIC;
        *x = p * pow2(k1) * pow2(kf - k1);
    }
}

/// Sum of rows of a `rows x cols` matrix, accumulated into `out`.
pub(crate) fn add_column_sums(x: &[f64], cols: usize, out: &mut [f64]) {
    for row in x.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if a_t { a[p * m + i] } else { a[i * k + p] };
                    let bv = if b_t { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for a_t in [false, true] {
            for b_t in [false, true] {
                let mut c = vec![f64::NAN; m * n];
                gemm(m, k, n, 1.0, &a, a_t, &b, b_t, 0.0, &mut c);
                let want = naive(m, k, n, &a, a_t, &b, b_t);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strided_sub_block() {
        // rows 1..3, columns 0..2 of a 3x4 matrix times its 2x2 identity block
        let a: Vec<f64> = (0..12).map(f64::from).collect();
        let eye = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![-1.0; 2 * 5];
        gemm_strided(2, 2, 2, 1.0, &a[4..], (4, 1), &eye, (2, 1), 0.0, &mut c, 5);
        assert_eq!(&c[..2], &[4.0, 5.0]);
        assert_eq!(&c[5..7], &[8.0, 9.0]);
        assert_eq!(c[2], -1.0);
    }

    #[test]
    fn vector_exp_matches_std() {
        let mut worst: f64 = 0.0;
        let xs: Vec<f64> = (0..20_001).map(|i| -700.0 + i as f64 * 0.07).collect();
        let mut ys = xs.clone();
        exp_in_place(&mut ys);
        for (x, y) in xs.iter().zip(&ys) {
            let want = x.exp();
            worst = worst.max((y - want).abs() / want);
        }
        assert!(worst < 1e-15, "{worst}");
        let mut edge = [0.0, -1e-300, 1.0, 709.0, -708.0, f64::NEG_INFINITY];
        exp_in_place(&mut edge);
        assert_eq!(edge[0], 1.0);
        assert_eq!(edge[1], 1.0);
        assert!((edge[2] - std::f64::consts::E).abs() < 1e-15);
        assert!(edge[3].is_finite() && edge[4] > 0.0 && edge[5] < 1e-300);
    }

    #[test]
    fn gemm_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, 0.5, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c[0], 10.0 + 0.5 * 11.0);
    }

    #[test]
    fn counter_is_per_thread_and_optional() {
        assert_eq!(stop_instrumentation(), None);
        start_instrumentation();
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &[1.0; 6], false, &[1.0; 6], false, 0.0, &mut c);
        std::thread::spawn(|| {
            let mut c = [0.0; 1];
            gemm(1, 1, 1, 1.0, &[1.0], false, &[1.0], false, 0.0, &mut c);
            assert_eq!(stop_instrumentation(), None);
        })
        .join()
        .unwrap();
        assert_eq!(stop_instrumentation(), Some(24));
        assert!(!instrumentation_enabled());
    }
}
