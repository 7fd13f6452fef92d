//! Plain slice kernels shared by forward and backward passes.

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (k, 1), b, (n, 1), m, k, n)
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    gemm(a, (1, m), b, (n, 1), m, k, n)
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (k, 1), b, (1, k), m, k, n)
}

/// Row-major `[m, n]` product of strided operands; strides are
/// `(row, col)` in elements.
fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n, "gemm operand too short");
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: the assert bounds every strided access of the [m,k] and
    // [k,n] operands, and `out` holds exactly m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

#[inline(always)]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent partial sums so the loop vectorizes
    let n = a.len().min(b.len());
    let (ac, bc) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    let mut acc = [0.0; 4];
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Splits `z = k ln2 + r` with `|r| <= ln2/2` and returns
/// `(2^k, expm1(r))`, `expm1(r)` from its Taylor series to degree 13.
/// Inputs are clamped to `[-708, 709]`. Branch-free so loops vectorize.
#[inline(always)]
#[allow(clippy::excessive_precision)]
fn reduce_exp(z: f64) -> (f64, f64) {
    const MAGIC: f64 = 6755399441055744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.93147180369123816490e-01;
    const LN2_LO: f64 = 1.90821492927058770002e-10;
    let z = z.clamp(-708.0, 709.0);
    let t = z * std::f64::consts::LOG2_E + MAGIC;
    let kf = t - MAGIC;
    let k = t.to_bits().wrapping_sub(MAGIC.to_bits());
    let r = (z - kf * LN2_HI) - kf * LN2_LO;
    let p = 1.0 / 479001600.0 + r * (1.0 / 6227020800.0);
    let p = 1.0 / 39916800.0 + r * p;
    let p = 1.0 / 3628800.0 + r * p;
    let p = 1.0 / 362880.0 + r * p;
    let p = 1.0 / 40320.0 + r * p;
    let p = 1.0 / 5040.0 + r * p;
    let p = 1.0 / 720.0 + r * p;
    let p = 1.0 / 120.0 + r * p;
    let p = 1.0 / 24.0 + r * p;
    let p = 1.0 / 6.0 + r * p;
    let p = 0.5 + r * p;
    let p = 1.0 + r * p;
    (f64::from_bits(k.wrapping_add(1023) << 52), p * r)
}

/// `exp(z) - 1`, accurate to a few ulp: `2^k expm1(r) + (2^k - 1)` never
/// cancels because `k = 0` whenever `|z|` is small.
#[inline(always)]
pub fn expm1(z: f64) -> f64 {
    let (two_k, em1_r) = reduce_exp(z);
    two_k * em1_r + (two_k - 1.0)
}

/// `exp(z)`, accurate to a few ulp; flushes to zero below `-708`.
#[inline(always)]
pub fn exp(z: f64) -> f64 {
    let (two_k, em1_r) = reduce_exp(z);
    let v = two_k * (1.0 + em1_r);
    if z < -708.0 {
        0.0
    } else {
        v
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = exp(-x.abs());
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        exp(x)
    } else {
        exp(x).ln_1p()
    }
}
