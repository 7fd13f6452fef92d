//! Reference implementations shared by the integration tests. Each one is
//! written from the definition and shares no code with the library.

#![allow(dead_code)]

use ndarray::Array2;
use ndarray_linalg::{Eig, Inverse};
use num_complex::Complex64;
use pcdiff::autodiff::Tensor;
use pcdiff::geometry::Point;

pub fn sq(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Double-loop chamfer distance (sum of both directed mean squared NN distances).
pub fn chamfer_oracle(x: &[Point], y: &[Point]) -> f64 {
    let mut fwd = 0.0;
    for p in x {
        let mut best = f64::INFINITY;
        for q in y {
            best = best.min(sq(p, q));
        }
        fwd += best;
    }
    let mut bwd = 0.0;
    for q in y {
        let mut best = f64::INFINITY;
        for p in x {
            best = best.min(sq(q, p));
        }
        bwd += best;
    }
    fwd / x.len() as f64 + bwd / y.len() as f64
}

/// Every permutation of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            go(k - 1, a, out);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    go(n, &mut a, &mut out);
    out
}

/// EMD by enumerating all `n!` bijections.
pub fn emd_brute(x: &[Point], y: &[Point]) -> f64 {
    let n = x.len();
    permutations(n)
        .iter()
        .map(|p| (0..n).map(|i| sq(&x[i], &y[p[i]]).sqrt()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / n as f64
}

/// Leave-one-out 1-NN accuracy over the pooled set, generated first, ties
/// to the lower pooled index.
pub fn one_nna_reference(gen: &[Vec<Point>], refs: &[Vec<Point>], dist: impl Fn(&[Point], &[Point]) -> f64) -> f64 {
    let pooled: Vec<(&Vec<Point>, bool)> = gen.iter().map(|c| (c, true)).chain(refs.iter().map(|c| (c, false))).collect();
    let mut correct = 0;
    for (i, (a, is_gen)) in pooled.iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, (b, _)) in pooled.iter().enumerate() {
            if i != j {
                let d = dist(a, b);
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        if pooled[best.1].1 == *is_gen {
            correct += 1;
        }
    }
    100.0 * correct as f64 / pooled.len() as f64
}

/// Fraction (percent) of references that are someone's nearest generated match.
pub fn coverage_reference(gen: &[Vec<Point>], refs: &[Vec<Point>], dist: impl Fn(&[Point], &[Point]) -> f64) -> f64 {
    let mut hit = vec![false; refs.len()];
    for g in gen {
        let mut best = (f64::INFINITY, 0);
        for (j, r) in refs.iter().enumerate() {
            let d = dist(g, r);
            if d < best.0 {
                best = (d, j);
            }
        }
        hit[best.1] = true;
    }
    100.0 * hit.iter().filter(|&&h| h).count() as f64 / refs.len() as f64
}

pub fn random_cloud<R: rand::Rng>(n: usize, r: &mut R) -> Vec<Point> {
    (0..n).map(|_| [r.random(), r.random(), r.random()]).collect()
}

/// Time-invariant scan written as `y_t = Σ_k K_k x_{t-k}` with
/// `K_k = Σ_n C_n exp(Δa_n)^k B_n (exp(Δa_n) - 1) / a_n`.
pub fn convolution_oracle(x: &Tensor, delta: &[f64], a: &Tensor, b: &[f64], c: &[f64]) -> Vec<f64> {
    let (len, ch) = (x.rows(), x.cols());
    let st = b.len();
    let mut y = vec![0.0; len * ch];
    for e in 0..ch {
        let kernel: Vec<f64> = (0..len)
            .map(|k| {
                (0..st)
                    .map(|n| {
                        let an = a.at2(e, n);
                        let abar = (delta[e] * an).exp();
                        c[n] * abar.powi(k as i32) * b[n] * (abar - 1.0) / an
                    })
                    .sum()
            })
            .collect();
        for t in 0..len {
            y[t * ch + e] = (0..=t).map(|k| kernel[k] * x.at2(t - k, e)).sum();
        }
    }
    y
}

/// `(I - A_w) s` through `V (I - Λ) V^-1 s` with a general eigensolver.
/// Returns `None` when the eigenvector basis is too ill-conditioned for the
/// identity to be checked (k-NN adjacencies can be defective).
pub fn spectral_oracle(aw: &[f64], n: usize, signal: &Tensor) -> Option<Vec<f64>> {
    let a = Array2::from_shape_vec((n, n), aw.to_vec()).unwrap();
    let (lambda, v) = a.eig().unwrap();
    let vinv = v.inv().ok()?;
    let fro = |m: &Array2<Complex64>| m.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if fro(&v) * fro(&vinv) > 1e6 {
        return None;
    }
    let d = signal.cols();
    let s = Array2::from_shape_fn((n, d), |(i, c)| Complex64::new(signal.at2(i, c), 0.0));
    let mut coeff = vinv.dot(&s);
    for (i, mut row) in coeff.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|x| x * (Complex64::new(1.0, 0.0) - lambda[i]));
    }
    let out = v.dot(&coeff);
    Some(out.iter().map(|c| c.re).collect())
}

pub fn dense_oracle(aw: &[f64], n: usize, signal: &Tensor) -> Vec<f64> {
    let d = signal.cols();
    let mut y = signal.data().to_vec();
    for i in 0..n {
        for j in 0..n {
            for c in 0..d {
                y[i * d + c] -= aw[i * n + j] * signal.at2(j, c);
            }
        }
    }
    y
}

