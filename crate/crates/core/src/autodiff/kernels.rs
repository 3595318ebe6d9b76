//! Dense loops behind the graph ops. Row-major throughout.

use super::tensor::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`
pub(crate) fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
}

pub(crate) fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, out, m, k, n);
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (x, y)| acc + *x * *y)
}

pub(crate) fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// Numerically stable in-place softmax of one contiguous slice.
pub(crate) fn softmax_in_place<S: Scalar>(xs: &mut [S]) {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn all_layouts_agree_with_triple_loop() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut got = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut got, m, k, n);
        assert_eq!(got, want);

        let mut got = vec![0.0; m * n];
        matmul_nt_acc(&a, &transpose(&b, k, n), &mut got, m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let mut got = vec![0.0; m * n];
        matmul_tn_acc(&at, &b, &mut got, k, m, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
