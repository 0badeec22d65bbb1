// Dense kernels. Every output element is reduced in a fixed order that does
// not depend on the number of rows, so batched and unbatched evaluation of the
// same row give bit-identical results.

use super::Element;

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// out[m×n] = a[m×k] · b[k×n]
pub(crate) fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// acc[k×n] += a[m×k]ᵀ · c[m×n]
pub(crate) fn matmul_tn_acc<T: Element>(
    a: &[T],
    c: &[T],
    m: usize,
    k: usize,
    n: usize,
    acc: &mut [T],
) {
    for i in 0..m {
        let cr = &c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], cr, &mut acc[p * n..(p + 1) * n]);
        }
    }
}
