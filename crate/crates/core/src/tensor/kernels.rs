//! Raw matrix kernels shared by the forward ops and the backward pass.
//!
//! All three multiply variants stream the output row-major with the inner
//! loop over contiguous slices so the autovectorizer can do its job.

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] = a[m,n] * b[k,n]^T  (dot products of rows)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
}

/// out[k,n] = a[m,k]^T * b[m,n]  (rank-1 accumulation per input row)
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_agree_with_explicit_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [0.5, -1.0, 2.0, 1.5, -0.5, 0.25]; // 3x2
        let mut nn = [0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut nn);

        // a * b == a * (b^T)^T via matmul_nt with b transposed by hand
        let bt = [0.5, 2.0, -0.5, -1.0, 1.5, 0.25]; // 2x3
        let mut nt = [0.0; 4];
        matmul_nt(&a, &bt, 2, 3, 2, &mut nt);
        assert_eq!(nn, nt);

        // (a^T)^T * b via matmul_tn with a transposed by hand
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let mut tn = [0.0; 4];
        matmul_tn(&at, &b, 3, 2, 2, &mut tn);
        assert_eq!(nn, tn);
    }
}
