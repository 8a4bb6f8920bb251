//! Thin wrappers over `libm` so numerical code reads like std.

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// Euclidean norm of a slice.
#[inline]
pub fn norm(x: &[f64]) -> f64 {
    sqrt(x.iter().map(|v| v * v).sum())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the loop vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`, all row-major.
///
/// Each output element accumulates its `k` products in index order, so the
/// result does not depend on the blocking.
pub fn gemm(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    const R: usize = 4;
    const C: usize = 8;
    let mut i = 0;
    while i + R <= m {
        let mut j = 0;
        while j + C <= n {
            let mut acc = [[0.0f64; C]; R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + C]);
            }
            for p in 0..k {
                let bp: &[f64; C] = b[p * n + j..p * n + j + C].try_into().expect("block");
                for (r, row) in acc.iter_mut().enumerate() {
                    let s = a[(i + r) * k + p];
                    for q in 0..C {
                        row[q] += s * bp[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + C].copy_from_slice(row);
            }
            j += C;
        }
        if j < n {
            for r in i..i + R {
                gemm_row(n, k, j, &a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n]);
            }
        }
        i += R;
    }
    for r in i..m {
        gemm_row(n, k, 0, &a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n]);
    }
}

/// Columns `j0..n` of one output row.
fn gemm_row(n: usize, k: usize, j0: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let s = a[p];
        for j in j0..n {
            c[j] += s * b[p * n + j];
        }
    }
}

/// Row-major transpose of `x[rows, cols]`.
pub fn transpose(rows: usize, cols: usize, x: &[f64]) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}
