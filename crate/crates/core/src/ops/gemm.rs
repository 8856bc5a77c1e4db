use crate::tensor::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] += a[m×kd] · b[kd×n]`, all row-major.
///
/// Every output element accumulates its `kd` products strictly in index order
/// with separate multiply and add, so results are bitwise equal to a naive
/// triple loop that starts from the initial contents of `c`.
pub(crate) fn gemm_acc<T: Scalar>(m: usize, n: usize, kd: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * kd);
    assert_eq!(b.len(), kd * n);
    assert_eq!(c.len(), m * n);

    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..kd {
                let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let w = a[(i + r) * kd + p];
                    for q in 0..NR {
                        row[q] = row[q] + w * brow[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        if j < n {
            for r in 0..MR {
                row_tail(n, kd, j, &a[(i + r) * kd..(i + r + 1) * kd], b, &mut c[(i + r) * n..(i + r + 1) * n]);
            }
        }
        i += MR;
    }
    for r in i..m {
        row_tail(n, kd, 0, &a[r * kd..(r + 1) * kd], b, &mut c[r * n..(r + 1) * n]);
    }
}

fn row_tail<T: Scalar>(n: usize, kd: usize, from: usize, arow: &[T], b: &[T], crow: &mut [T]) {
    for (p, &w) in arow.iter().enumerate().take(kd) {
        let brow = &b[p * n + from..(p + 1) * n];
        for (cv, &bv) in crow[from..].iter_mut().zip(brow) {
            *cv = *cv + w * bv;
        }
    }
}

pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, kd: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        for i in 0..m {
            for j in 0..n {
                let mut s = c[i * n + j];
                for p in 0..kd {
                    s += a[i * kd + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
    }

    #[test]
    fn bitwise_equal_to_naive_on_ragged_sizes() {
        let mut seed = 17u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for &(m, n, kd) in &[(1, 1, 1), (4, 16, 3), (5, 17, 9), (9, 40, 27), (3, 70, 1)] {
            let a: Vec<f64> = (0..m * kd).map(|_| next()).collect();
            let b: Vec<f64> = (0..kd * n).map(|_| next()).collect();
            let init: Vec<f64> = (0..m * n).map(|_| next()).collect();
            let mut c1 = init.clone();
            let mut c2 = init;
            gemm_acc(m, n, kd, &a, &b, &mut c1);
            naive(m, n, kd, &a, &b, &mut c2);
            assert_eq!(c1, c2, "m={m} n={n} kd={kd}");
        }
    }
}
