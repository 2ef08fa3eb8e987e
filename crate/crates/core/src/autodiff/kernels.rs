//! Dense kernels shared by the forward and backward passes.

/// Operand layout for [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as written, row-major.
    Normal,
    /// The stored row-major matrix is the transpose of the operand.
    Transposed,
}

/// `c (+)= op(a) · op(b)` with `op(a)` of size m×k and `op(b)` of size k×n.
///
/// When `accumulate` is false `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the length assertions above guarantee every strided access of an
    // m×k, k×n and m×n matrix with these strides stays inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `data` (of `shape`) into the axis order `perm`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    // Trailing axes that stay in place move as contiguous blocks.
    let mut rank = shape.len();
    let mut block = 1usize;
    while rank > 0 && perm[rank - 1] == rank - 1 {
        rank -= 1;
        block *= shape[rank];
    }
    if rank == 0 || block == 0 {
        return data.to_vec();
    }
    let in_strides = strides(&shape[..rank]);
    let out_shape: Vec<usize> = perm[..rank].iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm[..rank].iter().map(|&p| in_strides[p] * block).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() / block {
        out.extend_from_slice(&data[offset..offset + block]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        permute(x, &[r, c], &[1, 0])
    }

    #[test]
    fn gemm_layouts_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::Normal, &b, Layout::Normal, &mut c, false);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, Layout::Transposed, &bt, Layout::Transposed, &mut c2, false);
        for ((x, y), z) in c.iter().zip(&c2).zip(&expect) {
            assert!((x - z).abs() < 1e-12 && (y - z).abs() < 1e-12);
        }

        gemm(m, k, n, &a, Layout::Normal, &b, Layout::Normal, &mut c, true);
        for (x, z) in c.iter().zip(&expect) {
            assert!((x - 2.0 * z).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let p = permute(&data, &shape, &perm);
        // element [i,j,k] moves to [k,i,j]
        assert_eq!(p[(3 * 2 + 1) * 3 + 2], data[(3 + 2) * 4 + 3]);
        let back = permute(&p, &[4, 2, 3], &inverse_permutation(&perm));
        assert_eq!(back, data);
    }

    #[test]
    fn permute_with_fixed_trailing_axes() {
        let shape = [2, 3, 4, 5];
        let data: Vec<f64> = (0..120).map(f64::from).collect();
        for perm in [[0, 2, 1, 3], [2, 1, 0, 3], [1, 0, 2, 3], [0, 1, 2, 3], [3, 1, 2, 0]] {
            let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
            let got = permute(&data, &shape, &perm);
            let mut i = 0;
            for a in 0..out_shape[0] {
                for b in 0..out_shape[1] {
                    for c in 0..out_shape[2] {
                        for d in 0..out_shape[3] {
                            let mut src = [0; 4];
                            for (ax, v) in [a, b, c, d].into_iter().enumerate() {
                                src[perm[ax]] = v;
                            }
                            let at = ((src[0] * 3 + src[1]) * 4 + src[2]) * 5 + src[3];
                            assert_eq!(got[i], data[at], "{perm:?}");
                            i += 1;
                        }
                    }
                }
            }
        }
    }
}
