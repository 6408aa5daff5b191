//! Matrix kernels behind the tensor ops.
//!
//! Everything funnels into faer's sequential dgemm, which accumulates each
//! output element over k in a fixed order, so results are bit-reproducible
//! across runs of the same binary.

/// C = alpha * op(A) * op(B) + beta * C with op(A): m x k, op(B): k x n.
/// When a transpose flag is set the corresponding buffer is stored as the
/// untransposed matrix (A: k x m, B: n x k) and read through swapped strides.
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        gemm_raw(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Strided form used by the fused attention ops to address one head's
/// column block without copying. `beta` must be 0.0 (overwrite C) or
/// 1.0 (accumulate into C); the ops never need a scaled C term.
///
/// # Safety
/// Every element reachable through the given pointers and strides for the
/// (m, k, n) iteration space must be in bounds; the C region must not alias
/// A or B.
#[allow(clippy::too_many_arguments)]
pub(crate) unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: *mut f64,
    rsc: isize,
    csc: isize,
) {
    let acc = if beta == 0.0 {
        faer::Accum::Replace
    } else {
        assert!(beta == 1.0, "gemm_raw beta must be 0 or 1, got {}", beta);
        faer::Accum::Add
    };
    let lhs = faer::MatRef::from_raw_parts(a, m, k, rsa, csa);
    let rhs = faer::MatRef::from_raw_parts(b, k, n, rsb, csb);
    let dst = faer::MatMut::from_raw_parts_mut(c, m, n, rsc, csc);
    faer::linalg::matmul::matmul(dst, acc, lhs, rhs, alpha, faer::Par::Seq);
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_computation() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transpose_flags() {
        // A stored 3x2, used as A^T (2x3); B stored 3x2 used directly.
        let a_store = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // rows: [1 4][2 5][3 6]
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(true, false, 2, 3, 2, 1.0, &a_store, &b, 0.0, &mut c);
        // op(A) = [1 2 3; 4 5 6], C = op(A)*B = [4 5; 10 11]
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // B stored 2x3, used as B^T (3x2).
        let a2 = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b_store = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3, op(B) = 3x2
        let mut c2 = [0.0; 4];
        gemm(false, true, 2, 3, 2, 1.0, &a2, &b_store, 0.0, &mut c2);
        // op(B) = [1 4; 2 5; 3 6], C = [14 32; 32 77]
        assert_eq!(c2, [14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [2.0];
        let b = [3.0];
        let mut c = [10.0];
        gemm(false, false, 1, 1, 1, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c, [16.0]);
    }
}
