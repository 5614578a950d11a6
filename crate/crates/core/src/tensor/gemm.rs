use super::Element;

/// `c (m x n) = op(a) * op(b) + beta * c` over contiguous row-major buffers.
///
/// `op(a)` is `m x k`; with `trans_a` the buffer holds `a` as `k x m`.
/// Likewise for `b`. `c` may be a strided view: `ldc` is its row stride.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(ldc >= n, "gemm: ldc smaller than n");
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n, "gemm: output too short");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
