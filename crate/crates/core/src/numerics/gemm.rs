//! Dense f64 matrix product kernel shared by the forward and backward passes.

/// Operand layout: `Normal` is row-major as stored, `Transposed` reads the
/// stored row-major matrix as its transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

// Below this many multiply-adds the packing overhead of the blocked kernel
// dominates and plain loops are faster.
const SMALL_PRODUCT: usize = 4096;

/// `c (+)= op(a) · op(b)` with `op(a)` of shape m×k and `op(b)` of shape k×n.
///
/// The summation order for an output element depends only on (m, k, n) and
/// never on the values of other rows, so row-disjoint inputs produce
/// bit-identical rows.
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
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
        Layout::Normal => (k, 1),
        Layout::Transposed => (1, m),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n, 1),
        Layout::Transposed => (1, k),
    };
    if m * k * n <= SMALL_PRODUCT {
        if !accumulate {
            c.fill(0.0);
        }
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += av * b[p * rsb + j * csb];
                }
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (checked
    // above in debug builds, guaranteed by every caller), and the strides
    // describe row-major storage of those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
