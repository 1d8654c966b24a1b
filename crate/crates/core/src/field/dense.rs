//! Row-major dense layer kernels on top of `matrixmultiply`.

/// `y[n x out] = x[n x in] * w[in x out] + b`.
pub(crate) fn forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    y: &mut [f64],
    n: usize,
    inp: usize,
    out: usize,
) {
    assert_eq!(x.len(), n * inp);
    assert_eq!(w.len(), inp * out);
    assert_eq!(b.len(), out);
    assert_eq!(y.len(), n * out);
    for row in y.chunks_exact_mut(out) {
        row.copy_from_slice(b);
    }
    if n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        matrixmultiply::dgemm(
            n,
            inp,
            out,
            1.0,
            x.as_ptr(),
            inp as isize,
            1,
            w.as_ptr(),
            out as isize,
            1,
            1.0,
            y.as_mut_ptr(),
            out as isize,
            1,
        );
    }
}

/// Accumulates `dw += x^T dy`, `db += colsum(dy)` and, when requested,
/// writes `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
    n: usize,
    inp: usize,
    out: usize,
) {
    assert_eq!(x.len(), n * inp);
    assert_eq!(w.len(), inp * out);
    assert_eq!(dy.len(), n * out);
    assert_eq!(dw.len(), inp * out);
    assert_eq!(db.len(), out);
    for row in dy.chunks_exact(out) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    if n == 0 {
        if let Some(dx) = dx {
            dx.fill(0.0);
        }
        return;
    }
    // SAFETY: lengths checked above; x is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            inp,
            n,
            out,
            1.0,
            x.as_ptr(),
            1,
            inp as isize,
            dy.as_ptr(),
            out as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            out as isize,
            1,
        );
    }
    if let Some(dx) = dx {
        assert_eq!(dx.len(), n * inp);
        // SAFETY: as above, w read transposed.
        unsafe {
            matrixmultiply::dgemm(
                n,
                out,
                inp,
                1.0,
                dy.as_ptr(),
                out as isize,
                1,
                w.as_ptr(),
                1,
                out as isize,
                0.0,
                dx.as_mut_ptr(),
                inp as isize,
                1,
            );
        }
    }
}
