use super::Tensor;
use crate::error::{Error, Result};

/// Strided view of a row-major buffer as an `rows × cols` matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Logical transpose without copying.
    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            transposed: !self.transposed,
            ..self
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` where `c` is a dense row-major `a.rows × b.cols` buffer.
///
/// Single-threaded, so the reduction order is fixed for a given shape.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.data.len(), a.rows * a.cols, "gemm lhs buffer");
    assert_eq!(b.data.len(), b.rows * b.cols, "gemm rhs buffer");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output buffer");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: all three buffers were checked above to cover the full
    // m×k, k×n and m×n extents addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn as_matrix<'a>(t: &'a Tensor, op: &'static str) -> Result<MatRef<'a>> {
    if t.ndim() != 2 {
        return Err(Error::invalid(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ));
    }
    Ok(MatRef::new(t.data(), t.dim(0), t.dim(1)))
}

fn product(a: MatRef<'_>, b: MatRef<'_>, op: &'static str, shapes: (&[usize], &[usize])) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::shape(op, shapes.0, shapes.1));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    gemm(a, b, 0.0, &mut out);
    Tensor::new(&[a.rows, b.cols], out)
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ma, mb) = (as_matrix(a, "matmul")?, as_matrix(b, "matmul")?);
    product(ma, mb, "matmul", (a.shape(), b.shape()))
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ma, mb) = (as_matrix(a, "matmul_tn")?, as_matrix(b, "matmul_tn")?);
    product(ma.t(), mb, "matmul_tn", (a.shape(), b.shape()))
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ma, mb) = (as_matrix(a, "matmul_nt")?, as_matrix(b, "matmul_nt")?);
    product(ma, mb.t(), "matmul_nt", (a.shape(), b.shape()))
}
