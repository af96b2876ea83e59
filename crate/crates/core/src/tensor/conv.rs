//! 2-D cross-correlation over `N×C×H×W` inputs via im2col + GEMM.

use super::linalg::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per chunk of samples.
const COL_BUDGET: usize = 1 << 22;

/// Output spatial size `floor((size + 2·padding − kernel) / stride) + 1`.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let padded = size + 2 * padding;
    if kernel == 0 || padded < kernel {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kernel} does not fit input {size} with padding {padding}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(
        op: &'static str,
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || kernel[2] != kernel[3] || input[1] != kernel[1] {
            return Err(Error::shape(op, input, kernel));
        }
        let k = kernel[2];
        let oh = conv2d_output_size(input[2], k, stride, padding)?;
        let ow = conv2d_output_size(input[3], k, stride, padding)?;
        Ok(Self {
            n: input[0],
            c: input[1],
            h: input[2],
            w: input[3],
            f: kernel[0],
            k,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn output_shape(&self) -> [usize; 4] {
        [self.n, self.f, self.oh, self.ow]
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.patch() * self.positions()).max(1)).clamp(1, self.n.max(1))
    }

    /// Fills `cols` (patch × nb·positions) for samples `start..start+nb`.
    fn im2col(&self, input: &[f64], start: usize, nb: usize, cols: &mut [f64]) {
        let (p, span) = (self.positions(), nb * self.positions());
        let img = self.c * self.h * self.w;
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * span..(row + 1) * span];
                    for s in 0..nb {
                        let src = &input[(start + s) * img + c * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            let out = &mut dst[s * p + oy * self.ow..][..self.ow];
                            if iy < 0 || iy >= self.h as isize {
                                out.fill(0.0);
                                continue;
                            }
                            let line = &src[iy as usize * self.w..][..self.w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                *o = if ix < 0 || ix >= self.w as isize {
                                    0.0
                                } else {
                                    line[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into `grad` (the adjoint of `im2col`).
    fn col2im(&self, cols: &[f64], start: usize, nb: usize, grad: &mut [f64]) {
        let (p, span) = (self.positions(), nb * self.positions());
        let img = self.c * self.h * self.w;
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * span..(row + 1) * span];
                    for s in 0..nb {
                        let dst = &mut grad[(start + s) * img + c * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let line = &mut dst[iy as usize * self.w..][..self.w];
                            let vals = &src[s * p + oy * self.ow..][..self.ow];
                            for (ox, v) in vals.iter().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    line[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Copies grad_out samples `start..start+nb` into `f × nb·positions` layout.
    fn gather_output(&self, grad_out: &[f64], start: usize, nb: usize, buf: &mut [f64]) {
        let p = self.positions();
        let span = nb * p;
        for s in 0..nb {
            for f in 0..self.f {
                let src = &grad_out[((start + s) * self.f + f) * p..][..p];
                buf[f * span + s * p..][..p].copy_from_slice(src);
            }
        }
    }
}

/// Cross-correlation of `input: N×C×H×W` with `weight: F×C×K×K` plus per-filter bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Geometry::new("conv2d", input.shape(), weight.shape(), stride, padding)?;
    if bias.shape() != [g.f] {
        return Err(Error::shape("conv2d bias", weight.shape(), bias.shape()));
    }
    let (p, patch) = (g.positions(), g.patch());
    let mut out = vec![0.0; g.n * g.f * p];
    let chunk = g.chunk();
    let mut cols = vec![0.0; patch * chunk * p];
    let mut res = vec![0.0; g.f * chunk * p];
    let w = MatRef::new(weight.data(), g.f, patch);
    let mut start = 0;
    while start < g.n {
        let nb = chunk.min(g.n - start);
        let span = nb * p;
        g.im2col(input.data(), start, nb, &mut cols[..patch * span]);
        gemm(
            w,
            MatRef::new(&cols[..patch * span], patch, span),
            0.0,
            &mut res[..g.f * span],
        );
        for s in 0..nb {
            for f in 0..g.f {
                let b = bias.data()[f];
                let dst = &mut out[((start + s) * g.f + f) * p..][..p];
                for (d, &v) in dst.iter_mut().zip(&res[f * span + s * p..][..p]) {
                    *d = v + b;
                }
            }
        }
        start += nb;
    }
    Tensor::new(&g.output_shape(), out)
}

/// Transposed cross-correlation of `grad_out` with `backward_weight`.
///
/// With `backward_weight` equal to the forward kernel this is the exact
/// gradient of `conv2d` with respect to its input; any other kernel of the
/// same shape transports the error through that kernel instead.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    backward_weight: &Tensor,
    stride: usize,
    padding: usize,
    input_shape: &[usize],
) -> Result<Tensor> {
    let g = Geometry::new("conv2d_input_grad", input_shape, backward_weight.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::shape("conv2d_input_grad", &g.output_shape(), grad_out.shape()));
    }
    let (p, patch) = (g.positions(), g.patch());
    let mut grad_in = vec![0.0; input_shape.iter().product()];
    let chunk = g.chunk();
    let mut gbuf = vec![0.0; g.f * chunk * p];
    let mut cols = vec![0.0; patch * chunk * p];
    let bt = MatRef::new(backward_weight.data(), g.f, patch).t();
    let mut start = 0;
    while start < g.n {
        let nb = chunk.min(g.n - start);
        let span = nb * p;
        g.gather_output(grad_out.data(), start, nb, &mut gbuf[..g.f * span]);
        gemm(
            bt,
            MatRef::new(&gbuf[..g.f * span], g.f, span),
            0.0,
            &mut cols[..patch * span],
        );
        g.col2im(&cols[..patch * span], start, nb, &mut grad_in);
        start += nb;
    }
    Tensor::new(input_shape, grad_in)
}

/// Gradient of `conv2d` with respect to its kernel.
pub fn conv2d_weight_grad(
    grad_out: &Tensor,
    input: &Tensor,
    stride: usize,
    padding: usize,
    kernel_shape: &[usize],
) -> Result<Tensor> {
    let g = Geometry::new("conv2d_weight_grad", input.shape(), kernel_shape, stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::shape("conv2d_weight_grad", &g.output_shape(), grad_out.shape()));
    }
    let (p, patch) = (g.positions(), g.patch());
    let mut dw = vec![0.0; g.f * patch];
    let chunk = g.chunk();
    let mut gbuf = vec![0.0; g.f * chunk * p];
    let mut cols = vec![0.0; patch * chunk * p];
    let mut start = 0;
    while start < g.n {
        let nb = chunk.min(g.n - start);
        let span = nb * p;
        g.gather_output(grad_out.data(), start, nb, &mut gbuf[..g.f * span]);
        g.im2col(input.data(), start, nb, &mut cols[..patch * span]);
        gemm(
            MatRef::new(&gbuf[..g.f * span], g.f, span),
            MatRef::new(&cols[..patch * span], patch, span).t(),
            if start == 0 { 0.0 } else { 1.0 },
            &mut dw,
        );
        start += nb;
    }
    Tensor::new(kernel_shape, dw)
}

/// Per-filter sum of `grad_out: N×F×H'×W'`.
pub fn conv2d_bias_grad(grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.ndim() != 4 {
        return Err(Error::invalid(
            "conv2d_bias_grad",
            format!("expected N×F×H×W, got {:?}", grad_out.shape()),
        ));
    }
    let (n, f) = (grad_out.dim(0), grad_out.dim(1));
    let p = grad_out.dim(2) * grad_out.dim(3);
    let mut db = vec![0.0; f];
    for s in 0..n {
        for (j, acc) in db.iter_mut().enumerate() {
            *acc += grad_out.data()[(s * f + j) * p..][..p].iter().sum::<f64>();
        }
    }
    Ok(Tensor::from_vec(db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, Rng};

    fn loop_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [n, c, h, wd] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        let [f, _, k, _] = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, f, oh, ow]);
        for s in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[fi];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((fi * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        out.data_mut()[((s * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let x = Rng::new(1).uniform(&[2, 3, 5, 5], -1.0, 1.0).unwrap();
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        for s in 0..2 {
            for f in 0..4 {
                assert!(y.data()[(s * 4 + f) * 25..][..25].iter().all(|&v| v == b.data()[f]));
            }
        }
    }

    #[test]
    fn matches_loop_oracle_with_padding() {
        let mut rng = Rng::new(2);
        let x = rng.uniform(&[1, 2, 4, 4], -1.0, 1.0).unwrap();
        let w = rng.uniform(&[3, 2, 3, 3], -1.0, 1.0).unwrap();
        let b = rng.uniform(&[3], -1.0, 1.0).unwrap();
        let got = conv2d(&x, &w, &b, 1, 1).unwrap();
        let want = loop_conv(&x, &w, &b, 1, 1);
        assert_eq!(got.shape(), want.shape());
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn random_geometries_match_loop_oracle() {
        let mut rng = Rng::new(3);
        for _ in 0..40 {
            let n = 1 + rng.below(3);
            let c = 1 + rng.below(4);
            let f = 1 + rng.below(4);
            let k = 1 + rng.below(3);
            let stride = 1 + rng.below(2);
            let pad = rng.below(2);
            let h = k + rng.below(6);
            let w = k + rng.below(6);
            let x = rng.uniform(&[n, c, h, w], -1.0, 1.0).unwrap();
            let wt = rng.uniform(&[f, c, k, k], -1.0, 1.0).unwrap();
            let b = rng.uniform(&[f], -1.0, 1.0).unwrap();
            let got = conv2d(&x, &wt, &b, stride, pad).unwrap();
            let want = loop_conv(&x, &wt, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &b, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), &b, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2]), 1, 0).is_err());
        let go = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_input_grad(&go, &Tensor::zeros(&[1, 2, 3, 3]), 1, 0, &[1, 2, 4, 4]).is_err());
    }

    /// Loss = <r, conv(x)> so dL/dy = r.
    fn probe(x: &Tensor, w: &Tensor, b: &Tensor, r: &Tensor, s: usize, p: usize) -> f64 {
        dot(&conv2d(x, w, b, s, p).unwrap(), r).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let mut rng = Rng::new(4);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let x = rng.uniform(&[2, 2, 5, 5], -1.0, 1.0).unwrap();
            let w = rng.uniform(&[3, 2, 3, 3], -1.0, 1.0).unwrap();
            let b = rng.uniform(&[3], -1.0, 1.0).unwrap();
            let r = rng.uniform(conv2d(&x, &w, &b, stride, pad).unwrap().shape(), -1.0, 1.0).unwrap();
            let grad = conv2d_input_grad(&r, &w, stride, pad, x.shape()).unwrap();
            let h = 1e-5;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (probe(&xp, &w, &b, &r, stride, pad) - probe(&xm, &w, &b, &r, stride, pad)) / (2.0 * h);
                assert!(rel_err(fd, grad.data()[i]) <= 1e-6, "{fd} vs {}", grad.data()[i]);
            }
        }
    }

    #[test]
    fn weight_grad_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let x = rng.uniform(&[2, 2, 5, 5], -1.0, 1.0).unwrap();
            let w = rng.uniform(&[3, 2, 3, 3], -1.0, 1.0).unwrap();
            let b = rng.uniform(&[3], -1.0, 1.0).unwrap();
            let r = rng.uniform(conv2d(&x, &w, &b, stride, pad).unwrap().shape(), -1.0, 1.0).unwrap();
            let grad = conv2d_weight_grad(&r, &x, stride, pad, w.shape()).unwrap();
            let h = 1e-5;
            for i in 0..w.len() {
                let mut wp = w.clone();
                wp.data_mut()[i] += h;
                let mut wm = w.clone();
                wm.data_mut()[i] -= h;
                let fd = (probe(&x, &wp, &b, &r, stride, pad) - probe(&x, &wm, &b, &r, stride, pad)) / (2.0 * h);
                assert!(rel_err(fd, grad.data()[i]) <= 1e-6);
            }
            let db = conv2d_bias_grad(&r).unwrap();
            for f in 0..3 {
                let mut bp = b.clone();
                bp.data_mut()[f] += h;
                let mut bm = b.clone();
                bm.data_mut()[f] -= h;
                let fd = (probe(&x, &w, &bp, &r, stride, pad) - probe(&x, &w, &bm, &r, stride, pad)) / (2.0 * h);
                assert!(rel_err(fd, db.data()[f]) <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = Rng::new(6).uniform(&[1, 2, 4, 4], -1.0, 1.0).unwrap();
        let w = Rng::new(7).uniform(&[3, 2, 3, 3], -1.0, 1.0).unwrap();
        let go = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(conv2d_input_grad(&go, &w, 1, 0, x.shape()).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(conv2d_weight_grad(&go, &x, 1, 0, w.shape()).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_grad_is_linear_in_kernel() {
        let mut rng = Rng::new(8);
        let w = rng.uniform(&[3, 2, 3, 3], -1.0, 1.0).unwrap();
        let go = rng.uniform(&[2, 3, 3, 3], -1.0, 1.0).unwrap();
        let g1 = conv2d_input_grad(&go, &w, 1, 0, &[2, 2, 5, 5]).unwrap();
        let g2 = conv2d_input_grad(&go, &w.scale(2.0), 1, 0, &[2, 2, 5, 5]).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn single_pixel_grad_out_recovers_patch() {
        let x = Rng::new(9).uniform(&[1, 2, 5, 5], -1.0, 1.0).unwrap();
        let mut go = Tensor::zeros(&[1, 1, 3, 3]);
        // output pixel (1, 2) of the only filter
        go.data_mut()[3 + 2] = 1.0;
        let dw = conv2d_weight_grad(&go, &x, 1, 0, &[1, 2, 3, 3]).unwrap();
        for c in 0..2 {
            for ki in 0..3 {
                for kj in 0..3 {
                    let patch = x.data()[(c * 5 + 1 + ki) * 5 + 2 + kj];
                    assert_eq!(dw.data()[(c * 3 + ki) * 3 + kj], patch);
                }
            }
        }
    }
}
