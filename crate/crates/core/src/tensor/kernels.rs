//! Raw buffer kernels behind the tape operations.

use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the chosen strides, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that the output extent is `ceil(input / stride)`.
    /// Odd totals put the extra element on the trailing side.
    Same,
    Valid,
}

/// Resolved geometry of a 2D cross-correlation along (frequency, time).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// Leading/trailing padding on the frequency axis.
    pub pad_f: (usize, usize),
    /// Leading/trailing padding on the time axis.
    pub pad_t: (usize, usize),
}

fn pad_amount(input: usize, kernel: usize, stride: usize, dilation: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let span = (kernel - 1) * dilation + 1;
            let total = ((out - 1) * stride + span).saturating_sub(input);
            (total / 2, total - total / 2)
        }
    }
}

/// Output extent of a strided, dilated window sweep, or `None` when the
/// kernel does not fit the padded input.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad: (usize, usize),
) -> Option<usize> {
    let padded = input + pad.0 + pad.1;
    let span = (kernel - 1) * dilation + 1;
    if span > padded || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl Conv2dGeometry {
    pub fn resolve(
        input: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        dilation: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Parameter(format!("strides must be >= 1, got {stride:?}")));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::Parameter(format!(
                "dilation must be >= 1, got {dilation:?}"
            )));
        }
        Ok(Conv2dGeometry {
            stride,
            dilation,
            pad_f: pad_amount(input.0, kernel.0, stride.0, dilation.0, padding),
            pad_t: pad_amount(input.1, kernel.1, stride.1, dilation.1, padding),
        })
    }

    pub fn output(&self, input: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
        let f = conv_output_len(input.0, kernel.0, self.stride.0, self.dilation.0, self.pad_f);
        let t = conv_output_len(input.1, kernel.1, self.stride.1, self.dilation.1, self.pad_t);
        match (f, t) {
            (Some(f), Some(t)) => Ok((f, t)),
            _ => Err(Error::Dimension(format!(
                "kernel {kernel:?} exceeds padded input {input:?}"
            ))),
        }
    }
}

/// Extents of one convolution call: input `(n, c_in, h, w)`, kernel
/// `(c_out, c_in, kh, kw)` and output `(ho, wo)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], d: &ConvDims, g: &Conv2dGeometry, cols: &mut [f64]) {
    let plane = d.out_plane();
    for c in 0..d.c_in {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride.0 + i * g.dilation.0) as isize - g.pad_f.0 as isize;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + j * g.dilation.1) as isize - g.pad_t.0 as isize;
                        *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, g: &Conv2dGeometry, dx: &mut [f64]) {
    let plane = d.out_plane();
    for c in 0..d.c_in {
        let xc = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride.0 + i * g.dilation.0) as isize - g.pad_f.0 as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride.1 + j * g.dilation.1) as isize - g.pad_t.0 as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    g: &Conv2dGeometry,
) -> Vec<f64> {
    let plane = d.out_plane();
    let mut out = vec![0.0; d.n * d.c_out * plane];
    let mut cols = vec![0.0; d.patch() * plane];
    for s in 0..d.n {
        let xs = &x[s * d.c_in * d.h * d.w..(s + 1) * d.c_in * d.h * d.w];
        im2col(xs, d, g, &mut cols);
        let os = &mut out[s * d.c_out * plane..(s + 1) * d.c_out * plane];
        gemm(d.c_out, d.patch(), plane, 1.0, kernel, false, &cols, false, 0.0, os);
        if let Some(b) = bias {
            for (co, row) in os.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    grad_out: &[f64],
    x: &[f64],
    kernel: &[f64],
    d: &ConvDims,
    g: &Conv2dGeometry,
    need: (bool, bool, bool),
) -> ConvGrads {
    let plane = d.out_plane();
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    let mut dk = need.1.then(|| vec![0.0; kernel.len()]);
    let mut db = need.2.then(|| vec![0.0; d.c_out]);
    let mut cols = vec![0.0; d.patch() * plane];
    let in_stride = d.c_in * d.h * d.w;
    for s in 0..d.n {
        let gs = &grad_out[s * d.c_out * plane..(s + 1) * d.c_out * plane];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[s * in_stride..(s + 1) * in_stride], d, g, &mut cols);
            gemm(d.c_out, plane, d.patch(), 1.0, gs, false, &cols, true, 1.0, dk);
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in gs.chunks(plane).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(d.patch(), d.c_out, plane, 1.0, kernel, true, gs, false, 0.0, &mut cols);
            col2im(&cols, d, g, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn same_padding_puts_extra_on_trailing_side() {
        assert_eq!(pad_amount(10, 4, 1, 1, Padding::Same), (1, 2));
        assert_eq!(pad_amount(10, 3, 1, 3, Padding::Same), (3, 3));
        assert_eq!(pad_amount(80, 3, 2, 1, Padding::Same), (0, 1));
        assert_eq!(pad_amount(10, 3, 1, 1, Padding::Valid), (0, 0));
    }

    #[test]
    fn output_len_formula() {
        assert_eq!(conv_output_len(8, 3, 1, 1, (0, 0)), Some(6));
        assert_eq!(conv_output_len(80, 3, 2, 1, (0, 1)), Some(40));
        assert_eq!(conv_output_len(2, 3, 1, 1, (0, 0)), None);
    }
}
