//! Dense NCHW `f32` tensors and the convolution kernels behind the graph.

use crate::error::{ensure, Result};
use crate::plane::Plane;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: [1, 1, 1, 1], data: vec![value] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {shape:?}",
            data.len()
        );
        Ok(Self { shape, data })
    }

    /// Stacks single-channel planes of equal shape into an `N×1×H×W` batch.
    pub fn from_planes(planes: &[&Plane<f32>]) -> Result<Self> {
        ensure!(!planes.is_empty(), "cannot batch zero planes");
        let (h, w) = planes[0].shape();
        ensure!(planes.iter().all(|p| p.shape() == (h, w)), "batched planes differ in shape");
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            data.extend_from_slice(p.as_slice());
        }
        Ok(Self { shape: [planes.len(), 1, h, w], data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch entry.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Channel `c` of batch entry `n` as a plane.
    pub fn plane(&self, n: usize, c: usize) -> Plane<f32> {
        let (h, w) = (self.shape[2], self.shape[3]);
        let start = (n * self.shape[1] + c) * h * w;
        Plane::new(h, w, self.data[start..start + h * w].to_vec()).expect("non-empty plane")
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// ---------------------------------------------------------------------------
// GEMM via matrixmultiply; strides let transposed operands be read in place.

pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols as isize, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a·b + beta * c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(alpha: f32, a: &MatRef, b: &MatRef, beta: f32, c: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size mismatch");
    let span = |m: &MatRef| {
        if m.rows == 0 || m.cols == 0 {
            0
        } else {
            (m.rows as isize - 1) * m.row_stride + (m.cols as isize - 1) * m.col_stride + 1
        }
    };
    assert!(span(a) as usize <= a.data.len() && span(b) as usize <= b.data.len(), "gemm operand out of bounds");
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self { cin, h, w, k, stride, pad, oh, ow }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.ow && (lo * self.stride + kx) < self.pad {
            lo += 1;
        }
        let mut hi = self.ow;
        while hi > lo && ((hi - 1) * self.stride + kx) >= self.w + self.pad {
            hi -= 1;
        }
        (lo, hi)
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let ncol = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let ncol = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

/// Convolution of an NCHW batch with an `[cout, cin, k, k]` kernel.
pub(crate) fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, k, _] = weight.shape();
    assert_eq!(cin, wcin, "conv input channels {cin} != kernel channels {wcin}");
    let g = ConvGeom::new(cin, h, w, k, stride, pad);
    let mut out = Tensor::zeros([n, cout, g.oh, g.ow]);
    let wmat = MatRef::new(weight.data(), cout, g.col_rows());
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.col_rows() * g.col_cols()] };
    let out_len = cout * g.col_cols();
    for b in 0..n {
        let xs = x.sample(b);
        let colref = if g.is_pointwise() {
            MatRef::new(xs, g.col_rows(), g.col_cols())
        } else {
            im2col(xs, &g, &mut cols);
            MatRef::new(&cols, g.col_rows(), g.col_cols())
        };
        let dst = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        gemm(1.0, &wmat, &colref, 0.0, dst);
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(g.col_cols()).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates convolution gradients. `grad_x` is skipped when `None`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    mut grad_x: Option<&mut Tensor>,
    grad_w: Option<&mut Tensor>,
    grad_b: Option<&mut Tensor>,
) {
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let g = ConvGeom::new(cin, h, w, k, stride, pad);
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let out_len = cout * ncol;
    if let Some(gb) = grad_b {
        for b in 0..n {
            let go = &grad_out.data()[b * out_len..(b + 1) * out_len];
            for (co, chunk) in go.chunks(ncol).enumerate() {
                gb.data_mut()[co] += chunk.iter().sum::<f32>();
            }
        }
    }
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * ncol }];
    let mut dcols = vec![0.0; rows * ncol];
    let mut grad_w = grad_w;
    for b in 0..n {
        let go = MatRef::new(&grad_out.data()[b * out_len..(b + 1) * out_len], cout, ncol);
        if let Some(gw) = grad_w.as_deref_mut() {
            let colref = if g.is_pointwise() {
                MatRef::new(x.sample(b), rows, ncol)
            } else {
                im2col(x.sample(b), &g, &mut cols);
                MatRef::new(&cols, rows, ncol)
            };
            gemm(1.0, &go, &colref.t(), 1.0, gw.data_mut());
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            let sample_len = cin * h * w;
            let dst = &mut gx.data_mut()[b * sample_len..(b + 1) * sample_len];
            if g.is_pointwise() {
                gemm(1.0, &MatRef::new(weight.data(), cout, rows).t(), &go, 1.0, dst);
            } else {
                gemm(1.0, &MatRef::new(weight.data(), cout, rows).t(), &go, 0.0, &mut dcols);
                col2im(&dcols, &g, dst);
            }
        }
    }
}
