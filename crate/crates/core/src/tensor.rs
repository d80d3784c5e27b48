//! Dense row-major tensors and the convolution kernels the networks are built from.
//!
//! Image tensors are laid out as `[channels, height, width]` with an implicit
//! batch of one. Convolutions lower to GEMM through `im2col`/`col2im`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type usable by the tensor kernels.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `C = alpha * A·B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping `m×k`, `k×n`
    /// and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [C, H, W] tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// `C[m×n] (+)= op(A)·op(B)` on contiguous row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths were checked against the strides above.
    unsafe {
        T::gemm(
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
            n as isize,
            1,
        )
    }
}

/// Sliding-window geometry of a square-kernel convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Unfold `[C, H, W]` into `[C·K·K, Ho·Wo]` with zero padding.
    pub fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let mut cols = vec![T::zero(); self.rows() * self.cols()];
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.height as isize {
                            continue;
                        }
                        let src_row = &plane[ii as usize * self.width..(ii as usize + 1) * self.width];
                        let dst_row = &mut dst[oi * wo..(oi + 1) * wo];
                        for (oj, d) in dst_row.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.width as isize {
                                *d = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add columns back into `[C, H, W]`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], out: &mut [T]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        assert_eq!(cols.len(), self.rows() * ho * wo);
        assert_eq!(out.len(), self.channels * self.height * self.width);
        for c in 0..self.channels {
            let plane =
                &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.height as isize {
                            continue;
                        }
                        let dst_row =
                            &mut plane[ii as usize * self.width..(ii as usize + 1) * self.width];
                        let src_row = &src[oi * wo..(oi + 1) * wo];
                        for (oj, &s) in src_row.iter().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.width as isize {
                                let d = &mut dst_row[jj as usize];
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward 2-D convolution. `weight` is `[Cout, Cin, K, K]`, `bias` is `[Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (c, h, w) = input.chw();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, K, K]");
    assert_eq!(ws[1], c, "conv input channels {c} != weight {}", ws[1]);
    let geom = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: ws[2],
        stride,
        pad,
    };
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let cols = geom.im2col(input.data());
    let cout = ws[0];
    let mut out = vec![T::zero(); cout * ho * wo];
    matmul(weight.data(), false, &cols, false, &mut out, cout, geom.rows(), ho * wo, false);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), ho * wo);
    }
    Tensor::from_vec(&[cout, ho, wo], out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = input.chw();
    let ws = weight.shape().to_vec();
    let geom = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: ws[2],
        stride,
        pad,
    };
    let (cout, ho, wo) = grad_out.chw();
    let hw = ho * wo;
    let cols = geom.im2col(input.data());
    let mut dw = vec![T::zero(); cout * geom.rows()];
    matmul(grad_out.data(), false, &cols, true, &mut dw, cout, hw, geom.rows(), false);
    drop(cols);
    let mut dcols = vec![T::zero(); geom.rows() * hw];
    matmul(weight.data(), true, grad_out.data(), false, &mut dcols, geom.rows(), cout, hw, false);
    let mut dx = vec![T::zero(); c * h * w];
    geom.col2im(&dcols, &mut dx);
    let db = channel_sums(grad_out.data(), cout, hw);
    (
        Tensor::from_vec(&[c, h, w], dx),
        Tensor::from_vec(&ws, dw),
        Tensor::from_vec(&[cout], db),
    )
}

/// Output size of a transposed convolution.
pub fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (size - 1) * stride + kernel + out_pad - 2 * pad
}

fn transpose_geometry(
    cout: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> ConvGeometry {
    let geom = ConvGeometry {
        channels: cout,
        height: conv_transpose_out(h, kernel, stride, pad, out_pad),
        width: conv_transpose_out(w, kernel, stride, pad, out_pad),
        kernel,
        stride,
        pad,
    };
    debug_assert_eq!(geom.out_height(), h);
    debug_assert_eq!(geom.out_width(), w);
    geom
}

/// Transposed 2-D convolution. `weight` is `[Cin, Cout, K, K]`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor<T> {
    let (cin, h, w) = input.chw();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "transposed conv weight must be [Cin, Cout, K, K]");
    assert_eq!(ws[0], cin);
    let cout = ws[1];
    let geom = transpose_geometry(cout, h, w, ws[2], stride, pad, out_pad);
    let rows = geom.rows();
    let mut cols = vec![T::zero(); rows * h * w];
    matmul(weight.data(), true, input.data(), false, &mut cols, rows, cin, h * w, false);
    let mut out = vec![T::zero(); cout * geom.height * geom.width];
    geom.col2im(&cols, &mut out);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), geom.height * geom.width);
    }
    Tensor::from_vec(&[cout, geom.height, geom.width], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cin, h, w) = input.chw();
    let ws = weight.shape().to_vec();
    let cout = ws[1];
    let geom = transpose_geometry(cout, h, w, ws[2], stride, pad, out_pad);
    let rows = geom.rows();
    let dcols = geom.im2col(grad_out.data());
    let mut dx = vec![T::zero(); cin * h * w];
    matmul(weight.data(), false, &dcols, false, &mut dx, cin, rows, h * w, false);
    let mut dw = vec![T::zero(); cin * rows];
    matmul(input.data(), false, &dcols, true, &mut dw, cin, h * w, rows, false);
    let db = channel_sums(grad_out.data(), cout, geom.height * geom.width);
    (
        Tensor::from_vec(&[cin, h, w], dx),
        Tensor::from_vec(&ws, dw),
        Tensor::from_vec(&[cout], db),
    )
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn channel_sums<T: Scalar>(data: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| data[c * plane..(c + 1) * plane].iter().copied().sum())
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

pub fn reflection_pad<T: Scalar>(input: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (c, h, w) = input.chw();
    assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}x{w}");
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let src = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            let si = reflect(i as isize - pad as isize, h);
            let row = &src[(ch * h + si) * w..(ch * h + si + 1) * w];
            for j in 0..wo {
                out.push(row[reflect(j as isize - pad as isize, w)]);
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out)
}

pub fn reflection_pad_backward<T: Scalar>(grad_out: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (c, ho, wo) = grad_out.chw();
    let (h, w) = (ho - 2 * pad, wo - 2 * pad);
    let mut dx = vec![T::zero(); c * h * w];
    let g = grad_out.data();
    for ch in 0..c {
        for i in 0..ho {
            let si = reflect(i as isize - pad as isize, h);
            for j in 0..wo {
                let sj = reflect(j as isize - pad as isize, w);
                let d = &mut dx[(ch * h + si) * w + sj];
                *d = *d + g[(ch * ho + i) * wo + j];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], dx)
}
