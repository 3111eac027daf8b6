//! 2-D convolution primitives over NCHW batches.
//!
//! Forward, input-gradient and weight-gradient passes are all expressed as
//! one im2col/col2im gather plus a single matrix product over the whole
//! batch, which keeps the hot path inside the matmul kernel. The transposed
//! convolution is implemented as the exact adjoint of a strided convolution,
//! so its output size is pinned to `(h-1)*stride - 2*pad + k + out_pad`.

use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis};

use crate::nn::NnError;
use crate::scalar::Scalar;

/// Output length of a k-tap convolution along one axis, `None` if the padded
/// input is shorter than the kernel.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn slice4<F: Scalar>(x: &Array4<F>) -> &[F] {
    x.as_slice().expect("batch tensors are standard layout")
}

/// Gather `(cin*k*k, n*oh*ow)` patch columns; out-of-bounds taps read zero.
fn im2col<F: Scalar>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (n, cin, h, w) = x.dim();
    let xs = slice4(x);
    let mut cols = Array2::<F>::zeros((cin * k * k, n * oh * ow));
    for c in 0..cin {
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let mut row_view = cols.row_mut(row);
                let rv = row_view.as_slice_mut().expect("row is contiguous");
                for b in 0..n {
                    let img = &xs[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                    for i in 0..oh {
                        let iy = (i * stride + u) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &img[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut rv[(b * oh + i) * ow..(b * oh + i + 1) * ow];
                        for j in 0..ow {
                            let ix = (j * stride + v) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[j] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add patch columns back onto an `(n, cin, h, w)` image grid;
/// the adjoint of [`im2col`].
fn col2im_add<F: Scalar>(
    cols: &Array2<F>,
    out: &mut Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (n, cin, h, w) = out.dim();
    let os = out.as_slice_mut().expect("standard layout");
    for c in 0..cin {
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let row_view = cols.row(row);
                let rv = row_view.as_slice().expect("row is contiguous");
                for b in 0..n {
                    let img = &mut os[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                    for i in 0..oh {
                        let iy = (i * stride + u) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut img[iy as usize * w..(iy as usize + 1) * w];
                        let src = &rv[(b * oh + i) * ow..(b * oh + i + 1) * ow];
                        for j in 0..ow {
                            let ix = (j * stride + v) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(oc, n*L)` view of an NCHW batch, columns grouped per batch element.
fn to_mat<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let l = h * w;
    let mut mat = Array2::<F>::zeros((c, n * l));
    for b in 0..n {
        let src = x
            .index_axis(Axis(0), b)
            .into_shape((c, l))
            .expect("contiguous");
        mat.slice_mut(s![.., b * l..(b + 1) * l]).assign(&src);
    }
    mat
}

/// Inverse of [`to_mat`].
fn from_mat<F: Scalar>(mat: &Array2<F>, n: usize, c: usize, h: usize, w: usize) -> Array4<F> {
    let l = h * w;
    let mut out = Array4::<F>::zeros((n, c, h, w));
    for b in 0..n {
        let mut dst = out
            .index_axis_mut(Axis(0), b)
            .into_shape((c, l))
            .expect("contiguous");
        dst.assign(&mat.slice(s![.., b * l..(b + 1) * l]));
    }
    out
}

pub(crate) fn conv_forward<F: Scalar>(
    x: &Array4<F>,
    weight: &Array4<F>,
    bias: Option<&Array1<F>>,
    stride: usize,
    pad: usize,
) -> Result<Array4<F>, NnError> {
    let (n, cin, h, w) = x.dim();
    let (oc, wcin, k, _) = weight.dim();
    if cin != wcin {
        return Err(NnError::ChannelMismatch {
            got: cin,
            expected: wcin,
        });
    }
    let oh = conv_out_len(h, k, stride, pad).ok_or(NnError::TooSmall { h, w, k, pad })?;
    let ow = conv_out_len(w, k, stride, pad).ok_or(NnError::TooSmall { h, w, k, pad })?;
    let cols = im2col(x, k, stride, pad, oh, ow);
    let w_mat = weight
        .view()
        .into_shape((oc, cin * k * k))
        .expect("contiguous");
    let y_mat = w_mat.dot(&cols);
    let mut y = from_mat(&y_mat, n, oc, oh, ow);
    if let Some(b) = bias {
        for (mut ch, &bv) in y.axis_iter_mut(Axis(1)).zip(b.iter()) {
            ch.mapv_inplace(|v| v + bv);
        }
    }
    Ok(y)
}

/// Gradient w.r.t. the convolution input.
pub(crate) fn conv_backward_input<F: Scalar>(
    dy: &Array4<F>,
    weight: &Array4<F>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Array4<F> {
    let (n, oc, oh, ow) = dy.dim();
    let (woc, cin, k, _) = weight.dim();
    assert_eq!(oc, woc, "weight/grad channel mismatch");
    let dy_mat = to_mat(dy);
    let w_mat = weight
        .view()
        .into_shape((oc, cin * k * k))
        .expect("contiguous");
    let dcols = w_mat.t().dot(&dy_mat);
    let mut dx = Array4::<F>::zeros((n, cin, in_hw.0, in_hw.1));
    col2im_add(&dcols, &mut dx, k, stride, pad, oh, ow);
    dx
}

/// Accumulate the weight gradient (`+=` into `dw`).
pub(crate) fn conv_backward_weight<F: Scalar>(
    dy: &Array4<F>,
    x: &Array4<F>,
    stride: usize,
    pad: usize,
    k: usize,
    dw: &mut ArrayD<F>,
) {
    let (_, oc, oh, ow) = dy.dim();
    let (_, cin, _, _) = x.dim();
    let cols = im2col(x, k, stride, pad, oh, ow);
    let dy_mat = to_mat(dy);
    let dw_mat = dy_mat.dot(&cols.t());
    let dw_flat = dw.as_slice_mut().expect("standard layout");
    debug_assert_eq!(dw_flat.len(), oc * cin * k * k);
    for (dst, &src) in dw_flat.iter_mut().zip(dw_mat.iter()) {
        *dst += src;
    }
}

/// Accumulate the bias gradient: sum of `dy` over batch and space.
pub(crate) fn bias_grad_add<F: Scalar>(dy: &Array4<F>, db: &mut ArrayD<F>) {
    let db_flat = db.as_slice_mut().expect("standard layout");
    for (c, dst) in db_flat.iter_mut().enumerate() {
        let mut acc = F::zero();
        for lane in dy.axis_iter(Axis(0)) {
            acc = acc + lane.index_axis(Axis(0), c).iter().copied().sum::<F>();
        }
        *dst += acc;
    }
}

/// Plain (optionally strided) convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    /// `(out_ch, in_ch, k, k)`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>, NnError> {
        conv_forward(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }

    /// Returns the input gradient; accumulates parameter gradients into
    /// `grads = [dw, db]` when given.
    pub fn backward(
        &self,
        dy: &Array4<F>,
        x: &Array4<F>,
        grads: Option<&mut [ArrayD<F>]>,
    ) -> Array4<F> {
        if let Some(gs) = grads {
            let (dw, db) = gs.split_at_mut(1);
            conv_backward_weight(dy, x, self.stride, self.pad, self.kernel(), &mut dw[0]);
            bias_grad_add(dy, &mut db[0]);
        }
        let (_, _, h, w) = x.dim();
        conv_backward_input(dy, &self.weight, self.stride, self.pad, (h, w))
    }
}

/// Fractional-stride (transposed) convolution; adjoint of a strided
/// convolution, with output padding fixing the output size to an exact
/// multiple of the input.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F: Scalar> {
    /// `(in_ch, out_ch, k, k)` — the virtual forward convolution's layout.
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h - 1) * self.stride + k + self.out_pad - 2 * self.pad,
            (w - 1) * self.stride + k + self.out_pad - 2 * self.pad,
        )
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>, NnError> {
        let (_, cin, h, w) = x.dim();
        let (wcin, oc, _, _) = self.weight.dim();
        if cin != wcin {
            return Err(NnError::ChannelMismatch {
                got: cin,
                expected: wcin,
            });
        }
        let (oh, ow) = self.out_hw(h, w);
        let mut y = conv_backward_input(x, &self.weight, self.stride, self.pad, (oh, ow));
        for (mut ch, &bv) in y.axis_iter_mut(Axis(1)).zip(self.bias.iter()) {
            ch.mapv_inplace(|v| v + bv);
        }
        let _ = oc;
        Ok(y)
    }

    pub fn backward(
        &self,
        dy: &Array4<F>,
        x: &Array4<F>,
        grads: Option<&mut [ArrayD<F>]>,
    ) -> Array4<F> {
        if let Some(gs) = grads {
            let (dw, db) = gs.split_at_mut(1);
            // Adjoint pairing: d/dW <dy, C^T(x; W)> = conv_backward_weight
            // with the roles of input and output gradient swapped.
            conv_backward_weight(x, dy, self.stride, self.pad, self.kernel(), &mut dw[0]);
            bias_grad_add(dy, &mut db[0]);
        }
        conv_forward(dy, &self.weight, None, self.stride, self.pad)
            .expect("adjoint shapes are consistent by construction")
    }
}
