//! im2col-based 2-D convolution with asymmetric zero padding and strides.
//!
//! Kernels may be non-square (the interleaved up-sampling blocks use 3×3,
//! 2×3, 3×2 and 2×2 kernels). Output sizes follow floor semantics:
//! `OH = (H + pt + pb − kh)/sh + 1`.

use ndarray::{Array2, Array4, ArrayView3, ArrayView4, s};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// (top, bottom, left, right) zero padding.
    pub pad: (usize, usize, usize, usize),
}

impl ConvGeometry {
    /// Stride-1 convolution that preserves spatial size; even kernels pad
    /// one short at top/left.
    pub fn same(kernel: (usize, usize)) -> Self {
        let (kh, kw) = kernel;
        Self {
            kernel,
            stride: (1, 1),
            pad: ((kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2),
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            pad: ((kernel - 1) / 2, kernel / 2, (kernel - 1) / 2, kernel / 2),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (pt, pb, pl, pr) = self.pad;
        let oh = (h + pt + pb - kh) / self.stride.0 + 1;
        let ow = (w + pl + pr - kw) / self.stride.1 + 1;
        (oh, ow)
    }
}

/// Unrolls one sample (C,H,W) into (C·kh·kw, OH·OW).
pub fn im2col(x: &ArrayView3<f64>, geo: &ConvGeometry) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let (kh, kw) = geo.kernel;
    let (sh, sw) = geo.stride;
    let (pt, _, pl, _) = geo.pad;
    let (oh, ow) = geo.out_size(h, w);
    let mut col = Array2::zeros((c_in * kh * kw, oh * ow));
    for c in 0..c_in {
        for kr in 0..kh {
            for kc in 0..kw {
                let row = (c * kh + kr) * kw + kc;
                let mut dst = col.row_mut(row);
                for out_r in 0..oh {
                    let in_r = (out_r * sh + kr) as isize - pt as isize;
                    if in_r < 0 || in_r >= h as isize {
                        continue;
                    }
                    let src_row = x.slice(s![c, in_r as usize, ..]);
                    for out_c in 0..ow {
                        let in_c = (out_c * sw + kc) as isize - pl as isize;
                        if in_c < 0 || in_c >= w as isize {
                            continue;
                        }
                        dst[out_r * ow + out_c] = src_row[in_c as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column matrix back onto an input-shaped buffer.
pub fn col2im_acc(
    col: &Array2<f64>,
    geo: &ConvGeometry,
    out: &mut ndarray::ArrayViewMut3<f64>,
) {
    let (c_in, h, w) = out.dim();
    let (kh, kw) = geo.kernel;
    let (sh, sw) = geo.stride;
    let (pt, _, pl, _) = geo.pad;
    let (oh, ow) = geo.out_size(h, w);
    for c in 0..c_in {
        for kr in 0..kh {
            for kc in 0..kw {
                let row = (c * kh + kr) * kw + kc;
                let src = col.row(row);
                for out_r in 0..oh {
                    let in_r = (out_r * sh + kr) as isize - pt as isize;
                    if in_r < 0 || in_r >= h as isize {
                        continue;
                    }
                    for out_c in 0..ow {
                        let in_c = (out_c * sw + kc) as isize - pl as isize;
                        if in_c < 0 || in_c >= w as isize {
                            continue;
                        }
                        out[[c, in_r as usize, in_c as usize]] += src[out_r * ow + out_c];
                    }
                }
            }
        }
    }
}

/// Batched forward convolution. Weight layout is (O, I, kh, kw).
pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: Option<&[f64]>,
    geo: &ConvGeometry,
) -> Array4<f64> {
    let (n, c_in, h, w) = x.dim();
    let (c_out, c_in_w, kh, kw) = weight.dim();
    assert_eq!(c_in, c_in_w, "conv input channels {c_in} vs weight {c_in_w}");
    assert_eq!((kh, kw), geo.kernel);
    let (oh, ow) = geo.out_size(h, w);
    let w2d = weight.to_shape((c_out, c_in * kh * kw)).expect("contiguous weight");
    let mut y = Array4::zeros((n, c_out, oh, ow));
    for i in 0..n {
        let col = im2col(&x.slice(s![i, .., .., ..]), geo);
        let y2d = w2d.dot(&col); // (O, OH·OW)
        let mut dst = y.slice_mut(s![i, .., .., ..]);
        let reshaped = y2d.into_shape_with_order((c_out, oh, ow)).expect("shape");
        dst.assign(&reshaped);
    }
    if let Some(b) = bias {
        for (co, add) in b.iter().enumerate() {
            y.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + add);
        }
    }
    y
}

/// Backward pass: returns grad wrt input (when requested) and accumulates
/// weight/bias gradients.
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    dy: &ArrayView4<f64>,
    geo: &ConvGeometry,
    dweight: &mut Array4<f64>,
    dbias: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Array4<f64>> {
    let (n, c_in, h, w) = x.dim();
    let (c_out, _, kh, kw) = weight.dim();
    let (oh, ow) = geo.out_size(h, w);
    let w2d = weight.to_shape((c_out, c_in * kh * kw)).expect("contiguous weight");
    let mut dw2d = Array2::<f64>::zeros((c_out, c_in * kh * kw));
    let mut dx = if need_dx { Some(Array4::zeros((n, c_in, h, w))) } else { None };
    for i in 0..n {
        let dy2d = dy
            .slice(s![i, .., .., ..])
            .to_shape((c_out, oh * ow))
            .expect("contiguous grad")
            .to_owned();
        let col = im2col(&x.slice(s![i, .., .., ..]), geo);
        dw2d = dw2d + dy2d.dot(&col.t());
        if let Some(dx) = dx.as_mut() {
            let dcol = w2d.t().dot(&dy2d); // (C·kh·kw, OH·OW)
            col2im_acc(&dcol, geo, &mut dx.slice_mut(s![i, .., .., ..]));
        }
    }
    let dw4 = dw2d.into_shape_with_order((c_out, c_in, kh, kw)).expect("shape");
    *dweight += &dw4;
    if let Some(db) = dbias {
        for (co, slot) in db.iter_mut().enumerate() {
            *slot += dy.slice(s![.., co, .., ..]).sum();
        }
    }
    dx
}
