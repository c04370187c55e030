//! im2col-based convolution and pooling kernels over raw NCHW buffers.

use super::{dim_err, gemm, Element, MatRef, Result};

/// Output extent of a sliding window, floor semantics.
pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(dim_err("conv2d", "kernel and stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(dim_err(
            "conv2d",
            format!("kernel {k} larger than padded input {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let [batch, cin, h, w] = x else {
            return Err(dim_err("conv2d", format!("expected NCHW input, got {x:?}")));
        };
        Ok(Self {
            batch: *batch,
            cin: *cin,
            h: *h,
            w: *w,
            k,
            stride,
            pad,
            ho: conv_out_dim(*h, k, stride, pad)?,
            wo: conv_out_dim(*w, k, stride, pad)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x` into a `(C·k·k) × (B·Ho·Wo)` row-major matrix.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.col_cols();
    let hw_out = g.ho * g.wo;
    let mut cols = vec![T::ZERO; g.col_rows() * ncols];
    if g.is_pointwise() {
        for b in 0..g.batch {
            for c in 0..g.cin {
                let src = &x[(b * g.cin + c) * hw_out..][..hw_out];
                cols[c * ncols + b * hw_out..][..hw_out].copy_from_slice(src);
            }
        }
        return cols;
    }
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.w..][..g.w];
                        let dst = &mut dst_row[b * hw_out + oh * g.wo..][..g.wo];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column-gradient matrix back onto the input layout (accumulating).
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.col_cols();
    let hw_out = g.ho * g.wo;
    if g.is_pointwise() {
        for b in 0..g.batch {
            for c in 0..g.cin {
                let dst = &mut dx[(b * g.cin + c) * hw_out..][..hw_out];
                let src = &cols[c * ncols + b * hw_out..][..hw_out];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        return;
    }
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut dx[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[b * hw_out + oh * g.wo..][..g.wo];
                        for (ow, s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                plane[ih as usize * g.w + iw as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O × (B·S)]` ⇄ `[B × O × S]`.
pub(crate) fn channel_major_to_batch_major<T: Element>(
    m: &[T],
    batch: usize,
    ch: usize,
    spatial: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; m.len()];
    for o in 0..ch {
        for b in 0..batch {
            out[(b * ch + o) * spatial..][..spatial]
                .copy_from_slice(&m[o * batch * spatial + b * spatial..][..spatial]);
        }
    }
    out
}

pub(crate) fn batch_major_to_channel_major<T: Element>(
    t: &[T],
    batch: usize,
    ch: usize,
    spatial: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; t.len()];
    for b in 0..batch {
        for o in 0..ch {
            out[o * batch * spatial + b * spatial..][..spatial]
                .copy_from_slice(&t[(b * ch + o) * spatial..][..spatial]);
        }
    }
    out
}

/// Cross-correlation of `x` (B×C×H×W) with `w` (O×C×k×k). Returns the output
/// buffer (B×O×Ho×Wo) and the geometry.
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    x_shape: &[usize],
    w: &[T],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, ConvGeom)> {
    let [o, wc, kh, kw] = w_shape else {
        return Err(dim_err("conv2d", format!("weight must be O×C×k×k, got {w_shape:?}")));
    };
    if kh != kw {
        return Err(dim_err("conv2d", "only square kernels are supported"));
    }
    let g = ConvGeom::new(x_shape, *kh, stride, pad)?;
    if *wc != g.cin {
        return Err(dim_err(
            "conv2d",
            format!("weight expects {wc} input channels, input has {}", g.cin),
        ));
    }
    let cols = im2col(x, &g);
    let mut out_cm = vec![T::ZERO; o * g.col_cols()];
    gemm(
        MatRef::new(w, *o, g.col_rows()),
        MatRef::new(&cols, g.col_rows(), g.col_cols()),
        T::ZERO,
        &mut out_cm,
    );
    let out = channel_major_to_batch_major(&out_cm, g.batch, *o, g.ho * g.wo);
    Ok((out, g))
}

/// Gradients of the convolution with respect to input and weight.
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    cout: usize,
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let dy_cm = batch_major_to_channel_major(dy, g.batch, cout, g.ho * g.wo);
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let dw = need_dw.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![T::ZERO; cout * rows];
        gemm(
            MatRef::new(&dy_cm, cout, ncols),
            MatRef::t(&cols, rows, ncols),
            T::ZERO,
            &mut dw,
        );
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::ZERO; rows * ncols];
        gemm(
            MatRef::t(w, cout, rows),
            MatRef::new(&dy_cm, cout, ncols),
            T::ZERO,
            &mut dcols,
        );
        let mut dx = vec![T::ZERO; g.batch * g.cin * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw)
}

/// Max pooling; returns values and the flat argmax index per output element.
pub(crate) fn maxpool_forward<T: Element>(x: &[T], g: &ConvGeom) -> (Vec<T>, Vec<usize>) {
    let n = g.batch * g.cin * g.ho * g.wo;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for plane_idx in 0..g.batch * g.cin {
        let base = plane_idx * g.h * g.w;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut best = None::<(T, usize)>;
                for ki in 0..g.k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * g.w + iw as usize;
                        let v = x[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("pooling window has at least one element");
                out.push(v);
                arg.push(idx);
            }
        }
    }
    (out, arg)
}
