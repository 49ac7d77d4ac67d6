//! 2-D cross-correlation.
//!
//! [`conv2d`] lowers each image to a patch matrix and runs one dense matrix
//! product per batch element. [`conv2d_oracle`] evaluates the same sum with
//! plain nested loops and serves as the reference for the fast path.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, ConvKernel, Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; the kernel stays inside the input.
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`; odd padding puts the
    /// extra row/column at the bottom/right.
    Same,
}

/// Resolved output extent and padding of one convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl WindowGeometry {
    pub fn resolve(
        h: usize,
        w: usize,
        window: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let (kh, kw) = window;
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::InvalidArgument("window must be non-empty".into()));
        }
        let (out_h, pad_top) = resolve_axis(h, kh, sh, padding)?;
        let (out_w, pad_left) = resolve_axis(w, kw, sw, padding)?;
        Ok(Self {
            kh,
            kw,
            sh,
            sw,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input coordinate touched by output `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    #[inline]
    pub(crate) fn src_row(&self, oy: usize, i: usize, h: usize) -> Option<usize> {
        Self::src(oy, i, self.sh, self.pad_top, h)
    }

    #[inline]
    pub(crate) fn src_col(&self, ox: usize, j: usize, w: usize) -> Option<usize> {
        Self::src(ox, j, self.sw, self.pad_left, w)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.sh == 1
            && self.sw == 1
            && self.pad_top == 0
            && self.pad_left == 0
    }
}

fn resolve_axis(len: usize, k: usize, s: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if len < k {
                return Err(shape_err(
                    "window",
                    format!("spatial extent {len} smaller than window {k} with valid padding"),
                ));
            }
            Ok(((len - k) / s + 1, 0))
        }
        Padding::Same => {
            if len == 0 {
                return Err(shape_err("window", "zero spatial extent"));
            }
            let out = len.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(len);
            Ok((out, total / 2))
        }
    }
}

fn check_conv_args<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<()> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.c != ws.c {
        return Err(shape_err(
            "conv2d",
            format!("input has {} channels, kernel expects {}", xs.c, ws.c),
        ));
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(shape_err(
                "conv2d",
                format!("bias length {} for {} output channels", b.len(), ws.n),
            ));
        }
    }
    Ok(())
}

/// Fills `cols` (`c·kh·kw` rows × `out_h·out_w` columns) from one image.
fn im2col<T: Element>(
    image: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &WindowGeometry,
    cols: &mut [T],
) {
    let p = g.out_h * g.out_w;
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((ch * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.out_h {
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src_row(oy, i, h) {
                        None => dst.fill(T::zero()),
                        Some(y) => {
                            let src = &plane[y * w..(y + 1) * w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.src_col(ox, j, w) {
                                    Some(x) => src[x],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto one image.
fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &WindowGeometry,
    image: &mut [T],
) {
    let p = g.out_h * g.out_w;
    for ch in 0..c {
        let plane = &mut image[ch * h * w..(ch + 1) * h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((ch * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.out_h {
                    let Some(y) = g.src_row(oy, i, h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.src_col(ox, j, w) {
                            plane[y * w + x] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution from separate weight and optional bias tensors.
pub fn conv2d_with<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    check_conv_args(x, weight, bias)?;
    let (xs, ws) = (x.shape(), weight.shape());
    let g = WindowGeometry::resolve(xs.h, xs.w, (ws.h, ws.w), stride, padding)?;
    let f = ws.n;
    let ckk = ws.c * ws.h * ws.w;
    let p = g.out_h * g.out_w;
    let out_shape = Shape::new(xs.n, f, g.out_h, g.out_w);
    let mut out = vec![T::zero(); out_shape.len()];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * p]
    };
    let image_len = xs.c * xs.plane();
    for n in 0..xs.n {
        let image = &x.data()[n * image_len..(n + 1) * image_len];
        let dst = &mut out[n * f * p..(n + 1) * f * p];
        if let Some(b) = bias {
            for (fi, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(b.data()[fi]);
            }
        }
        let patches: &[T] = if pointwise {
            image
        } else {
            im2col(image, xs.c, xs.h, xs.w, &g, &mut cols);
            &cols
        };
        gemm(
            f,
            ckk,
            p,
            weight.data(),
            false,
            patches,
            false,
            dst,
            bias.is_some(),
        );
    }
    Tensor::from_vec(out_shape, out)
}

/// Cross-correlation of `x` with `k` plus broadcast bias.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    conv2d_with(x, &k.weight, Some(&k.bias), stride, padding)
}

/// Direct nested-loop evaluation of [`conv2d`].
pub fn conv2d_oracle<T: Element>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    conv2d_oracle_with(x, &k.weight, Some(&k.bias), stride, padding)
}

pub fn conv2d_oracle_with<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    check_conv_args(x, weight, bias)?;
    let (xs, ws) = (x.shape(), weight.shape());
    let g = WindowGeometry::resolve(xs.h, xs.w, (ws.h, ws.w), stride, padding)?;
    let out_shape = Shape::new(xs.n, ws.n, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let data = out.data_mut();
    for n in 0..xs.n {
        for f in 0..ws.n {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = T::zero();
                    for c in 0..ws.c {
                        for i in 0..ws.h {
                            for j in 0..ws.w {
                                let iy = (oy * g.sh + i) as isize - g.pad_top as isize;
                                let ix = (ox * g.sw + j) as isize - g.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, c, iy as usize, ix as usize) * weight.at(f, c, i, j);
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[f];
                    }
                    data[out_shape.offset(n, f, oy, ox)] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv2d_with`] given the upstream gradient `dy`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    let g = WindowGeometry::resolve(xs.h, xs.w, (ws.h, ws.w), stride, padding)?;
    let f = ws.n;
    let ckk = ws.c * ws.h * ws.w;
    let p = g.out_h * g.out_w;
    if dy.shape() != Shape::new(xs.n, f, g.out_h, g.out_w) {
        return Err(shape_err(
            "conv2d_backward",
            format!("upstream gradient {}", dy.shape()),
        ));
    }
    let pointwise = g.is_pointwise();
    let image_len = xs.c * xs.plane();
    let mut dx = vec![T::zero(); xs.len()];
    let mut dw = vec![T::zero(); ws.len()];
    let mut db = vec![T::zero(); f];
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * p]
    };
    let mut dcols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * p]
    };
    for n in 0..xs.n {
        let image = &x.data()[n * image_len..(n + 1) * image_len];
        let dyn_ = &dy.data()[n * f * p..(n + 1) * f * p];
        for (fi, chunk) in dyn_.chunks_exact(p).enumerate() {
            db[fi] += chunk.iter().copied().sum::<T>();
        }
        let dximg = &mut dx[n * image_len..(n + 1) * image_len];
        if pointwise {
            gemm(f, p, ckk, dyn_, false, image, true, &mut dw, true);
            gemm(ckk, f, p, weight.data(), true, dyn_, false, dximg, false);
        } else {
            im2col(image, xs.c, xs.h, xs.w, &g, &mut cols);
            gemm(f, p, ckk, dyn_, false, &cols, true, &mut dw, true);
            gemm(
                ckk,
                f,
                p,
                weight.data(),
                true,
                dyn_,
                false,
                &mut dcols,
                false,
            );
            col2im(&dcols, xs.c, xs.h, xs.w, &g, dximg);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(xs, dx)?,
        weight: Tensor::from_vec(ws, dw)?,
        bias: Tensor::from_vec((1, f, 1, 1), db)?,
    })
}
