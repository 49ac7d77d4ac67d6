use crate::error::{shape_err, Result};
use crate::ops::conv::{Padding, WindowGeometry};
use crate::tensor::{Element, Shape, Tensor};

/// Window and stride of the overlapped max pooling in transition blocks.
pub const TRANSITION_POOL_WINDOW: (usize, usize) = (3, 3);
pub const TRANSITION_POOL_STRIDE: (usize, usize) = (2, 2);

/// Valid (unpadded) max pooling. Also returns, for each output element, the
/// flat input offset it was taken from; ties resolve to the first element in
/// row-major window order.
pub fn max_pool_with_argmax<T: Element>(
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let g = WindowGeometry::resolve(s.h, s.w, window, stride, Padding::Valid).map_err(|_| {
        shape_err(
            "max_pool",
            format!("input {s} smaller than window {window:?}"),
        )
    })?;
    let out_shape = Shape::new(s.n, s.c, g.out_h, g.out_w);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.offset(n, c, 0, 0);
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut best = base + (oy * g.sh) * s.w + ox * g.sw;
                    for i in 0..g.kh {
                        let row = base + (oy * g.sh + i) * s.w + ox * g.sw;
                        for j in 0..g.kw {
                            if data[row + j] > data[best] {
                                best = row + j;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

pub fn max_pool<T: Element>(
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    max_pool_with_argmax(x, window, stride).map(|(t, _)| t)
}

pub(crate) fn max_pool_backward<T: Element>(
    input_shape: Shape,
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(dy.data()) {
        d[src] += g;
    }
    Ok(dx)
}

/// Mean pooling. Padded cells are excluded from each window's divisor.
pub fn avg_pool<T: Element>(
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let g = WindowGeometry::resolve(s.h, s.w, window, stride, padding)?;
    let out_shape = Shape::new(s.n, s.c, g.out_h, g.out_w);
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = T::zero();
                    let mut count = 0usize;
                    for i in 0..g.kh {
                        let Some(y) = g.src_row(oy, i, s.h) else {
                            continue;
                        };
                        for j in 0..g.kw {
                            if let Some(xx) = g.src_col(ox, j, s.w) {
                                acc += x.at(n, c, y, xx);
                                count += 1;
                            }
                        }
                    }
                    out.push(acc / T::from_f64(count as f64));
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn avg_pool_backward<T: Element>(
    input_shape: Shape,
    window: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = input_shape;
    let g = WindowGeometry::resolve(s.h, s.w, window, stride, padding)?;
    let mut dx = Tensor::zeros(s);
    let d = dx.data_mut();
    let mut taps = Vec::with_capacity(g.kh * g.kw);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    taps.clear();
                    for i in 0..g.kh {
                        let Some(y) = g.src_row(oy, i, s.h) else {
                            continue;
                        };
                        for j in 0..g.kw {
                            if let Some(xx) = g.src_col(ox, j, s.w) {
                                taps.push(s.offset(n, c, y, xx));
                            }
                        }
                    }
                    let share = dy.at(n, c, oy, ox) / T::from_f64(taps.len() as f64);
                    for &t in &taps {
                        d[t] += share;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over each `(h, w)` plane, giving shape `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let denom = T::from_f64(plane as f64);
    let data = x
        .data()
        .chunks_exact(plane.max(1))
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::from_vec((s.n, s.c, 1, 1), data).expect("one value per plane")
}

pub(crate) fn global_avg_pool_backward<T: Element>(
    input_shape: Shape,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let plane = input_shape.plane();
    let denom = T::from_f64(plane as f64);
    let mut data = Vec::with_capacity(input_shape.len());
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g / denom, plane));
    }
    Tensor::from_vec(input_shape, data).expect("plane broadcast")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: (usize, usize, usize, usize)) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn max_pool_ramp_single_window() {
        let y = max_pool(&ramp((1, 1, 4, 4)), (3, 3), (2, 2)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn max_pool_output_extent() {
        let y = max_pool(&ramp((1, 1, 8, 8)), (3, 3), (2, 2)).unwrap();
        assert_eq!((y.shape().h, y.shape().w), (3, 3));
        let y = max_pool(&Tensor::<f64>::zeros((1, 1, 32, 32)), (3, 3), (2, 2)).unwrap();
        assert_eq!(y.shape().h, 15);
        let y = max_pool(&Tensor::<f64>::zeros((1, 1, 15, 15)), (3, 3), (2, 2)).unwrap();
        assert_eq!(y.shape().h, 7);
    }

    #[test]
    fn constant_inputs_stay_constant() {
        let x = Tensor::<f64>::full((2, 3, 7, 7), 0.3);
        let m = max_pool(&x, (3, 3), (2, 2)).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.3));
        let a = avg_pool(&x, (3, 3), (1, 1), Padding::Same).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn max_pool_rejects_small_input() {
        assert!(max_pool(&ramp((1, 1, 2, 5)), (3, 3), (2, 2)).is_err());
    }

    #[test]
    fn avg_pool_center_and_corner() {
        let y = avg_pool(&ramp((1, 1, 3, 3)), (3, 3), (1, 1), Padding::Same).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 4.0);
        // corner window covers {0,1,3,4}
        assert_eq!(y.at(0, 0, 0, 0), 2.0);
    }

    #[test]
    fn global_pool() {
        let y = global_avg_pool(&ramp((1, 1, 4, 4)));
        assert_eq!(y.data(), &[7.5]);
        let y = global_avg_pool(&Tensor::<f64>::full((2, 3, 8, 8), -2.0));
        assert_eq!(y.shape(), Shape::new(2, 3, 1, 1));
        assert!(y.data().iter().all(|&v| v == -2.0));
    }
}
