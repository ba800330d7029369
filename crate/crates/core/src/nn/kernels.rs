//! Raw ndarray kernels shared by the autodiff tape and the frozen feature
//! backbone. Everything is f64, NCHW, and single-threaded so that repeated
//! runs produce bit-identical results.

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};

#[inline]
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` into a `[C*kh*kw, N*Ho*Wo]` matrix for GEMM-based convolution.
pub fn im2col(
    x: &ArrayView4<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let ho = conv_out_len(h, kernel, stride, pad);
    let wo = conv_out_len(w, kernel, stride, pad);
    let rows = c * kernel * kernel;
    let cols_per_image = ho * wo;
    let mut cols = Array2::<f64>::zeros((rows, n * cols_per_image));
    let x_std = x.as_standard_layout();
    let x_slice = x_std.as_slice().unwrap();
    let cols_slice = cols.as_slice_mut().unwrap();
    let col_width = n * cols_per_image;

    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let row_base = row * col_width;
                for ni in 0..n {
                    let img_base = (ni * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        let out_base = row_base + ni * cols_per_image + oh * wo;
                        if ih < 0 || ih as usize >= h {
                            continue; // stays zero
                        }
                        let in_base = img_base + ih as usize * w;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && (iw as usize) < w {
                                cols_slice[out_base + ow] = x_slice[in_base + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Fold a `[C*kh*kw, N*Ho*Wo]` gradient matrix back onto the input grid,
/// accumulating overlaps. Inverse layout of [`im2col`].
pub fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = conv_out_len(h, kernel, stride, pad);
    let wo = conv_out_len(w, kernel, stride, pad);
    let cols_per_image = ho * wo;
    let col_width = n * cols_per_image;
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    let out_slice = out.as_slice_mut().unwrap();
    let cols_slice = cols.as_slice().expect("cols must be standard layout");

    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let row_base = row * col_width;
                for ni in 0..n {
                    let img_base = (ni * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        let in_base = img_base + ih as usize * w;
                        let out_base = row_base + ni * cols_per_image + oh * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && (iw as usize) < w {
                                out_slice[in_base + iw as usize] += cols_slice[out_base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `x [N,C,H,W] * w [O,C,k,k] + b [O] -> [N,O,Ho,Wo]`.
pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, _c, _h, _w) = x.dim();
    let (o, c_in, kh, _kw) = w.dim();
    let (cols, ho, wo) = im2col(x, kh, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((o, c_in * kh * kh))
        .unwrap()
        .to_owned();
    let out_mat = w_mat.dot(&cols); // [O, N*Ho*Wo]
    let mut out = out_mat
        .into_shape_with_order((o, n, ho, wo))
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned();
    for (mut ch, &bias) in out.axis_iter_mut(Axis(1)).zip(b.iter()) {
        ch += bias;
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. (input, weight, bias).
/// The im2col matrix is recomputed instead of cached to keep tape memory flat.
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &Array4<f64>,
    grad_out: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<f64>>, Option<Array4<f64>>, Array1<f64>) {
    let (n, c, h, w_in) = x.dim();
    let (o, c_in, kh, _) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let g_mat = grad_out
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_shape_with_order((o, n * ho * wo))
        .unwrap()
        .to_owned();

    let db = g_mat.sum_axis(Axis(1));

    let dw = if need_dw {
        let (cols, _, _) = im2col(x, kh, stride, pad);
        let dw_mat = g_mat.dot(&cols.t()); // [O, C*k*k]
        Some(
            dw_mat
                .into_shape_with_order((o, c_in, kh, kh))
                .unwrap()
                .to_owned(),
        )
    } else {
        None
    };

    let dx = if need_dx {
        let w_mat = w
            .view()
            .into_shape_with_order((o, c_in * kh * kh))
            .unwrap()
            .to_owned();
        let dcols = w_mat.t().dot(&g_mat); // [C*k*k, N*Ho*Wo]
        Some(col2im(&dcols, n, c, h, w_in, kh, stride, pad))
    } else {
        None
    };

    (dx, dw, db)
}

/// Max pooling with `-inf` padding. Returns the pooled map and the flat input
/// index of each winner for the backward scatter.
pub fn maxpool_forward(
    x: &ArrayView4<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let ho = conv_out_len(h, kernel, stride, pad);
    let wo = conv_out_len(w, kernel, stride, pad);
    let x_std = x.as_standard_layout();
    let x_slice = x_std.as_slice().unwrap();
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    let out_slice = out.as_slice_mut().unwrap();
    let mut argmax = vec![0u32; n * c * ho * wo];

    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            let out_plane = (ni * c + ci) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ki in 0..kernel {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kj in 0..kernel {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            let idx = plane + ih as usize * w + iw as usize;
                            let v = x_slice[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out_slice[out_plane + oh * wo + ow] = best;
                    argmax[out_plane + oh * wo + ow] = best_idx as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward(
    grad_out: &ArrayView4<f64>,
    argmax: &[u32],
    input_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(input_dim);
    let dx_slice = dx.as_slice_mut().unwrap();
    for (g, &idx) in grad_out.iter().zip(argmax.iter()) {
        dx_slice[idx as usize] += g;
    }
    dx
}

pub fn upsample_nearest2x(x: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[ni, ci, i, j]];
                    out[[ni, ci, 2 * i, 2 * j]] = v;
                    out[[ni, ci, 2 * i, 2 * j + 1]] = v;
                    out[[ni, ci, 2 * i + 1, 2 * j]] = v;
                    out[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward(grad_out: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = grad_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[[ni, ci, i, j]] = grad_out[[ni, ci, 2 * i, 2 * j]]
                        + grad_out[[ni, ci, 2 * i, 2 * j + 1]]
                        + grad_out[[ni, ci, 2 * i + 1, 2 * j]]
                        + grad_out[[ni, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    dx
}

/// Bilinear resize of a `[C,H,W]` plane stack with half-pixel sample centers.
/// Resizing to the current size returns an exact copy, which makes
/// preprocessing idempotent.
pub fn bilinear_resize(x: &ndarray::ArrayView3<f64>, out_h: usize, out_w: usize) -> ndarray::Array3<f64> {
    let (c, h, w) = x.dim();
    if h == out_h && w == out_w {
        return x.to_owned();
    }
    let mut out = ndarray::Array3::<f64>::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ci in 0..c {
                let tl = x[[ci, y0, x0]];
                let tr = x[[ci, y0, x1]];
                let bl = x[[ci, y1, x0]];
                let br = x[[ci, y1, x1]];
                let top = tl + (tr - tl) * tx;
                let bot = bl + (br - bl) * tx;
                out[[ci, oy, ox]] = top + (bot - top) * ty;
            }
        }
    }
    out
}

/// Bilinear resize of a single `[H,W]` map.
pub fn bilinear_resize2(x: &ndarray::ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let stacked = x.insert_axis(ndarray::Axis(0));
    let out = bilinear_resize(&stacked, out_h, out_w);
    out.index_axis(ndarray::Axis(0), 0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn conv_identity_kernel() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        let b = Array1::zeros(1);
        let y = conv2d_forward(&x.view(), &w, &b, 1, 1);
        assert_eq!(y.dim(), (1, 1, 4, 4));
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // Direct nested-loop convolution as the oracle.
        let x = Array4::from_shape_fn((2, 3, 5, 5), |(n, c, i, j)| {
            ((n * 31 + c * 7 + i * 3 + j) % 13) as f64 * 0.17 - 0.5
        });
        let w = Array4::from_shape_fn((4, 3, 3, 3), |(o, c, i, j)| {
            ((o * 5 + c * 11 + i * 2 + j) % 7) as f64 * 0.23 - 0.4
        });
        let b = array![0.1, -0.2, 0.3, 0.0];
        let stride = 2;
        let pad = 1;
        let y = conv2d_forward(&x.view(), &w, &b, stride, pad);
        let (n, o, ho, wo) = y.dim();
        assert_eq!((n, o, ho, wo), (2, 4, 3, 3));
        for ni in 0..n {
            for oi in 0..o {
                for yi in 0..ho {
                    for xi in 0..wo {
                        let mut acc = b[oi];
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (yi * stride + ki) as isize - pad as isize;
                                    let iw = (xi * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && ih < 5 && iw >= 0 && iw < 5 {
                                        acc += x[[ni, ci, ih as usize, iw as usize]]
                                            * w[[oi, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        assert!((y[[ni, oi, yi, xi]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_tracks_argmax() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let (y, argmax) = maxpool_forward(&x.view(), 2, 2, 0);
        assert_eq!(y, array![[[[5.0, 7.0], [13.0, 15.0]]]].into_dyn().into_dimensionality().unwrap());
        assert_eq!(argmax, vec![5, 7, 13, 15]);
        let g = Array4::from_elem((1, 1, 2, 2), 1.0);
        let dx = maxpool_backward(&g.view(), &argmax, (1, 1, 4, 4));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn upsample_round_trip_gradient() {
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, i, j)| (c * 9 + i * 3 + j) as f64);
        let y = upsample_nearest2x(&x.view());
        assert_eq!(y.dim(), (1, 2, 6, 6));
        assert_eq!(y[[0, 1, 5, 5]], x[[0, 1, 2, 2]]);
        let dx = upsample_nearest2x_backward(&y.view());
        // each input cell received its own value 4 times
        assert_eq!(dx[[0, 0, 1, 1]], 4.0 * x[[0, 0, 1, 1]]);
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = Array3::from_shape_fn((3, 7, 7), |(c, i, j)| (c + i + j) as f64 * 0.1);
        let y = bilinear_resize(&x.view(), 7, 7);
        assert_eq!(x, y);
    }

    #[test]
    fn bilinear_constant_preserved() {
        let x = Array3::from_elem((1, 5, 5), 0.42);
        let y = bilinear_resize(&x.view(), 13, 9);
        for v in y.iter() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }
}
