//! Spatial graph ops on `(C, H, W)` tensors: convolution, pooling,
//! resampling, and token-layout conversion.

use super::{Graph, Var};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Ix2, Ix3, IxDyn};

impl<F: Scalar> Graph<F> {
    /// 2-D convolution with zero padding and no bias:
    /// `x (C_in, H, W)` ⋆ `w (C_out, C_in, kh, kw)` → `(C_out, H', W')`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d: x must be (C, H, W)");
        assert_eq!(ws.len(), 4, "conv2d: w must be (C_out, C_in, kh, kw)");
        assert_eq!(xs[0], ws[1], "conv2d: channel mismatch");
        let (h, wid) = (xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && wid + 2 * pad >= kw, "conv2d: kernel too big");
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wid + 2 * pad - kw) / stride + 1;

        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let col = im2col(xv, kh, kw, stride, pad, h_out, w_out);
        let w_mat = self
            .value(w)
            .view()
            .into_shape_with_order((c_out, ws[1] * kh * kw))
            .unwrap();
        let out = F::gemm(w_mat.view(), col.view());
        let value = out
            .into_shape_with_order(IxDyn(&[c_out, h_out, w_out]))
            .unwrap();

        self.binary(x, w, value, Box::new(move |g, inputs, _| {
            let g_mat = g
                .view()
                .into_shape_with_order((c_out, h_out * w_out))
                .unwrap();
            let xv = inputs[0].view().into_dimensionality::<Ix3>().unwrap();
            let (c_in, h, wid) = xv.dim();
            let col = im2col(xv, kh, kw, stride, pad, h_out, w_out);
            let gw = F::gemm(g_mat.view(), col.t());
            let w_mat = inputs[1]
                .view()
                .into_shape_with_order((c_out, c_in * kh * kw))
                .unwrap();
            let gcol = F::gemm(w_mat.t(), g_mat.view());
            let gx = col2im(gcol.view(), c_in, h, wid, kh, kw, stride, pad, h_out, w_out);
            vec![
                Some(gx.into_dyn()),
                Some(gw.into_shape_with_order(IxDyn(&[c_out, c_in, kh, kw])).unwrap()),
            ]
        }))
    }

    /// Average-pool to an exact divisor size: disjoint `bh×bw` blocks.
    pub fn avg_pool_to(&mut self, x: Var, h_out: usize, w_out: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "avg_pool_to: x must be (C, H, W)");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(h % h_out == 0 && w % w_out == 0, "avg_pool_to: non-divisor target");
        let (bh, bw) = (h / h_out, w / w_out);
        let inv = F::cast(1.0 / (bh * bw) as f64);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let mut value = Array3::<F>::zeros((c, h_out, w_out));
        for ci in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut s = F::zero();
                    for dy in 0..bh {
                        for dx in 0..bw {
                            s = s + xv[[ci, oy * bh + dy, ox * bw + dx]];
                        }
                    }
                    value[[ci, oy, ox]] = s * inv;
                }
            }
        }
        self.unary(x, value.into_dyn(), Box::new(move |g, _, _| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = Array3::<F>::zeros((c, h, w));
            for ci in 0..c {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let gv = g3[[ci, oy, ox]] * inv;
                        for dy in 0..bh {
                            for dx in 0..bw {
                                gx[[ci, oy * bh + dy, ox * bw + dx]] = gv;
                            }
                        }
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }))
    }

    /// Nearest-replicate upsample to an exact multiple size.
    pub fn upsample_replicate(&mut self, x: Var, h_out: usize, w_out: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "upsample_replicate: x must be (C, H, W)");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(h_out % h == 0 && w_out % w == 0, "upsample_replicate: non-multiple target");
        let (bh, bw) = (h_out / h, w_out / w);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let mut value = Array3::<F>::zeros((c, h_out, w_out));
        for ci in 0..c {
            for y in 0..h_out {
                for xx in 0..w_out {
                    value[[ci, y, xx]] = xv[[ci, y / bh, xx / bw]];
                }
            }
        }
        self.unary(x, value.into_dyn(), Box::new(move |g, _, _| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = Array3::<F>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h_out {
                    for xx in 0..w_out {
                        gx[[ci, y / bh, xx / bw]] += g3[[ci, y, xx]];
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }))
    }

    /// Bilinear resize (half-pixel convention) to an arbitrary size.
    /// Same-size calls are bit-exact identities.
    pub fn resize_bilinear(&mut self, x: Var, h_out: usize, w_out: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "resize_bilinear: x must be (C, H, W)");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ty = bilinear_table::<F>(h, h_out);
        let tx = bilinear_table::<F>(w, w_out);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let mut value = Array3::<F>::zeros((c, h_out, w_out));
        for ci in 0..c {
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    value[[ci, oy, ox]] = xv[[ci, y0, x0]] * wy0 * wx0
                        + xv[[ci, y0, x1]] * wy0 * wx1
                        + xv[[ci, y1, x0]] * wy1 * wx0
                        + xv[[ci, y1, x1]] * wy1 * wx1;
                }
            }
        }
        self.unary(x, value.into_dyn(), Box::new(move |g, _, _| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = Array3::<F>::zeros((c, h, w));
            for ci in 0..c {
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = g3[[ci, oy, ox]];
                        gx[[ci, y0, x0]] += gv * wy0 * wx0;
                        gx[[ci, y0, x1]] += gv * wy0 * wx1;
                        gx[[ci, y1, x0]] += gv * wy1 * wx0;
                        gx[[ci, y1, x1]] += gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }))
    }

    /// Adaptive average pool: windows `[floor(i·H/H'), ceil((i+1)·H/H'))`,
    /// matching the usual adaptive-pooling convention (windows may overlap).
    pub fn adaptive_avg_pool(&mut self, x: Var, h_out: usize, w_out: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "adaptive_avg_pool: x must be (C, H, W)");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let mut value = Array3::<F>::zeros((c, h_out, w_out));
        for ci in 0..c {
            for oy in 0..h_out {
                let (ys, ye) = adaptive_window(oy, h, h_out);
                for ox in 0..w_out {
                    let (xs_, xe) = adaptive_window(ox, w, w_out);
                    let mut s = F::zero();
                    for y in ys..ye {
                        for xx in xs_..xe {
                            s = s + xv[[ci, y, xx]];
                        }
                    }
                    value[[ci, oy, ox]] =
                        s * F::cast(1.0 / ((ye - ys) * (xe - xs_)) as f64);
                }
            }
        }
        self.unary(x, value.into_dyn(), Box::new(move |g, _, _| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = Array3::<F>::zeros((c, h, w));
            for ci in 0..c {
                for oy in 0..h_out {
                    let (ys, ye) = adaptive_window(oy, h, h_out);
                    for ox in 0..w_out {
                        let (xs_, xe) = adaptive_window(ox, w, w_out);
                        let gv = g3[[ci, oy, ox]]
                            * F::cast(1.0 / ((ye - ys) * (xe - xs_)) as f64);
                        for y in ys..ye {
                            for xx in xs_..xe {
                                gx[[ci, y, xx]] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }))
    }

    /// `(C, H, W)` → `(H·W, C)` token layout (row-major spatial order).
    pub fn chw_to_tc(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "chw_to_tc: x must be (C, H, W)");
        let (c, t) = (xs[0], xs[1] * xs[2]);
        let m = self
            .value(x)
            .view()
            .into_shape_with_order((c, t))
            .unwrap();
        let value = m.t().as_standard_layout().to_owned().into_dyn();
        self.unary(x, value, Box::new(move |g, _, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let gx = g2
                .t()
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&[xs[0], xs[1], xs[2]]))
                .unwrap();
            vec![Some(gx)]
        }))
    }

    /// `(H·W, C)` token layout → `(C, H, W)`.
    pub fn tc_to_chw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "tc_to_chw: x must be (T, C)");
        assert_eq!(xs[0], h * w, "tc_to_chw: token count mismatch");
        let c = xs[1];
        let m = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let value = m
            .t()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&[c, h, w]))
            .unwrap();
        self.unary(x, value, Box::new(move |g, _, _| {
            let g2 = g.view().into_shape_with_order((c, h * w)).unwrap();
            let gx = g2.t().as_standard_layout().to_owned().into_dyn();
            vec![Some(gx)]
        }))
    }
}

/// Interpolation stencil per output index: `(i0, i1, w0, w1)`.
fn bilinear_table<F: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, F, F)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 {
                return (0, 0, F::one(), F::zero());
            }
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                .clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            (i0, i1, F::cast(1.0 - w1), F::cast(w1))
        })
        .collect()
}

fn adaptive_window(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

fn im2col<F: Scalar>(
    x: ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Array2<F> {
    let (c_in, h, w) = x.dim();
    let mut col = Array2::<F>::zeros((c_in * kh * kw, h_out * w_out));
    for ci in 0..c_in {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                for oy in 0..h_out {
                    let iy = (oy * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + dj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * w_out + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    gcol: ArrayView2<F>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Array3<F> {
    let mut gx = Array3::<F>::zeros((c_in, h, w));
    for ci in 0..c_in {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                for oy in 0..h_out {
                    let iy = (oy * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + dj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += gcol[[row, oy * w_out + ox]];
                    }
                }
            }
        }
    }
    gx
}
