//! Elementwise, reduction, linear-algebra and token-level graph ops.

use super::{Graph, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

impl<F: Scalar> Graph<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Box::new(|g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Box::new(|g, _, _| {
            vec![Some(g.clone()), Some(-g.clone())]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.binary(a, b, value, Box::new(|g, inputs, _| {
            vec![Some(g * inputs[1]), Some(g * inputs[0])]
        }))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -self.value(a).clone();
        self.unary(a, value, Box::new(|g, _, _| vec![Some(-g.clone())]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::cast(c);
        let value = self.value(a).mapv(|x| x * c);
        self.unary(a, value, Box::new(move |g, _, _| vec![Some(g.mapv(|x| x * c))]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = F::cast(c);
        let value = self.value(a).mapv(|x| x + c);
        self.unary(a, value, Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// Elementwise max(x, c). Gradient passes only where x > c.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = F::cast(c);
        let value = self.value(a).mapv(|x| x.max(c));
        self.unary(a, value, Box::new(move |g, inputs, _| {
            let mut out = g.clone();
            out.zip_mut_with(inputs[0], |gv, &x| {
                if x <= c {
                    *gv = F::zero();
                }
            });
            vec![Some(out)]
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(F::zero()));
        self.unary(a, value, Box::new(|g, inputs, _| {
            let mut out = g.clone();
            out.zip_mut_with(inputs[0], |gv, &x| {
                if x <= F::zero() {
                    *gv = F::zero();
                }
            });
            vec![Some(out)]
        }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_scalar);
        self.unary(a, value, Box::new(|g, _, out| {
            let mut gi = g.clone();
            gi.zip_mut_with(out, |gv, &y| *gv = *gv * y * (F::one() - y));
            vec![Some(gi)]
        }))
    }

    /// x * sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid_scalar(x));
        self.unary(a, value, Box::new(|g, inputs, _| {
            let mut gi = g.clone();
            gi.zip_mut_with(inputs[0], |gv, &x| {
                let s = sigmoid_scalar(x);
                *gv = *gv * (s + x * s * (F::one() - s));
            });
            vec![Some(gi)]
        }))
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln());
        self.unary(a, value, Box::new(|g, inputs, _| {
            let mut gi = g.clone();
            gi.zip_mut_with(inputs[0], |gv, &x| *gv = *gv / x);
            vec![Some(gi)]
        }))
    }

    /// Add a 1-D bias along `axis` of `x`, broadcasting over all other axes.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        assert_eq!(bs.len(), 1, "add_bias: bias must be 1-D");
        assert_eq!(bs[0], xs[axis], "add_bias: bias length mismatch");
        let b = self.value(bias).clone().into_dimensionality::<Ix1>().unwrap();
        let mut value = self.value(x).clone();
        for (i, mut lane) in value.axis_iter_mut(Axis(axis)).enumerate() {
            lane.mapv_inplace(|v| v + b[i]);
        }
        self.binary(x, bias, value, Box::new(move |g, _, _| {
            let n = g.shape()[axis];
            let mut gb = ArrayD::zeros(IxDyn(&[n]));
            for (i, lane) in g.axis_iter(Axis(axis)).enumerate() {
                gb[[i]] = lane.iter().copied().sum::<F>();
            }
            vec![Some(g.clone()), Some(gb)]
        }))
    }

    /// Multiply a tensor by a 1-element tensor `s` (learned scalar gates).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), &[1], "mul_scalar_var: s must be 1-element");
        let sv = self.value(s)[IxDyn(&[0])];
        let value = self.value(x).mapv(|v| v * sv);
        self.binary(x, s, value, Box::new(move |g, inputs, _| {
            let gx = g.mapv(|v| v * sv);
            let dot: F = g
                .iter()
                .zip(inputs[0].iter())
                .map(|(&gv, &xv)| gv * xv)
                .sum();
            let gs = ArrayD::from_elem(IxDyn(&[1]), dot);
            vec![Some(gx), Some(gs)]
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(a).len(), "reshape: element count mismatch");
        let in_shape = self.shape(a).to_vec();
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("contiguous reshape");
        self.unary(a, value, Box::new(move |g, _, _| {
            let gg = g
                .clone()
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&in_shape))
                .expect("contiguous reshape");
            vec![Some(gg)]
        }))
    }

    /// 2-D transpose.
    pub fn transpose2(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2, "transpose2: expects 2-D");
        let value = self.value(a).t().as_standard_layout().to_owned();
        self.unary(a, value, Box::new(|g, _, _| {
            vec![Some(g.t().as_standard_layout().to_owned())]
        }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis]).collect();
        let needs = parts.iter().any(|p| self.needs_grad(*p));
        self.push(
            value,
            parts.to_vec(),
            needs,
            needs.then_some(Box::new(move |g: &ArrayD<F>, _: &[&ArrayD<F>], _: &ArrayD<F>| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &sz in &sizes {
                    let part = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz))
                        .to_owned();
                    out.push(Some(part));
                    start += sz;
                }
                out
            }) as super::BackFn<F>),
        )
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let full = self.shape(a).to_vec();
        assert!(end <= full[axis] && start < end, "slice_axis: bad range");
        let value = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        self.unary(a, value, Box::new(move |g, inputs, _| {
            let mut gp = ArrayD::zeros(inputs[0].raw_dim());
            gp.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                .assign(g);
            vec![Some(gp)]
        }))
    }

    /// Row gather on a `(T, C)` tensor: `out[i] = x[index[i]]`.
    /// Backward scatter-adds, so repeated indices are fine.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "gather_rows: expects (T, C)");
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let c = xs[1];
        let mut value = ndarray::Array2::<F>::zeros((index.len(), c));
        for (i, &src) in index.iter().enumerate() {
            value.row_mut(i).assign(&xv.row(src));
        }
        let rows = xs[0];
        self.unary(x, value.into_dyn(), Box::new(move |g, _, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = ndarray::Array2::<F>::zeros((rows, c));
            for (i, &src) in index.iter().enumerate() {
                let mut row = gx.row_mut(src);
                row += &g2.row(i);
            }
            vec![Some(gx.into_dyn())]
        }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.value(a).iter().copied().sum();
        let value = ArrayD::from_elem(IxDyn(&[1]), s);
        self.unary(a, value, Box::new(|g, inputs, _| {
            let gv = g[IxDyn(&[0])];
            vec![Some(ArrayD::from_elem(inputs[0].raw_dim(), gv))]
        }))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let inv = F::cast(1.0 / n as f64);
        let s: F = self.value(a).iter().copied().sum();
        let value = ArrayD::from_elem(IxDyn(&[1]), s * inv);
        self.unary(a, value, Box::new(move |g, inputs, _| {
            let gv = g[IxDyn(&[0])] * inv;
            vec![Some(ArrayD::from_elem(inputs[0].raw_dim(), gv))]
        }))
    }

    /// Mean of elementwise squared difference; fused for convenience.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d2 = self.mul(d, d);
        self.mean_all(d2)
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// (M, K) x (K, N) matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2, "matmul: a must be 2-D");
        assert_eq!(sb.len(), 2, "matmul: b must be 2-D");
        assert_eq!(sa[1], sb[0], "matmul: inner dims differ");
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let value = F::gemm(av, bv).into_dyn();
        self.binary(a, b, value, Box::new(|g, inputs, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let av = inputs[0].view().into_dimensionality::<Ix2>().unwrap();
            let bv = inputs[1].view().into_dimensionality::<Ix2>().unwrap();
            let ga = F::gemm(g2.view(), bv.t());
            let gb = F::gemm(av.t(), g2.view());
            vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
        }))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2, "softmax_rows: expects 2-D");
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let mut value = x.to_owned();
        for mut row in value.rows_mut() {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: F = row.iter().copied().sum();
            row.mapv_inplace(|v| v / s);
        }
        self.unary(a, value.into_dyn(), Box::new(|g, _, out| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let p = out.view().into_dimensionality::<Ix2>().unwrap();
            let mut gi = ndarray::Array2::<F>::zeros(g2.raw_dim());
            for i in 0..g2.nrows() {
                let dot: F = g2
                    .row(i)
                    .iter()
                    .zip(p.row(i).iter())
                    .map(|(&gv, &pv)| gv * pv)
                    .sum();
                for j in 0..g2.ncols() {
                    gi[[i, j]] = p[[i, j]] * (g2[[i, j]] - dot);
                }
            }
            vec![Some(gi.into_dyn())]
        }))
    }

    /// Summed cross-entropy of row logits against integer targets.
    /// loss = sum_i (logsumexp(x_i) - x_i[t_i]).
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let ls = self.shape(logits).to_vec();
        assert_eq!(ls.len(), 2, "cross_entropy_sum: logits must be (T, V)");
        assert_eq!(ls[0], targets.len(), "cross_entropy_sum: target count");
        let x = self
            .value(logits)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = x.row(i);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            total = total + (lse - row[t]);
        }
        let value = ArrayD::from_elem(IxDyn(&[1]), total);
        self.unary(logits, value, Box::new(move |g, inputs, _| {
            let gv = g[IxDyn(&[0])];
            let x = inputs[0].view().into_dimensionality::<Ix2>().unwrap();
            let mut gi = ndarray::Array2::<F>::zeros(x.raw_dim());
            for (i, &t) in targets.iter().enumerate() {
                let row = x.row(i);
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                let denom: F = row.iter().map(|&v| (v - m).exp()).sum();
                for j in 0..x.ncols() {
                    let p = (x[[i, j]] - m).exp() / denom;
                    let delta = if j == t { F::one() } else { F::zero() };
                    gi[[i, j]] = gv * (p - delta);
                }
            }
            vec![Some(gi.into_dyn())]
        }))
    }

    /// Per-row layer norm of a `(T, C)` tensor with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "layer_norm: expects (T, C)");
        assert_eq!(self.shape(gain), &[xs[1]]);
        assert_eq!(self.shape(bias), &[xs[1]]);
        let eps = F::cast(eps);
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let gv = self.value(gain).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        let c = xs[1];
        let cf = F::cast(c as f64);
        let mut value = ndarray::Array2::<F>::zeros((xs[0], c));
        for i in 0..xs[0] {
            let row = xv.row(i);
            let mu = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cf;
            let inv = (var + eps).sqrt().recip();
            for j in 0..c {
                value[[i, j]] = (row[j] - mu) * inv * gv[j] + bv[j];
            }
        }
        let needs =
            self.needs_grad(x) || self.needs_grad(gain) || self.needs_grad(bias);
        self.push(
            value.into_dyn(),
            vec![x, gain, bias],
            needs,
            needs.then_some(Box::new(move |g: &ArrayD<F>, inputs: &[&ArrayD<F>], _: &ArrayD<F>| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = inputs[0].view().into_dimensionality::<Ix2>().unwrap();
                let gain = inputs[1].view().into_dimensionality::<Ix1>().unwrap();
                let (t, c) = (xv.nrows(), xv.ncols());
                let cf = F::cast(c as f64);
                let mut gx = ndarray::Array2::<F>::zeros((t, c));
                let mut ggain = ndarray::Array1::<F>::zeros(c);
                let mut gbias = ndarray::Array1::<F>::zeros(c);
                for i in 0..t {
                    let row = xv.row(i);
                    let mu = row.iter().copied().sum::<F>() / cf;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cf;
                    let inv = (var + eps).sqrt().recip();
                    // xhat and the two row means needed by the fused formula
                    let mut mean_gh = F::zero();
                    let mut mean_gh_xhat = F::zero();
                    let mut xhat = vec![F::zero(); c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mu) * inv;
                        let gh = g2[[i, j]] * gain[j];
                        mean_gh = mean_gh + gh;
                        mean_gh_xhat = mean_gh_xhat + gh * xhat[j];
                    }
                    mean_gh = mean_gh / cf;
                    mean_gh_xhat = mean_gh_xhat / cf;
                    for j in 0..c {
                        let gh = g2[[i, j]] * gain[j];
                        gx[[i, j]] = (gh - mean_gh - xhat[j] * mean_gh_xhat) * inv;
                        ggain[j] += g2[[i, j]] * xhat[j];
                        gbias[j] += g2[[i, j]];
                    }
                }
                vec![
                    Some(gx.into_dyn()),
                    Some(ggain.into_dyn()),
                    Some(gbias.into_dyn()),
                ]
            }) as super::BackFn<F>),
        )
    }

    /// Embedding lookup: rows of `table` (V, d) selected by `index`.
    pub fn embedding(&mut self, table: Var, index: Vec<usize>) -> Var {
        let ts = self.shape(table).to_vec();
        assert_eq!(ts.len(), 2, "embedding: table must be (V, d)");
        self.gather_rows(table, index)
    }

    /// Value is `replacement`, gradient is the identity onto `x`
    /// (straight-through estimator around a non-differentiable map).
    pub fn straight_through(&mut self, x: Var, replacement: ArrayD<F>) -> Var {
        assert_eq!(
            self.shape(x),
            replacement.shape(),
            "straight_through: shape mismatch"
        );
        self.unary(x, replacement, Box::new(|g, _, _| vec![Some(g.clone())]))
    }
}

pub(crate) fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
