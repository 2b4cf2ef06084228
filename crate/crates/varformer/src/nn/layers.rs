//! Reusable layers over the graph: convolution, linear, layer norm, and
//! multi-head attention. A layer struct stores only its name and
//! hyperparameters; the weights live in the [`ParamStore`].

use super::{ParamStore, Session};
use crate::graph::Var;
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian init with the given standard deviation.
pub fn normal_init<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::cast(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Fan-in scaled init for conv kernels.
pub fn kaiming_conv<F: Scalar>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<F> {
    let std = (2.0 / (c_in * kh * kw) as f64).sqrt();
    normal_init(rng, &[c_out, c_in, kh, kw], std)
}

/// Fan-average scaled init for linear weights, stored `(d_in, d_out)`.
pub fn xavier_linear<F: Scalar>(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> ArrayD<F> {
    let std = (2.0 / (d_in + d_out) as f64).sqrt();
    normal_init(rng, &[d_in, d_out], std)
}

/// 2-D convolution layer; `(C_in, H, W)` → `(C_out, H', W')`.
pub struct Conv2d {
    name: String,
    pub stride: usize,
    pub pad: usize,
    bias: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        store.insert(&format!("{name}/w"), kaiming_conv(rng, c_out, c_in, k, k));
        if bias {
            store.insert(&format!("{name}/b"), ArrayD::zeros(IxDyn(&[c_out])));
        }
        Conv2d {
            name: name.to_string(),
            stride,
            pad,
            bias,
        }
    }

    /// All-zero weights (and bias): the layer starts as the zero map, which
    /// makes residual heads exact identities at initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn init_zero<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        store.insert(
            &format!("{name}/w"),
            ArrayD::zeros(IxDyn(&[c_out, c_in, k, k])),
        );
        if bias {
            store.insert(&format!("{name}/b"), ArrayD::zeros(IxDyn(&[c_out])));
        }
        Conv2d {
            name: name.to_string(),
            stride,
            pad,
            bias,
        }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.p(&format!("{}/w", self.name));
        let y = s.g.conv2d(x, w, self.stride, self.pad);
        if self.bias {
            let b = s.p(&format!("{}/b", self.name));
            s.g.add_bias(y, b, 0)
        } else {
            y
        }
    }
}

/// Dense layer on token tensors; `(T, d_in)` → `(T, d_out)`.
pub struct Linear {
    name: String,
    bias: bool,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        store.insert(&format!("{name}/w"), xavier_linear(rng, d_in, d_out));
        if bias {
            store.insert(&format!("{name}/b"), ArrayD::zeros(IxDyn(&[d_out])));
        }
        Linear {
            name: name.to_string(),
            bias,
        }
    }

    pub fn init_zero<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        store.insert(&format!("{name}/w"), ArrayD::zeros(IxDyn(&[d_in, d_out])));
        if bias {
            store.insert(&format!("{name}/b"), ArrayD::zeros(IxDyn(&[d_out])));
        }
        Linear {
            name: name.to_string(),
            bias,
        }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.p(&format!("{}/w", self.name));
        let y = s.g.matmul(x, w);
        if self.bias {
            let b = s.p(&format!("{}/b", self.name));
            s.g.add_bias(y, b, 1)
        } else {
            y
        }
    }
}

/// Per-token layer norm with learned gain (ones) and bias (zeros).
pub struct LayerNorm {
    name: String,
}

impl LayerNorm {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        store.insert(
            &format!("{name}/g"),
            ArrayD::from_elem(IxDyn(&[dim]), F::one()),
        );
        store.insert(&format!("{name}/b"), ArrayD::zeros(IxDyn(&[dim])));
        LayerNorm {
            name: name.to_string(),
        }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let g = s.p(&format!("{}/g", self.name));
        let b = s.p(&format!("{}/b", self.name));
        s.g.layer_norm(x, g, b, 1e-5)
    }
}

/// Multi-head attention over token tensors, with an optional additive mask.
///
/// Query tokens come from `xq (Tq, C)`, keys/values from `xkv (Tkv, C)`;
/// self-attention passes the same tensor for both. `zero_out` zero-inits the
/// output projection so the block starts as a no-op contribution — used by
/// the cross-attention injection path.
pub struct Mha {
    name: String,
    pub dim: usize,
    pub heads: usize,
}

impl Mha {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention width must split across heads");
        for proj in ["wq", "wk", "wv"] {
            store.insert(&format!("{name}/{proj}"), xavier_linear(rng, dim, dim));
        }
        let wo = if zero_out {
            ArrayD::zeros(IxDyn(&[dim, dim]))
        } else {
            xavier_linear(rng, dim, dim)
        };
        store.insert(&format!("{name}/wo"), wo);
        store.insert(&format!("{name}/bo"), ArrayD::zeros(IxDyn(&[dim])));
        Mha {
            name: name.to_string(),
            dim,
            heads,
        }
    }

    /// `mask`, when given, is added to every head's score matrix before the
    /// softmax; blocked entries hold a large negative constant.
    pub fn forward<F: Scalar>(
        &self,
        s: &mut Session<F>,
        xq: Var,
        xkv: Var,
        mask: Option<&Array2<F>>,
    ) -> Var {
        let dh = self.dim / self.heads;
        let wq = s.p(&format!("{}/wq", self.name));
        let wk = s.p(&format!("{}/wk", self.name));
        let wv = s.p(&format!("{}/wv", self.name));
        let q = s.g.matmul(xq, wq);
        let k = s.g.matmul(xkv, wk);
        let v = s.g.matmul(xkv, wv);
        let mask_var = mask.map(|m| s.g.constant(m.clone().into_dyn()));
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = s.g.slice_axis(q, 1, lo, hi);
            let kh = s.g.slice_axis(k, 1, lo, hi);
            let vh = s.g.slice_axis(v, 1, lo, hi);
            let kt = s.g.transpose2(kh);
            let scores = s.g.matmul(qh, kt);
            let mut scores = s.g.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask_var {
                scores = s.g.add(scores, m);
            }
            let p = s.g.softmax_rows(scores);
            heads_out.push(s.g.matmul(p, vh));
        }
        let cat = s.g.concat(&heads_out, 1);
        let wo = s.p(&format!("{}/wo", self.name));
        let bo = s.p(&format!("{}/bo", self.name));
        let y = s.g.matmul(cat, wo);
        s.g.add_bias(y, bo, 1)
    }
}

/// Additive attention mask value for blocked pairs. Large enough that the
/// post-softmax weight underflows to exactly zero in `f32` and `f64`, small
/// enough not to overflow `f32` arithmetic.
pub const MASK_BLOCK: f64 = -1e9;
