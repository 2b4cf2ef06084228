//! Central finite-difference validation of every backward formula.
//!
//! Each case rebuilds the graph twice per perturbed element, so inputs are
//! tiny. All checks run in `f64` where 1e-5 steps leave ~1e-7 headroom.

use ndarray::{ArrayD, IxDyn};
use varformer::graph::{Graph, Var};

/// Deterministic irregular filler so reductions can't hide permutation bugs.
fn arr(shape: &[usize], salt: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| (i as f64 * 1.7 + salt).sin() * 0.8 + 0.05)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Positive variant for `ln`.
fn arr_pos(shape: &[usize], salt: f64) -> ArrayD<f64> {
    arr(shape, salt).mapv(|v| v.abs() + 0.2)
}

/// Scalarize an arbitrary output with an irregular constant projection.
fn project(g: &mut Graph<f64>, y: Var) -> Var {
    let w = g.constant(arr(g.shape(y), 9.1));
    let p = g.mul(y, w);
    g.sum_all(p)
}

fn check(inputs: &[ArrayD<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, tol: f64) {
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.shape(loss), &[1], "gradcheck loss must be scalar");
    let grads = g.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
        })
        .collect();

    let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|a| g.param(a.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss)[IxDyn(&[0])]
    };

    let eps = 1e-5;
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        for j in 0..n {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[i].as_slice().unwrap()[j];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            assert!(
                ((a - numeric) / denom).abs() < tol,
                "input {i} elem {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_arithmetic() {
    check(
        &[arr(&[2, 3], 0.3), arr(&[2, 3], 4.2)],
        |g, v| {
            let p = g.mul(v[0], v[1]);
            let d = g.sub(p, v[0]);
            let s = g.scale(d, 0.7);
            let n = g.neg(s);
            let a = g.add(n, v[1]);
            let b = g.add_scalar(a, 1.3);
            project(g, b)
        },
        1e-6,
    );
}

#[test]
fn activations() {
    check(
        &[arr(&[3, 4], 1.1)],
        |g, v| {
            let r = g.sigmoid(v[0]);
            let s = g.silu(r);
            project(g, s)
        },
        1e-6,
    );
    // keep relu/max inputs away from their kinks
    let x = arr(&[3, 4], 2.2).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check(
        &[x],
        |g, v| {
            let r = g.relu(v[0]);
            let m = g.max_scalar(v[0], 0.4);
            let s = g.add(r, m);
            project(g, s)
        },
        1e-5,
    );
    check(
        &[arr_pos(&[2, 5], 3.3)],
        |g, v| {
            let l = g.ln(v[0]);
            project(g, l)
        },
        1e-6,
    );
}

#[test]
fn bias_and_scalar_gates() {
    check(
        &[arr(&[2, 3, 4], 0.9), arr(&[3], 5.0), arr(&[1], 6.0)],
        |g, v| {
            let b = g.add_bias(v[0], v[1], 1);
            let s = g.mul_scalar_var(b, v[2]);
            project(g, s)
        },
        1e-6,
    );
}

#[test]
fn shape_movement() {
    check(
        &[arr(&[2, 6], 0.1), arr(&[3, 4], 1.4)],
        |g, v| {
            let r = g.reshape(v[0], &[3, 4]);
            let t = g.transpose2(v[1]);
            let tt = g.reshape(t, &[3, 4]);
            let c = g.concat(&[r, tt], 0);
            let s = g.slice_axis(c, 0, 1, 5);
            project(g, s)
        },
        1e-6,
    );
}

#[test]
fn gather_with_repeats() {
    check(
        &[arr(&[4, 3], 2.7)],
        |g, v| {
            let out = g.gather_rows(v[0], vec![2, 0, 2, 3, 2]);
            project(g, out)
        },
        1e-6,
    );
}

#[test]
fn reductions_and_mse() {
    check(
        &[arr(&[3, 3], 0.2), arr(&[3, 3], 7.7)],
        |g, v| {
            let m = g.mse(v[0], v[1]);
            let s = g.sum_sq(v[0]);
            let s = g.scale(s, 0.01);
            let me = g.mean_all(v[1]);
            let a = g.add(m, s);
            g.add(a, me)
        },
        1e-6,
    );
}

#[test]
fn matmul_both_sides() {
    check(
        &[arr(&[3, 4], 0.5), arr(&[4, 2], 1.9)],
        |g, v| {
            let p = g.matmul(v[0], v[1]);
            project(g, p)
        },
        1e-6,
    );
}

#[test]
fn softmax_rows_jacobian() {
    check(
        &[arr(&[3, 5], 1.2)],
        |g, v| {
            let s = g.scale(v[0], 3.0);
            let p = g.softmax_rows(s);
            project(g, p)
        },
        1e-6,
    );
}

#[test]
fn cross_entropy_matches_differences() {
    check(
        &[arr(&[4, 6], 2.5)],
        |g, v| {
            let s = g.scale(v[0], 2.0);
            g.cross_entropy_sum(s, vec![1, 5, 0, 5])
        },
        1e-6,
    );
}

#[test]
fn layer_norm_full_jacobian() {
    check(
        &[arr(&[3, 6], 0.8), arr_pos(&[6], 4.4), arr(&[6], 5.5)],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            project(g, y)
        },
        1e-5,
    );
}

#[test]
fn straight_through_passes_identity() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.param(arr(&[2, 3], 0.6));
    let replaced = g.straight_through(x, arr(&[2, 3], 9.9));
    let w = g.constant(arr(&[2, 3], 3.1));
    let p = g.mul(replaced, w);
    let loss = g.sum_all(p);
    let grads = g.backward(loss);
    // gradient is the projection weights, untouched by the value swap
    assert_eq!(grads.get(x).unwrap(), &arr(&[2, 3], 3.1));
    assert_eq!(g.value(replaced), &arr(&[2, 3], 9.9));
}

#[test]
fn conv2d_x_and_w() {
    check(
        &[arr(&[2, 5, 4], 0.4), arr(&[3, 2, 3, 3], 1.6)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1);
            project(g, y)
        },
        1e-6,
    );
    check(
        &[arr(&[1, 6, 6], 2.8), arr(&[2, 1, 3, 3], 3.9)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1);
            project(g, y)
        },
        1e-6,
    );
}

#[test]
fn pooling_and_resampling() {
    check(
        &[arr(&[2, 4, 4], 1.0)],
        |g, v| {
            let p = g.avg_pool_to(v[0], 2, 2);
            let u = g.upsample_replicate(p, 4, 4);
            project(g, u)
        },
        1e-6,
    );
    check(
        &[arr(&[2, 5, 3], 2.0)],
        |g, v| {
            let up = g.resize_bilinear(v[0], 8, 6);
            let down = g.resize_bilinear(up, 3, 2);
            project(g, down)
        },
        1e-6,
    );
    check(
        &[arr(&[1, 5, 7], 3.0)],
        |g, v| {
            let p = g.adaptive_avg_pool(v[0], 3, 4);
            project(g, p)
        },
        1e-6,
    );
}

#[test]
fn token_layout_conversions() {
    check(
        &[arr(&[3, 2, 4], 0.7)],
        |g, v| {
            let t = g.chw_to_tc(v[0]);
            let y = g.tc_to_chw(t, 2, 4);
            let t2 = g.chw_to_tc(y);
            project(g, t2)
        },
        1e-6,
    );
}

#[test]
fn embedding_scatter() {
    check(
        &[arr(&[5, 4], 6.1)],
        |g, v| {
            let e = g.embedding(v[0], vec![4, 4, 1, 0]);
            project(g, e)
        },
        1e-6,
    );
}
