//! Finite-difference checks for every differentiable operation, plus
//! numeric-robustness properties on extreme inputs.

use relay_core::autodiff::{Graph, Var};
use relay_core::gradcheck::{central_diff_grads, compare_grads};
use relay_core::params::{ParamId, ParamStore};
use relay_core::rng::substream;
use relay_core::tensor::Tensor;

const REL_TOL: f64 = 1e-5;
const ABS_FLOOR: f64 = 1e-8;
const H: f64 = 1e-4;

/// Check dLoss/dInputs for a scalar-valued graph builder against central
/// finite differences, over several seeds and small random shapes.
fn check_op<F>(name: &str, shapes: &[Vec<usize>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    for seed in 0..4u64 {
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(seed, name);
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                store
                    .add(format!("p{i}"), Tensor::randn(shape.clone(), 0.8, &mut rng), true)
                    .unwrap()
            })
            .collect();

        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let loss = build(&mut g, &vars);
        store.zero_grads();
        g.backward(loss, &mut store).unwrap();

        let fd = central_diff_grads(
            &mut store,
            &ids,
            |s| {
                let mut g = Graph::new();
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let loss = build(&mut g, &vars);
                Ok(g.scalar_value(loss))
            },
            H,
        )
        .unwrap();
        let report = compare_grads(&store, &fd, ABS_FLOOR);
        assert!(
            report.passed(REL_TOL),
            "{name} seed {seed}: max rel err {:.3e} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }
}

#[test]
fn fd_matmul() {
    check_op("matmul", &[vec![3, 5], vec![5, 4]], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        g.sum_all(y)
    });
}

#[test]
fn fd_add_and_add_row() {
    check_op("add", &[vec![4, 3], vec![4, 3]], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        g.sum_all(y)
    });
    check_op("add_row", &[vec![4, 3], vec![3]], |g, v| {
        let y = g.add_row(v[0], v[1]).unwrap();
        let sq = g.mul(y, y).unwrap();
        g.sum_all(sq)
    });
}

#[test]
fn fd_mul_scale_silu() {
    check_op("mul", &[vec![3, 4], vec![3, 4]], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        g.sum_all(y)
    });
    check_op("scale", &[vec![2, 6]], |g, v| {
        let y = g.scale(v[0], -1.7);
        let sq = g.mul(y, y).unwrap();
        g.sum_all(sq)
    });
    check_op("silu", &[vec![4, 4]], |g, v| {
        let y = g.silu(v[0]);
        g.sum_all(y)
    });
}

#[test]
fn fd_softmax_and_log_softmax() {
    check_op("softmax", &[vec![3, 6], vec![3, 6]], |g, v| {
        let y = g.softmax(v[0]).unwrap();
        let mixed = g.mul(y, v[1]).unwrap();
        g.sum_all(mixed)
    });
    check_op("log_softmax", &[vec![4, 5]], |g, v| {
        let y = g.log_softmax(v[0]).unwrap();
        g.pick_sum(y, &[(0, 1), (1, 4), (2, 0), (3, 3)]).unwrap()
    });
}

#[test]
fn fd_layer_norm() {
    check_op("layer_norm", &[vec![3, 8], vec![8], vec![8]], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let sq = g.mul(y, y).unwrap();
        g.sum_all(sq)
    });
}

#[test]
fn fd_gather_concat_slice_transpose() {
    check_op("gather_rows", &[vec![6, 4]], |g, v| {
        let y = g.gather_rows(v[0], &[0, 2, 2, 5]).unwrap();
        let sq = g.mul(y, y).unwrap();
        g.sum_all(sq)
    });
    check_op("concat_rows", &[vec![2, 4], vec![3, 4]], |g, v| {
        let y = g.concat_rows(&[v[0], v[1]]).unwrap();
        let sq = g.mul(y, y).unwrap();
        g.sum_all(sq)
    });
    check_op("concat_cols", &[vec![3, 2], vec![3, 5]], |g, v| {
        let y = g.concat_cols(&[v[0], v[1]]).unwrap();
        let sq = g.mul(y, y).unwrap();
        g.sum_all(sq)
    });
    check_op("slice_cols", &[vec![3, 7]], |g, v| {
        let y = g.slice_cols(v[0], 2, 4).unwrap();
        let sq = g.mul(y, y).unwrap();
        g.sum_all(sq)
    });
    check_op("transpose", &[vec![3, 5], vec![5, 3]], |g, v| {
        let t = g.transpose(v[0]);
        let y = g.mul(t, v[1]).unwrap();
        g.sum_all(y)
    });
}

#[test]
fn fd_attention_shaped_composition() {
    // softmax(QK^T/sqrt(d) + mask)V through concat and a linear head
    check_op(
        "attention",
        &[vec![4, 6], vec![4, 6], vec![4, 6], vec![6, 6]],
        |g, v| {
            let kt = g.transpose(v[1]);
            let scores = g.matmul(v[0], kt).unwrap();
            let scaled = g.scale(scores, 1.0 / 6.0f64.sqrt());
            let mask = relay_core::model::causal_mask::<f64>(4);
            let masked = g.add_const(scaled, &mask).unwrap();
            let p = g.softmax(masked).unwrap();
            let mixed = g.matmul(p, v[2]).unwrap();
            let out = g.matmul(mixed, v[3]).unwrap();
            let lp = g.log_softmax(out).unwrap();
            g.pick_sum(lp, &[(0, 0), (1, 3), (2, 5), (3, 2)]).unwrap()
        },
    );
}

#[test]
fn no_nan_or_inf_on_large_finite_inputs() {
    // |x| <= 1e4 must stay finite through the nonlinear kernels
    let mut rng = substream(3, "large");
    let x = Tensor::<f64>::randn(vec![4, 8], 1e4, &mut rng);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let s = g.softmax(xv).unwrap();
    assert!(g.value(s).is_finite());
    let ls = g.log_softmax(xv).unwrap();
    assert!(g.value(ls).is_finite());
    let si = g.silu(xv);
    assert!(g.value(si).is_finite());
    let gain = g.constant(Tensor::full(vec![8], 1.0));
    let bias = g.constant(Tensor::zeros(vec![8]));
    let ln = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
    assert!(g.value(ln).is_finite());
    // and gradients stay finite too
    let sq = g.mul(ln, ln).unwrap();
    let loss = g.sum_all(sq);
    let mut store = ParamStore::<f64>::new();
    g.backward(loss, &mut store).unwrap();
}

#[test]
fn softmax_shift_invariance_property() {
    for seed in 0..20u64 {
        let mut rng = substream(seed, "shift");
        let x = Tensor::<f64>::randn(vec![2, 9], 2.0, &mut rng);
        let shifted = x.map(|v| v + 123.456);
        let a = relay_core::tensor::softmax_rows(&x);
        let b = relay_core::tensor::softmax_rows(&shifted);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
        for r in 0..2 {
            let sum: f64 = a.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(a.row(r).iter().all(|&v| v > 0.0));
        }
    }
}
