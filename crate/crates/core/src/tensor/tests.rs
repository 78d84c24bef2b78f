use super::gradcheck::{grad_check, op_catalog, random_tensor, weighted_sum};
use super::*;
use crate::error::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[0.0, 0.0])).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layernorm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(vec![1, 8], 3.25)).unwrap();
    let y = g.layernorm(x, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-3));
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
    assert_eq!(grads.get(y).unwrap().item(), 1.0);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[4], &[0.3, -1.2, 2.0, 0.1])).unwrap();
    let s = g.softmax(x).unwrap();
    let y = g.sum(s).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn squared_norm_of_linear_map_matches_finite_differences() {
    let v = random_tensor(&[4, 1], -1.0, 1.0, 7);
    let w = random_tensor(&[3, 4], -1.0, 1.0, 8);
    let report = grad_check(
        |g, w| {
            let v = g.input(v.clone())?;
            let y = g.matmul(w, v)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
}

#[test]
fn gelu_gradient_at_half() {
    let report = grad_check(
        |g, x| {
            let y = g.gelu(x)?;
            g.sum(y)
        },
        &Tensor::scalar(0.5),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
}

#[test]
fn attention_gradient_four_tokens_dim_eight() {
    let x = random_tensor(&[1, 4, 8], -1.0, 1.0, 3);
    let report = grad_check(
        |g, x| {
            let wq = g.input(random_tensor(&[8, 8], -0.5, 0.5, 4))?;
            let wk = g.input(random_tensor(&[8, 8], -0.5, 0.5, 5))?;
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let y = g.attention(q, k, x, 2)?;
            weighted_sum(g, y, 6)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
}

#[test]
fn transposed_convolution_gradient() {
    let x = random_tensor(&[1, 3, 3, 2], -1.0, 1.0, 9);
    let w = random_tensor(&[2, 2, 2, 3], -1.0, 1.0, 10);
    let report = grad_check(
        |g, x| {
            let w = g.input(w.clone())?;
            let y = g.conv_transpose2d(x, w, 2, 0)?;
            weighted_sum(g, y, 11)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
}

#[test]
fn every_op_matches_finite_differences() {
    let results = op_catalog(1e-5).unwrap();
    assert!(results.len() >= 3 * 17);
    for (name, err) in results {
        assert!(err < 1e-4, "{name}: max_rel_err {err}");
    }
}

#[test]
fn conv_transpose_k2s2_doubles_extent() {
    let mut g = Graph::new();
    let x = g.input(Tensor::ones(vec![2, 4, 3, 5])).unwrap();
    let w = g.input(Tensor::ones(vec![2, 2, 5, 7])).unwrap();
    let y = g.conv_transpose2d(x, w, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[2, 8, 6, 7]);
    assert!(g.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn conv2d_matches_direct_sum() {
    let x = random_tensor(&[1, 4, 4, 2], -1.0, 1.0, 1);
    let w = random_tensor(&[3, 3, 2, 1], -1.0, 1.0, 2);
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let wv = g.input(w.clone()).unwrap();
    let y = g.conv2d(xv, wv, 1, 1).unwrap();
    for oy in 0..4 {
        for ox in 0..4 {
            let mut s = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                    if iy < 0 || ix < 0 || iy >= 4 || ix >= 4 {
                        continue;
                    }
                    for c in 0..2 {
                        s += x.data()[((iy * 4 + ix) * 2) as usize + c] * w.data()[(ky * 3 + kx) * 2 + c];
                    }
                }
            }
            assert!((g.value(y).data()[oy * 4 + ox] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_same_size_is_identity() {
    let x = random_tensor(&[2, 5, 3, 4], -1.0, 1.0, 4);
    let mut g = Graph::new();
    let v = g.input(x.clone()).unwrap();
    let y = g.bilinear(v, 5, 3).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn zero_row_normalizes_to_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 3], &[0.0, 0.0, 0.0, 3.0, 0.0, 4.0])).unwrap();
    let y = g.l2_normalize(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 0.6, 0.0, 0.8]);
    let s = weighted_sum(&mut g, y, 1).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().is_finite());
}

#[test]
fn shape_error_names_op_and_dims() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.input(Tensor::zeros(vec![2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn non_finite_values_report_node() {
    let mut g = Graph::new();
    assert!(matches!(
        g.input(t(&[1], &[f64::NAN])),
        Err(Error::NonFinite { node: 0, .. })
    ));
    let x = g.input(t(&[1], &[-1.0])).unwrap();
    match g.log(x) {
        Err(Error::NonFinite { op, node }) => {
            assert_eq!(op, "log");
            assert_eq!(node, 1);
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(vec![3])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn every_reachable_grad_leaf_is_populated() {
    let mut g = Graph::new();
    let a = g.param(random_tensor(&[2, 2], -1.0, 1.0, 1)).unwrap();
    let b = g.param(random_tensor(&[2, 2], -1.0, 1.0, 2)).unwrap();
    let unused = g.param(Tensor::zeros(vec![1])).unwrap();
    let c = g.input(Tensor::ones(vec![2, 2])).unwrap();
    let ab = g.matmul(a, b).unwrap();
    let abc = g.add(ab, c).unwrap();
    let s = g.sum(abc).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).is_some() && grads.get(b).is_some() && grads.get(ab).is_some());
    assert!(grads.get(c).is_none());
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.get(a).unwrap().shape(), &[2, 2]);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(random_tensor(&[2, 6, 8], -1.0, 1.0, 5)).unwrap();
        let n = g.layernorm(x, 1e-6).unwrap();
        let y = g.attention(n, x, n, 2).unwrap();
        let z = g.gelu(y).unwrap();
        let s = weighted_sum(&mut g, z, 3).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(z).clone(), grads.get(x).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

#[test]
fn f32_graph_rounds_outputs() {
    let mut g = Graph::with_precision(Precision::F32);
    let a = g.input(random_tensor(&[3, 5], -1.0, 1.0, 1)).unwrap();
    let b = g.input(random_tensor(&[5, 2], -1.0, 1.0, 2)).unwrap();
    let y = g.matmul(a, b).unwrap();
    let z = g.gelu(y).unwrap();
    for v in g.value(z).data() {
        assert_eq!(*v, *v as f32 as f64);
    }
    let mut g64 = Graph::new();
    let a = g64.input(random_tensor(&[3, 5], -1.0, 1.0, 1)).unwrap();
    let b = g64.input(random_tensor(&[5, 2], -1.0, 1.0, 2)).unwrap();
    let y64 = g64.matmul(a, b).unwrap();
    let z64 = g64.gelu(y64).unwrap();
    assert!(g.value(z).max_abs_diff(g64.value(z64)) < 1e-5);
}

#[test]
fn inference_graph_refuses_backward() {
    let mut g = Graph::inference(Precision::F64);
    let x = g.param(Tensor::scalar(1.0)).unwrap();
    assert!(g.backward(x).is_err());
}

#[test]
fn grad_check_rejects_nonpositive_eps() {
    assert!(grad_check(|g, x| g.sum(x), &Tensor::scalar(1.0), 0.0).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..7, seed in 0u64..1000) {
        let mut g = Graph::new();
        let x = g.input(random_tensor(&[rows, cols], -20.0, 20.0, seed)).unwrap();
        let y = g.softmax(x).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut g = Graph::new();
        let x = g.input(random_tensor(&[rows, cols], -3.0, 3.0, seed)).unwrap();
        let y = g.l2_normalize(x).unwrap();
        for r in 0..rows {
            let n: f64 = g.value(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
