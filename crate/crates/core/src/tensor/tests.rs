use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::gradcheck::check_inputs;
use super::*;
use crate::error::Error;

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn seq(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| (i + 1) as f64)
}

fn conv(g: &mut Graph<f64>, x: Var, w: Var, stride: usize, padding: usize, dilation: usize) -> Var {
    g.conv2d(
        x,
        w,
        None,
        Conv2dSpec {
            stride,
            padding,
            dilation,
            groups: 1,
        },
    )
    .unwrap()
}

/// 3x3 weights spread over a 5x5 grid with zeros between taps.
fn interleave(w3: &Tensor<f64>) -> Tensor<f64> {
    let [co, ci, _, _] = w3.dims4().unwrap();
    let mut w5 = Tensor::zeros(vec![co, ci, 5, 5]);
    for o in 0..co {
        for i in 0..ci {
            for a in 0..3 {
                for b in 0..3 {
                    w5.data_mut()[((o * ci + i) * 5 + 2 * a) * 5 + 2 * b] = w3.data()[((o * ci + i) * 3 + a) * 3 + b];
                }
            }
        }
    }
    w5
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    assert_eq!(Tensor::<f32>::scalar(3.0).numel(), 1);
}

#[test]
fn dilated_conv_on_ones_sums_nine_taps() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::ones(vec![1, 1, 5, 5]));
    let w = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let y = conv(&mut g, x, w, 1, 0, 2);
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn unit_kernel_is_identity() {
    let mut g = Graph::inference();
    let input = seq(&[2, 1, 3, 4]);
    let x = g.constant(input.clone());
    let w = g.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.conv2d(x, w, Some(b), Conv2dSpec::default()).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn dilated_kernel_spans_five_by_five_with_nine_weights() {
    assert_eq!(effective_kernel_extent(3, 2).unwrap(), 5);
    let w3: Tensor<f64> = Tensor::zeros(vec![1, 1, 3, 3]);
    let w5: Tensor<f64> = Tensor::zeros(vec![1, 1, 5, 5]);
    assert_eq!((w3.numel(), w5.numel()), (9, 25));
    // A 5x5 input is the smallest that admits one output position for both.
    let mut g = Graph::inference();
    let x = g.constant(Tensor::ones(vec![1, 1, 5, 5]));
    let a = g.constant(w3);
    let b = g.constant(w5);
    let y3 = conv(&mut g, x, a, 1, 0, 2);
    let y5 = conv(&mut g, x, b, 1, 0, 1);
    assert_eq!(g.shape(y3), g.shape(y5));
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::zeros(vec![1, 4, 5, 5]));
    let w = g.constant(Tensor::zeros(vec![2, 3, 3, 3]));
    let err = g.conv2d(x, w, None, Conv2dSpec::default()).unwrap_err();
    assert!(matches!(&err, Error::Param(m) if m.contains("dimension 1")), "{err}");

    let w = g.constant(Tensor::zeros(vec![2, 4, 3, 3]));
    let small = g.constant(Tensor::zeros(vec![1, 4, 2, 2]));
    let err = g.conv2d(small, w, None, Conv2dSpec::default()).unwrap_err();
    assert!(matches!(err, Error::Geometry(_)));

    let grouped = g.constant(Tensor::zeros(vec![2, 2, 3, 3]));
    let spec = Conv2dSpec {
        groups: 3,
        ..Default::default()
    };
    assert!(g.conv2d(x, grouped, None, spec).is_err());
}

#[test]
fn conv_output_extent_follows_formula() {
    for (h, k, s, p, d) in [(7, 3, 2, 1, 1), (9, 3, 1, 2, 2), (10, 5, 3, 0, 1), (8, 1, 2, 0, 1)] {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(vec![1, 1, h, h + 1]));
        let w = g.constant(Tensor::zeros(vec![1, 1, k, k]));
        let y = conv(&mut g, x, w, s, p, d);
        let expect = |n: usize| (n + 2 * p - d * (k - 1) - 1) / s + 1;
        assert_eq!(g.shape(y), &[1, 1, expect(h), expect(h + 1)]);
    }
}

fn bn(g: &mut Graph<f64>, x: Var, c: usize, training: bool, mean: &mut [f64], var: &mut [f64]) -> Result<Var> {
    let gamma = g.constant(Tensor::ones(vec![c]));
    let beta = g.constant(Tensor::zeros(vec![c]));
    g.batch_norm(
        x,
        gamma,
        beta,
        BnStats { mean, var },
        BnConfig {
            training,
            momentum: 0.1,
            epsilon: 1e-5,
        },
    )
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::full(vec![2, 1, 2, 2], 7.0));
    let (mut m, mut v) = (vec![0.0], vec![1.0]);
    let y = bn(&mut g, x, 1, true, &mut m, &mut v).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() <= 1e-5_f64.sqrt()));
}

#[test]
fn batch_norm_two_values_normalize_to_unit() {
    let mut g = Graph::inference();
    let x = g.constant(t64(&[2, 1, 1, 1], &[1.0, 3.0]));
    let (mut m, mut v) = (vec![0.0], vec![1.0]);
    let y = bn(&mut g, x, 1, true, &mut m, &mut v).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert_abs_diff_eq!(g.value(y).data()[0], -expect, epsilon = 1e-12);
    assert_abs_diff_eq!(g.value(y).data()[1], expect, epsilon = 1e-12);
    assert_abs_diff_eq!(expect, 0.99999, epsilon = 1e-5);
    // running <- 0.9 * running + 0.1 * batch
    assert_abs_diff_eq!(m[0], 0.2, epsilon = 1e-12);
    assert_abs_diff_eq!(v[0], 0.9 + 0.1, epsilon = 1e-12);
}

#[test]
fn batch_norm_inference_with_identity_stats() {
    let mut g = Graph::inference();
    let input = seq(&[1, 2, 2, 2]);
    let x = g.constant(input.clone());
    let (mut m, mut v) = (vec![0.0; 2], vec![1.0; 2]);
    let y = bn(&mut g, x, 2, false, &mut m, &mut v).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in g.value(y).data().iter().zip(input.data()) {
        assert_abs_diff_eq!(*a, b * scale, epsilon = 1e-12);
    }
    assert_eq!((m, v), (vec![0.0; 2], vec![1.0; 2]));
}

#[test]
fn batch_norm_errors() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros(vec![1, 2, 1, 1]));
    let (mut m, mut v) = (vec![0.0; 2], vec![1.0; 2]);
    assert!(matches!(
        bn(&mut g, x, 2, true, &mut m, &mut v),
        Err(Error::DegenerateBatch(_))
    ));
    assert!(bn(&mut g, x, 2, false, &mut m, &mut v).is_ok());
    let (mut m3, mut v3) = (vec![0.0; 3], vec![1.0; 3]);
    assert!(matches!(
        bn(&mut g, x, 3, false, &mut m3, &mut v3),
        Err(Error::Param(_))
    ));
}

#[test]
fn upsample_examples() {
    let mut g = Graph::inference();
    let c = g.constant(Tensor::full(vec![1, 2, 3, 2], 4.5));
    for align in [false, true] {
        let y = g.upsample_bilinear(c, 7, 5, align).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 4.5).abs() < 1e-12));
    }
    let one = g.constant(t64(&[1, 1, 1, 1], &[2.5]));
    let y = g.upsample_bilinear(one, 4, 4, false).unwrap();
    assert_eq!(g.value(y).data(), &[2.5; 16]);

    let x = g.constant(t64(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let y = g.upsample_bilinear(x, 3, 3, true).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]
    );
    assert!(g.upsample_bilinear(x, 0, 3, true).is_err());
}

#[test]
fn pool_examples() {
    let mut g = Graph::inference();
    let x = g.constant(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let m = g.pool2d(x, PoolMode::Max, 2, 2, 0).unwrap();
    let a = g.pool2d(x, PoolMode::Avg, 2, 2, 0).unwrap();
    assert_eq!(g.value(m).item(), 4.0);
    assert_eq!(g.value(a).item(), 2.5);
    let c = g.constant(Tensor::full(vec![1, 1, 6, 6], -1.5));
    let m = g.pool2d(c, PoolMode::Max, 3, 2, 1).unwrap();
    assert_eq!(g.shape(m), &[1, 1, 3, 3]);
    assert!(g.value(m).data().iter().all(|&v| v == -1.5));
    assert!(matches!(
        g.pool2d(x, PoolMode::Max, 3, 1, 0),
        Err(Error::Geometry(_))
    ));
}

#[test]
fn max_pool_ties_route_to_first_element() {
    let mut g = Graph::training();
    let x = g.leaf(Tensor::full(vec![1, 1, 2, 2], 1.0).with_requires_grad(true));
    let m = g.pool2d(x, PoolMode::Max, 2, 2, 0).unwrap();
    let loss = g.sum_all(m);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn adaptive_pool_examples() {
    let mut g = Graph::inference();
    let ones = g.constant(Tensor::ones(vec![1, 1, 4, 4]));
    let y = g.adaptive_avg_pool(ones, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[1.0; 4]);
    let x = g.constant(seq(&[1, 1, 4, 4]));
    let y = g.adaptive_avg_pool(x, 1, 1).unwrap();
    assert_eq!(g.value(y).item(), 8.5);
    let y = g.adaptive_avg_pool(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[3.5, 5.5, 11.5, 13.5]);
    assert!(matches!(g.adaptive_avg_pool(x, 5, 1), Err(Error::Param(_))));
}

#[test]
fn adaptive_pool_bins_match_floor_rule() {
    // 1..=5 along one row, 3 bins: [0,1), [1,3), [3,5)
    let mut g = Graph::inference();
    let x = g.constant(seq(&[1, 1, 1, 5]));
    let y = g.adaptive_avg_pool(x, 1, 3).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.5, 4.5]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::inference();
    let x = g.constant(t64(&[1, 2, 1, 1], &[0.0, 0.0]));
    let y = g.softmax_channel(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    let x = g.constant(t64(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]));
    let y = g.softmax_channel(x).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let expect = [1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z];
    for (a, b) in g.value(y).data().iter().zip(expect) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(expect[0], 0.09003, epsilon = 1e-5);
    assert_abs_diff_eq!(expect[1], 0.24473, epsilon = 1e-5);
    assert_abs_diff_eq!(expect[2], 0.66524, epsilon = 1e-5);
    let shifted = g.constant(t64(&[1, 3, 1, 1], &[101.0, 102.0, 103.0]));
    let ys = g.softmax_channel(shifted).unwrap();
    for (a, b) in g.value(ys).data().iter().zip(g.value(y).data()) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::inference();
    let x = g.constant(t64(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let eye = g.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t64(&[2, 2], &[3.0, -4.0, 5.5, 6.0]));
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p).data(), g.value(m).data());

    let a = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let b = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let c = g.concat_channel(a, b).unwrap();
    assert_eq!(g.shape(c), &[1, 5, 4, 4]);
    let bad = g.constant(Tensor::zeros(vec![1, 3, 4, 3]));
    assert!(g.concat_channel(a, bad).is_err());

    let big = g.constant(seq(&[2, 3]));
    let row = g.constant(t64(&[1, 3], &[10.0, 20.0, 30.0]));
    let s = g.add(big, row).unwrap();
    assert_eq!(g.value(s).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let col = g.constant(Tensor::zeros(vec![2, 1]));
    assert!(g.add(big, col).is_err());
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::training();
    let init = t64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
    let x = g.leaf(init.clone().with_requires_grad(true));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    let expect: Vec<f64> = init.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(x).unwrap(), &expect[..]);
    // A second pass without reset accumulates.
    g.backward(loss).unwrap();
    let twice: Vec<f64> = expect.iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(x).unwrap(), &twice[..]);
}

#[test]
fn fan_out_gradients_add() {
    let mut g = Graph::training();
    let x = g.leaf(t64(&[1], &[1.5]).with_requires_grad(true));
    let a = g.constant(t64(&[1], &[-3.0]));
    let y = g.mul(a, x).unwrap();
    let z = g.add(y, y).unwrap();
    let loss = g.sum_all(z);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[-6.0]);
    assert!(g.grad(a).is_none());
}

#[test]
fn backward_errors_and_detach() {
    let mut g = Graph::training();
    let x = g.leaf(seq(&[2]).with_requires_grad(true));
    assert!(matches!(g.backward(x), Err(Error::Param(_))));
    let d = g.detach(x);
    let s = g.mul(d, x).unwrap();
    let loss = g.sum_all(s);
    g.backward(loss).unwrap();
    assert!(g.grad(d).is_none());
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn inference_graph_records_nothing() {
    let mut g = Graph::inference();
    let x = g.leaf(seq(&[1, 1, 3, 3]).with_requires_grad(true));
    let w = g.leaf(Tensor::ones(vec![1, 1, 3, 3]).with_requires_grad(true));
    let y = conv(&mut g, x, w, 1, 1, 1);
    let loss = g.sum_all(y);
    assert_eq!(g.node_count(), 0);
    assert!(g.backward(loss).is_err());

    let mut t = Graph::training();
    let x = t.leaf(seq(&[1, 1, 3, 3]).with_requires_grad(true));
    let w = t.leaf(Tensor::ones(vec![1, 1, 3, 3]).with_requires_grad(true));
    let y = conv(&mut t, x, w, 1, 1, 1);
    t.sum_all(y);
    assert_eq!(t.op_names(), vec!["conv2d", "reduce_sum"]);
}

#[test]
fn cross_entropy_basic_values() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
    let l = g.cross_entropy(x, &[0, 1, 1, 0], 255).unwrap();
    assert_abs_diff_eq!(g.value(l).item(), std::f64::consts::LN_2, epsilon = 1e-12);
    let l = g.cross_entropy(x, &[255; 4], 255).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let sat = g.constant(t64(&[1, 2, 1, 1], &[20.0, -20.0]));
    let l = g.cross_entropy(sat, &[0], 255).unwrap();
    assert!(g.value(l).item() < 1e-8);
    assert!(matches!(g.cross_entropy(x, &[0, 2, 1, 0], 255), Err(Error::Data(_))));
}

#[test]
fn conv_weight_gradient_matches_finite_differences() {
    let x = projection(&[2, 2, 5, 5], 1);
    let w = projection(&[3, 2, 3, 3], 2);
    let report = check_inputs(
        &[x, w],
        |g, v| {
            g.conv2d(
                v[0],
                v[1],
                None,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                    dilation: 2,
                    groups: 1,
                },
            )
        },
        1e-4,
        3,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

use super::gradcheck::projection;

#[test]
fn f32_and_f64_agree_on_conv() {
    let x = projection(&[1, 2, 6, 6], 5);
    let w = projection(&[2, 2, 3, 3], 6);
    let run64 = {
        let mut g = Graph::inference();
        let (a, b) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = conv(&mut g, a, b, 2, 1, 1);
        g.value(y).clone()
    };
    let mut g = Graph::<f32>::inference();
    let (a, b) = (g.constant(x.cast()), g.constant(w.cast()));
    let y = g
        .conv2d(
            a,
            b,
            None,
            Conv2dSpec {
                stride: 2,
                padding: 1,
                ..Default::default()
            },
        )
        .unwrap();
    assert!(g.value(y).cast::<f64>().max_abs_diff(&run64) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dilation_equivalence(seed in 0u64..10_000, h in 5usize..10, w in 5usize..10, pad in 0usize..3) {
        let x = projection(&[1, 2, h, w], seed);
        let w3 = projection(&[2, 2, 3, 3], seed + 1);
        let w5 = interleave(&w3);
        let mut g = Graph::inference();
        let (xv, a, b) = (g.constant(x), g.constant(w3), g.constant(w5));
        let y3 = conv(&mut g, xv, a, 1, pad, 2);
        let y5 = conv(&mut g, xv, b, 1, pad, 1);
        prop_assert!(g.value(y3).max_abs_diff(g.value(y5)) <= 1e-6);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, c in 1usize..6) {
        let x = projection(&[2, c, 3, 3], seed);
        let mut g = Graph::inference();
        let v = g.constant(x);
        let y = g.mul_scalar(v, 30.0);
        let s = g.softmax_channel(y).unwrap();
        let d = g.value(s).data();
        for b in 0..2 {
            for p in 0..9 {
                let sum: f64 = (0..c).map(|k| d[(b * c + k) * 9 + p]).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!((0..c).all(|k| d[(b * c + k) * 9 + p] >= 0.0));
            }
        }
    }

    #[test]
    fn pool_and_conv_shape_law(h in 3usize..20, w in 3usize..20, k in 1usize..4, s in 1usize..4) {
        let pad = k / 2;
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(vec![1, 2, h, w]));
        let p = g.pool2d(x, PoolMode::Avg, k, s, pad).unwrap();
        let expect = |n: usize| (n + 2 * pad - k) / s + 1;
        prop_assert_eq!(g.shape(p), &[1, 2, expect(h), expect(w)][..]);
        let up = g.upsample_bilinear(x, h + k, w * s, false).unwrap();
        prop_assert_eq!(g.shape(up), &[1, 2, h + k, w * s][..]);
    }
}
