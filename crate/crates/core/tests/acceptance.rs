//! Acceptance suite: one line per criterion on stdout, then an assertion.
//!
//! Run with `cargo test --test acceptance -- --nocapture --test-threads 1` for ordered output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segkit::cli;
use segkit::config::{parse_config, InferenceConfig};
use segkit::data::{
    brightness, check_dataset, crop_pad, hflip, normalize, parse_file_list, scale, write_image, write_label,
    write_synthetic_shapes, Loader, Sample, SampleRecord, Transform, ViolationKind,
};
use segkit::error::Result;
use segkit::eval::{evaluate, ConfusionMatrix};
use segkit::layers::{
    check_block_gradients, skip_fuse, BatchNorm, Conv, ConvBnRelu, Ctx, FuseMode, ParamBuilder, ParamStore,
    ResidualBlock, SeparableConv,
};
use segkit::model::{ModelSpec, SegModel, MODEL_NAMES};
use segkit::tensor::gradcheck::check_inputs;
use segkit::tensor::{effective_kernel_extent, BnConfig, BnStats, Conv2dSpec, Graph, PoolMode, Tensor, Var};
use segkit::training::{poly_lr, Checkpoint, TrainSettings, TrainState, Trainer, LATEST_CHECKPOINT};

fn report(name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "ACCEPTANCE {name}: {verdict} ({detail})");
    let _ = out.flush();
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Distinct values at least 0.01 apart, so max and relu never sit on a tie or a kink.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::from_fn(shape.to_vec(), |i| (order[i] as f64 - n as f64 / 2.0 + 0.5) * 0.01)
}

// ---------------------------------------------------------------- gradient suite

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

const OPS: [&str; 23] = [
    "add",
    "sub",
    "mul",
    "add_scalar",
    "mul_scalar",
    "relu",
    "matmul",
    "transpose_last2",
    "reshape",
    "concat",
    "concat_channel",
    "sum_all",
    "mean_all",
    "conv2d",
    "batch_norm",
    "upsample_bilinear",
    "pool2d_max",
    "pool2d_avg",
    "pool2d_ceil",
    "adaptive_avg_pool",
    "softmax",
    "softmax_channel",
    "cross_entropy",
];

fn op_case(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, OpFn) {
    let small = |rng: &mut ChaCha8Rng| rng.random_range(1..4usize);
    match op {
        "add" | "sub" | "mul" => {
            let (a, b, c) = (small(rng), small(rng), small(rng));
            let full = [a, b, c];
            let suffix = rng.random_range(0..3usize);
            let x = uniform(&full, rng);
            let y = uniform(&full[suffix..], rng);
            let f: OpFn = match op {
                "add" => Box::new(|g, v| g.add(v[0], v[1])),
                "sub" => Box::new(|g, v| g.sub(v[0], v[1])),
                _ => Box::new(|g, v| g.mul(v[0], v[1])),
            };
            (vec![x, y], f)
        }
        "add_scalar" | "mul_scalar" => {
            let x = uniform(&[small(rng), small(rng), 3], rng);
            let s: f64 = rng.random_range(-2.0..2.0);
            let f: OpFn = if op == "add_scalar" {
                Box::new(move |g, v| {
                    let y = g.add_scalar(v[0], s);
                    g.mul(y, v[0])
                })
            } else {
                Box::new(move |g, v| Ok(g.mul_scalar(v[0], s)))
            };
            (vec![x], f)
        }
        "relu" => (vec![separated(&[2, small(rng), 3, 3], rng)], Box::new(|g, v| Ok(g.relu(v[0])))),
        "matmul" => {
            let (b, m, k, n) = (small(rng), small(rng) + 1, small(rng) + 1, small(rng) + 1);
            match rng.random_range(0..3) {
                0 => (vec![uniform(&[b, m, k], rng), uniform(&[b, k, n], rng)], Box::new(|g, v| g.matmul(v[0], v[1]))),
                1 => (vec![uniform(&[b, m, k], rng), uniform(&[k, n], rng)], Box::new(|g, v| g.matmul(v[0], v[1]))),
                _ => (vec![uniform(&[m, k], rng), uniform(&[b, k, n], rng)], Box::new(|g, v| g.matmul(v[0], v[1]))),
            }
        }
        "transpose_last2" => (
            vec![uniform(&[small(rng), small(rng) + 1, small(rng) + 1], rng)],
            Box::new(|g, v| g.transpose_last2(v[0])),
        ),
        "reshape" => {
            let (a, b, c) = (small(rng), small(rng), small(rng) + 1);
            (vec![uniform(&[a, b, c], rng)], Box::new(move |g, v| g.reshape(v[0], &[c, a * b])))
        }
        "concat" => {
            let axis = rng.random_range(0..3usize);
            let parts = rng.random_range(2..4usize);
            let base = [small(rng), small(rng), small(rng)];
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = base;
                    s[axis] = small(rng);
                    uniform(&s, rng)
                })
                .collect();
            (inputs, Box::new(move |g, v| g.concat(v, axis)))
        }
        "concat_channel" => {
            let (n, h, w) = (small(rng), small(rng), small(rng));
            (
                vec![uniform(&[n, small(rng), h, w], rng), uniform(&[n, small(rng), h, w], rng)],
                Box::new(|g, v| g.concat_channel(v[0], v[1])),
            )
        }
        "sum_all" | "mean_all" => {
            let x = uniform(&[small(rng), small(rng), small(rng) + 1], rng);
            let f: OpFn = if op == "sum_all" {
                Box::new(|g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    Ok(g.sum_all(sq))
                })
            } else {
                Box::new(|g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    Ok(g.mean_all(sq))
                })
            };
            (vec![x], f)
        }
        "conv2d" => {
            let groups = rng.random_range(1..3usize);
            let cin = groups * rng.random_range(1..3usize);
            let cout = groups * rng.random_range(1..3usize);
            let k = rng.random_range(1..4usize);
            let dilation = rng.random_range(1..3usize);
            let stride = rng.random_range(1..3usize);
            let padding = rng.random_range(0..=k / 2 * dilation);
            let extent = effective_kernel_extent(k, dilation).unwrap();
            let h = extent.saturating_sub(2 * padding).max(1) + rng.random_range(0..3usize);
            let w = extent.saturating_sub(2 * padding).max(1) + rng.random_range(0..3usize);
            let spec = Conv2dSpec {
                stride,
                padding,
                dilation,
                groups,
            };
            let inputs = vec![
                uniform(&[rng.random_range(1..3usize), cin, h, w], rng),
                uniform(&[cout, cin / groups, k, k], rng),
                uniform(&[cout], rng),
            ];
            (inputs, Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec)))
        }
        "batch_norm" => {
            let c = small(rng);
            let training = rng.random_bool(0.5);
            let (n, h, w) = (2, small(rng) + 1, small(rng));
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
            let inputs = vec![uniform(&[n, c, h, w], rng), uniform(&[c], rng), uniform(&[c], rng)];
            (
                inputs,
                Box::new(move |g, v| {
                    let (mut m, mut s) = (mean.clone(), var.clone());
                    let cfg = BnConfig {
                        training,
                        momentum: 0.1,
                        epsilon: 1e-5,
                    };
                    g.batch_norm(v[0], v[1], v[2], BnStats { mean: &mut m, var: &mut s }, cfg)
                }),
            )
        }
        "upsample_bilinear" => {
            let (h, w) = (small(rng) + 1, small(rng) + 1);
            let (oh, ow) = (rng.random_range(1..8usize), rng.random_range(1..8usize));
            let align = rng.random_bool(0.5);
            (
                vec![uniform(&[small(rng), 2, h, w], rng)],
                Box::new(move |g, v| g.upsample_bilinear(v[0], oh, ow, align)),
            )
        }
        "pool2d_max" | "pool2d_avg" => {
            let mode = if op == "pool2d_max" { PoolMode::Max } else { PoolMode::Avg };
            let k = rng.random_range(2..4usize);
            let stride = rng.random_range(1..=k);
            let padding = rng.random_range(0..=k / 2);
            let (h, w) = (k + rng.random_range(0..4usize), k + rng.random_range(0..4usize));
            (
                vec![separated(&[small(rng), small(rng), h, w], rng)],
                Box::new(move |g, v| g.pool2d(v[0], mode, k, stride, padding)),
            )
        }
        "pool2d_ceil" => {
            let mode = if rng.random_bool(0.5) { PoolMode::Max } else { PoolMode::Avg };
            let k = rng.random_range(2..4usize);
            let stride = rng.random_range(1..=k);
            let (h, w) = (k + rng.random_range(0..4usize), k + rng.random_range(0..4usize));
            (
                vec![separated(&[small(rng), small(rng), h, w], rng)],
                Box::new(move |g, v| g.pool2d_ceil(v[0], mode, k, stride)),
            )
        }
        "adaptive_avg_pool" => {
            let (h, w) = (small(rng) + 2, small(rng) + 2);
            let (bh, bw) = (rng.random_range(1..=h), rng.random_range(1..=w));
            (
                vec![uniform(&[small(rng), 2, h, w], rng)],
                Box::new(move |g, v| g.adaptive_avg_pool(v[0], bh, bw)),
            )
        }
        "softmax" => {
            let rank = rng.random_range(2..5usize);
            let shape: Vec<usize> = (0..rank).map(|_| small(rng) + 1).collect();
            let axis = rng.random_range(0..rank);
            (vec![uniform(&shape, rng)], Box::new(move |g, v| g.softmax(v[0], axis)))
        }
        "softmax_channel" => (
            vec![uniform(&[small(rng), small(rng) + 1, small(rng), small(rng)], rng)],
            Box::new(|g, v| g.softmax_channel(v[0])),
        ),
        "cross_entropy" => {
            let (n, c, h, w) = (small(rng), small(rng) + 1, small(rng), small(rng) + 1);
            let mut labels: Vec<u8> = (0..n * h * w)
                .map(|_| if rng.random_bool(0.25) { 255 } else { rng.random_range(0..c) as u8 })
                .collect();
            labels[0] = 0;
            let logits = Tensor::from_fn(vec![n, c, h, w], |_| rng.random_range(-3.0..3.0));
            (vec![logits], Box::new(move |g, v| g.cross_entropy(v[0], &labels, 255)))
        }
        other => panic!("no generator for {other}"),
    }
}

type BlockForward = Box<dyn Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>>;

const BLOCKS: [&str; 8] = [
    "conv",
    "batch_norm_block",
    "conv_bn_relu",
    "conv_bn",
    "residual_identity",
    "residual_projection",
    "separable_conv",
    "skip_fuse",
];

fn block_case(block: &str, rng: &mut ChaCha8Rng, seed: u64) -> (ParamStore<f64>, Tensor<f64>, bool, BlockForward) {
    let mut pb = ParamBuilder::<f64>::new(seed);
    // A single-weight conv channel ahead of batch-statistics BN has an identically zero
    // gradient (scale invariance), which finite differences can only resolve as noise.
    let cin = rng.random_range(2..4usize);
    let cout = rng.random_range(1..4usize);
    let train = rng.random_bool(0.5);
    let (h, w) = (rng.random_range(3..6usize), rng.random_range(3..6usize));
    let input = uniform(&[2, cin, h, w], rng);
    let forward: BlockForward = match block {
        "conv" => {
            let k = rng.random_range(1..4usize);
            let dilation = rng.random_range(1..3usize);
            let spec = Conv2dSpec {
                stride: rng.random_range(1..3usize),
                padding: k / 2 * dilation,
                dilation,
                groups: 1,
            };
            let b = Conv::new(&mut pb, "conv", cin, cout, k, spec, true).unwrap();
            Box::new(move |c, x| b.forward(c, x))
        }
        "batch_norm_block" => {
            let b = BatchNorm::new(&mut pb, "bn", cin).unwrap();
            Box::new(move |c, x| b.forward(c, x))
        }
        "conv_bn_relu" | "conv_bn" => {
            let k = [1, 3][rng.random_range(0..2usize)];
            let (stride, dilation) = (rng.random_range(1..3usize), rng.random_range(1..3usize));
            let b = if block == "conv_bn" {
                ConvBnRelu::conv_bn(&mut pb, "cb", cin, cout, k, stride, dilation).unwrap()
            } else {
                ConvBnRelu::new(&mut pb, "cbr", cin, cout, k, stride, dilation).unwrap()
            };
            Box::new(move |c, x| b.forward(c, x))
        }
        "residual_identity" => {
            let b = ResidualBlock::with_projection(&mut pb, "res", cin, cin, 1, rng.random_range(1..3usize), false).unwrap();
            Box::new(move |c, x| b.forward(c, x))
        }
        "residual_projection" => {
            let stride = rng.random_range(1..3usize);
            let b = ResidualBlock::with_projection(&mut pb, "res", cin, cout, stride, 1, true).unwrap();
            Box::new(move |c, x| b.forward(c, x))
        }
        "separable_conv" => {
            let b = SeparableConv::new(&mut pb, "sep", cin, cout, 3, rng.random_range(1..3usize)).unwrap();
            Box::new(move |c, x| b.forward(c, x))
        }
        "skip_fuse" => {
            // Encoder feature from a conv of the input; decoder from a second conv.
            let spec = Conv2dSpec {
                padding: 1,
                ..Default::default()
            };
            let enc = Conv::new(&mut pb, "enc", cin, cout, 3, spec, true).unwrap();
            let dec_ch = if rng.random_bool(0.5) { cout } else { rng.random_range(1..4usize) };
            let mode = if dec_ch == cout && rng.random_bool(0.5) { FuseMode::Add } else { FuseMode::Concat };
            let dec = Conv::new(&mut pb, "dec", cin, dec_ch, 1, Conv2dSpec::default(), true).unwrap();
            Box::new(move |c, x| {
                let e = enc.forward(c, x)?;
                let d = dec.forward(c, x)?;
                skip_fuse(c, d, e, mode)
            })
        }
        other => panic!("no generator for {other}"),
    };
    (pb.finish(), input, train, forward)
}

#[test]
fn gradient_suite() {
    const INSTANCES: u64 = 20;
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut checked = 0usize;
    for (k, op) in OPS.iter().enumerate() {
        for i in 0..INSTANCES {
            let seed = 1000 * k as u64 + i;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, f) = op_case(op, &mut rng);
            let r = check_inputs(&inputs, f, 1e-5, seed).unwrap_or_else(|e| panic!("{op} instance {i}: {e}"));
            checked += r.checked;
            let e = worst.entry(op.to_string()).or_insert(0.0);
            *e = e.max(r.max_rel_error);
        }
    }
    for (k, block) in BLOCKS.iter().enumerate() {
        for i in 0..INSTANCES {
            let seed = 50_000 + 1000 * k as u64 + i;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (store, input, train, f) = block_case(block, &mut rng, seed);
            let r = check_block_gradients(&store, &input, train, f, 1e-5, seed)
                .unwrap_or_else(|e| panic!("{block} instance {i}: {e}"));
            checked += r.checked;
            let e = worst.entry(block.to_string()).or_insert(0.0);
            *e = e.max(r.max_rel_error);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, &e)| !(e <= TOL))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let pass = failing.is_empty() && elapsed < 120.0;
    report(
        "gradient_suite",
        pass,
        &format!(
            "{} ops + {} blocks x {INSTANCES} instances, {checked} partials, max rel error {max:.2e} <= {TOL:e}, {elapsed:.1}s < 120s{}",
            OPS.len(),
            BLOCKS.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(" ")) }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- dilation oracle

/// `k x k` kernel dilated by `d` written out as a dense kernel of extent `d(k-1)+1`.
fn interleave(w: &Tensor<f64>, d: usize) -> Tensor<f64> {
    let s = w.shape();
    let (o, i, k) = (s[0], s[1], s[2]);
    let e = d * (k - 1) + 1;
    let mut out = Tensor::zeros(vec![o, i, e, e]);
    for a in 0..o * i {
        for y in 0..k {
            for x in 0..k {
                out.data_mut()[a * e * e + y * d * e + x * d] = w.data()[a * k * k + y * k + x];
            }
        }
    }
    out
}

#[test]
fn dilation_oracle() {
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let (cin, cout) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
        let (h, w) = (rng.random_range(5..12usize), rng.random_range(5..12usize));
        let stride = rng.random_range(1..3usize);
        let padding = rng.random_range(0..4usize);
        let x = uniform(&[rng.random_range(1..3usize), cin, h, w], &mut rng);
        let w3 = uniform(&[cout, cin, 3, 3], &mut rng);
        let w5 = interleave(&w3, 2);
        let mut g = Graph::inference();
        let (xv, a, b) = (g.constant(x), g.constant(w3), g.constant(w5));
        let spec = |dilation| Conv2dSpec {
            stride,
            padding,
            dilation,
            groups: 1,
        };
        let y3 = g.conv2d(xv, a, None, spec(2)).unwrap();
        let y5 = g.conv2d(xv, b, None, spec(1)).unwrap();
        assert_eq!(g.shape(y3), g.shape(y5));
        worst = worst.max(g.value(y3).max_abs_diff(g.value(y5)));
    }
    let extent = effective_kernel_extent(3, 2).unwrap();
    let mut pb = ParamBuilder::<f64>::new(0);
    let dilated = Conv::new(&mut pb, "d", 1, 1, 3, Conv2dSpec { dilation: 2, ..Default::default() }, false).unwrap();
    let dense = Conv::new(&mut pb, "e", 1, 1, 5, Conv2dSpec::default(), false).unwrap();
    let store = pb.finish();
    let (n3, n5) = (store.tensor(dilated.weight).numel(), store.tensor(dense.weight).numel());
    let pass = worst <= 1e-6 && extent == 5 && n3 == 9 && n5 == 25;
    report(
        "dilation_oracle",
        pass,
        &format!("50 cases, max abs diff {worst:.2e} <= 1e-6; extent(3,2)={extent}; weights {n3} vs {n5}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- poly schedule

#[test]
fn poly_schedule() {
    let max_iter = 160_000u64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seen: BTreeSet<u64> = [0, max_iter].into();
    while seen.len() < 1000 {
        seen.insert(rng.random_range(1..max_iter));
    }
    let points: Vec<u64> = seen.into_iter().collect();
    let mut worst = 0.0f64;
    for &i in &points {
        let got = poly_lr(i, max_iter, 0.01, 0.9).unwrap();
        let frac = (max_iter - i) as f64 / max_iter as f64;
        let oracle = if frac == 0.0 { 0.0 } else { 0.01 * (0.9 * frac.ln()).exp() };
        worst = worst.max((got - oracle).abs());
    }
    let monotone = points
        .windows(2)
        .all(|w| poly_lr(w[1], max_iter, 0.01, 0.9).unwrap() < poly_lr(w[0], max_iter, 0.01, 0.9).unwrap());
    let start = poly_lr(0, max_iter, 0.01, 0.9).unwrap();
    let end = poly_lr(max_iter, max_iter, 0.01, 0.9).unwrap();
    let pass = points.len() >= 1000 && worst <= 1e-12 && monotone && start == 0.01 && end == 0.0;
    report(
        "poly_schedule",
        pass,
        &format!(
            "{} points, max abs diff {worst:.2e} <= 1e-12, strictly decreasing={monotone}, lr(0)={start}, lr(max)={end}",
            points.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- overfit experiment

#[test]
fn overfit_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let list = write_synthetic_shapes(tmp.path(), 8, 64, 0).unwrap();
    let records = parse_file_list(&list).unwrap();
    let train = Loader::new(records.clone(), vec![], 8, 0, true, 1).unwrap();
    let eval = Loader::new(records, vec![], 1, 0, false, 1).unwrap();
    let mut all = true;
    for name in MODEL_NAMES {
        let start = Instant::now();
        let settings = TrainSettings {
            max_iter: 500,
            ..TrainSettings::default()
        };
        let model = SegModel::<f32>::build(&ModelSpec::preset(name, 3).unwrap(), 0).unwrap();
        let state = TrainState::new(model, &settings).unwrap();
        let mut trainer = Trainer::new(settings, state, &train, None).unwrap();
        let mut losses = Vec::new();
        while !trainer.is_done() {
            losses.push(trainer.step().unwrap().loss);
        }
        let metrics = evaluate(&mut trainer.state.model, &eval, 255).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let pass = metrics.miou >= 0.95 && secs < 600.0 && losses[499] < losses[9];
        all &= pass;
        report(
            &format!("overfit_experiment[{name}]"),
            pass,
            &format!(
                "train mIoU {:.4} >= 0.95 after 500 iterations, {secs:.0}s < 600s, loss {:.4} -> {:.4}",
                metrics.miou, losses[9], losses[499]
            ),
        );
    }
    report("overfit_experiment", all, "all six presets");
    assert!(all);
}

// ---------------------------------------------------------------- mIoU oracle

fn brute_force_miou(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (pc, gc) = (p == c, g == c);
            inter += (pc && gc) as u64;
            union += (pc || gc) as u64;
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

#[test]
fn miou_oracle() {
    let mut mismatches = 0;
    let mut undefined = 0;
    for case in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let classes = rng.random_range(1..=4usize);
        let n = rng.random_range(1..=8usize) * rng.random_range(1..=8usize);
        let gt: Vec<u8> = (0..n)
            .map(|_| if rng.random_bool(0.15) { 255 } else { rng.random_range(0..classes) as u8 })
            .collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes) as u8).collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.update(&pred, &gt, 255).unwrap();
        match (cm.mean_iou().ok(), brute_force_miou(&pred, &gt, classes, 255)) {
            (Some(a), Some(b)) if a == b => {}
            (None, None) => undefined += 1,
            _ => mismatches += 1,
        }
    }
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&[0, 1, 1, 1], &[0, 0, 1, 1], 255).unwrap();
    let worked = cm.mean_iou().unwrap();
    let pass = mismatches == 0 && (worked - 0.583_333_333_333).abs() <= 1e-9;
    report(
        "miou_oracle",
        pass,
        &format!("200 grids, {mismatches} mismatches ({undefined} all-ignored agreed as undefined); worked example {worked:.9}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- data checker

#[test]
fn data_checker() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let list = write_synthetic_shapes(&dir.join("clean"), 20, 16, 3).unwrap();
    let clean = parse_file_list(&list).unwrap();
    let base = &clean[0];
    let image = segkit::data::read_image(&base.image_path).unwrap();

    let mut entries: Vec<(String, Option<ViolationKind>)> = clean
        .iter()
        .map(|r| (format!("{} {}", r.image_path.display(), r.label_path.display()), None))
        .collect();
    for i in 0..5 {
        let img = dir.join(format!("bad/missing_img_{i}.png"));
        entries.push((format!("{} {}", img.display(), base.label_path.display()), Some(ViolationKind::MissingFile)));

        let junk = dir.join(format!("bad/junk_{i}.png"));
        fs::create_dir_all(junk.parent().unwrap()).unwrap();
        fs::write(&junk, format!("not a png {i}")).unwrap();
        entries.push((format!("{} {}", base.image_path.display(), junk.display()), Some(ViolationKind::Undecodable)));

        let small = dir.join(format!("bad/small_{i}.png"));
        write_label(&small, 8, 8 + i, &vec![0; 8 * (8 + i)]).unwrap();
        entries.push((format!("{} {}", base.image_path.display(), small.display()), Some(ViolationKind::SizeMismatch)));

        let oor = dir.join(format!("bad/oor_{i}.png"));
        let mut label = vec![0u8; 16 * 16];
        label[17 * i] = 3 + i as u8;
        write_label(&oor, 16, 16, &label).unwrap();
        let img = dir.join(format!("bad/img_{i}.png"));
        write_image(&img, &image).unwrap();
        entries.push((format!("{} {}", img.display(), oor.display()), Some(ViolationKind::LabelOutOfRange)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    entries.shuffle(&mut rng);
    let text: String = entries.iter().map(|(l, _)| format!("{l}\n")).collect();
    let list_path = dir.join("mixed.txt");
    fs::write(&list_path, text).unwrap();

    let records: Vec<SampleRecord> = parse_file_list(&list_path).unwrap();
    let checked = check_dataset(&records, 3, 255);
    let expected: BTreeMap<usize, ViolationKind> = entries
        .iter()
        .enumerate()
        .filter_map(|(i, (_, k))| k.map(|k| (i + 1, k)))
        .collect();
    let found: BTreeMap<usize, ViolationKind> = checked.violations.iter().map(|v| (v.line_no, v.kind)).collect();
    let detected = expected.iter().filter(|(l, k)| found.get(l) == Some(k)).count();
    let false_positives = found.keys().filter(|l| !expected.contains_key(l)).count();
    let one_per_line = checked.violations.len() == found.len();
    let pass = detected == 20 && false_positives == 0 && one_per_line && expected.len() == 20 && records.len() == 40;
    report(
        "data_checker",
        pass,
        &format!("{detected}/20 corrupted records flagged with the right category, {false_positives} false positives over 20 clean"),
    );
    assert!(pass, "{checked}");
}

// ---------------------------------------------------------------- determinism and round trips

fn aug_chain() -> Vec<Transform> {
    vec![
        Transform::RandomScale { lo: 0.75, hi: 1.25 },
        Transform::RandomHflip { p: 0.5 },
        Transform::RandomBrightness { delta: 0.2 },
        Transform::RandomCropPad {
            crop_h: 64,
            crop_w: 64,
            fill: None,
            ignore_index: 255,
        },
        Transform::Normalize {
            mean: [0.5; 3],
            std: [0.25; 3],
        },
    ]
}

fn small_spec() -> ModelSpec {
    ModelSpec::preset("deeplabv3p", 3).unwrap()
}

fn run_to_checkpoint(list: &Path, out: &Path, iters: u64) -> Vec<u8> {
    let train = Loader::new(parse_file_list(list).unwrap(), aug_chain(), 2, 5, true, 1).unwrap();
    let settings = TrainSettings {
        max_iter: iters,
        seed: 5,
        output_dir: Some(out.to_path_buf()),
        ..TrainSettings::default()
    };
    let state = TrainState::new(SegModel::<f32>::build(&small_spec(), 5).unwrap(), &settings).unwrap();
    Trainer::new(settings, state, &train, None).unwrap().run(|_| {}).unwrap();
    fs::read(out.join(LATEST_CHECKPOINT)).unwrap()
}

#[test]
fn determinism_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let list = write_synthetic_shapes(&tmp.path().join("data"), 6, 48, 2).unwrap();

    let a = run_to_checkpoint(&list, &tmp.path().join("a"), 6);
    let b = run_to_checkpoint(&list, &tmp.path().join("b"), 6);
    let bit_identical = a == b;

    // Resume: 20 straight iterations versus 10, save, reload into a differently seeded model, 10 more.
    let train = Loader::new(parse_file_list(&list).unwrap(), aug_chain(), 2, 9, true, 1).unwrap();
    let settings = TrainSettings {
        max_iter: 20,
        seed: 9,
        ..TrainSettings::default()
    };
    let straight: Vec<f64> = {
        let state = TrainState::new(SegModel::<f32>::build(&small_spec(), 9).unwrap(), &settings).unwrap();
        let mut t = Trainer::new(settings.clone(), state, &train, None).unwrap();
        (0..20).map(|_| t.step().unwrap().loss).collect()
    };
    let resumed: Vec<f64> = {
        let state = TrainState::new(SegModel::<f32>::build(&small_spec(), 9).unwrap(), &settings).unwrap();
        let mut t = Trainer::new(settings.clone(), state, &train, None).unwrap();
        let mut losses: Vec<f64> = (0..10).map(|_| t.step().unwrap().loss).collect();
        let path = tmp.path().join("mid.ckpt");
        t.state.to_checkpoint(None).save(&path).unwrap();
        drop(t);
        let fresh = SegModel::<f32>::build(&small_spec(), 1234).unwrap();
        let state = TrainState::resume(fresh, &Checkpoint::load(&path).unwrap(), &settings).unwrap();
        let mut t = Trainer::new(settings.clone(), state, &train, None).unwrap();
        losses.extend((0..10).map(|_| t.step().unwrap().loss));
        losses
    };
    let trajectory_identical = straight.iter().map(|l| l.to_bits()).eq(resumed.iter().map(|l| l.to_bits()));

    // Bundle versus config + weights through the CLI entry points.
    let config_text = "\
model:
  name: unet
dataset:
  num_classes: 3
  train: data/train.txt
  transforms:
    - random_hflip
    - random_crop_pad
    - {name: normalize, mean: [0.4, 0.5, 0.6], std: [0.3, 0.2, 0.25]}
schedule: {max_iter: 4, batch_size: 2, crop_h: 64, crop_w: 64, eval_interval: 0, log_interval: 2}
output_dir: run
";
    let config_path = tmp.path().join("run.yaml");
    fs::write(&config_path, config_text).unwrap();
    let cfg = parse_config(&config_path, &[]).unwrap();
    let mut sink = Vec::new();
    cli::cmd_train(&cfg, false, &mut sink).unwrap();
    let weights = cfg.output_dir.join(LATEST_CHECKPOINT);
    let bundle_path = tmp.path().join("export/model.bundle");
    cli::cmd_export(&cfg, &weights, &bundle_path).unwrap();
    let bundle_bytes = fs::read(&bundle_path).unwrap();
    let tmp_str = tmp.path().to_string_lossy().into_owned();
    let no_paths = !bundle_bytes.windows(tmp_str.len()).any(|w| w == tmp_str.as_bytes());

    let image = parse_file_list(&list).unwrap()[0].image_path.clone();
    let (inf_b, w_b) = cli::load_bundle(&bundle_path).unwrap();
    let (lb, cb) = cli::cmd_predict(&inf_b, &w_b, &image, &tmp.path().join("pred_bundle")).unwrap();
    let (ld, cd) = cli::cmd_predict(&cfg.inference(), &Checkpoint::load(&weights).unwrap(), &image, &tmp.path().join("pred_direct")).unwrap();
    let predictions_identical = fs::read(&lb).unwrap() == fs::read(&ld).unwrap() && fs::read(&cb).unwrap() == fs::read(&cd).unwrap();

    // Config snapshot: parse(snapshot) reproduces the config, from any directory.
    let snapshot = fs::read_to_string(cfg.output_dir.join(cli::SNAPSHOT_FILE)).unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    let snap_path = elsewhere.path().join("again.yaml");
    fs::write(&snap_path, &snapshot).unwrap();
    let again = parse_config(&snap_path, &[]).unwrap();
    let inference_round_trip = InferenceConfig::parse(&inf_b.snapshot()).unwrap() == cfg.inference() && inf_b == cfg.inference();
    let snapshot_round_trip = again == cfg && again.snapshot() == snapshot && inference_round_trip;

    let pass = bit_identical && trajectory_identical && predictions_identical && no_paths && snapshot_round_trip;
    report(
        "determinism_and_round_trips",
        pass,
        &format!(
            "seeded checkpoints bit-identical={bit_identical}; resume trajectory identical over 10 iterations={trajectory_identical}; \
             bundle predictions byte-identical={predictions_identical} (bundle path-free={no_paths}); config snapshot round trip={snapshot_round_trip}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- augmentation invariants

fn sample_strategy() -> impl Strategy<Value = Sample> {
    (1usize..12, 1usize..12, any::<u64>(), 1u8..6, prop::bool::ANY).prop_map(|(h, w, seed, classes, with_ignore)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::from_fn(vec![3, h, w], |_| rng.random_range(0.0f32..1.0));
        let label = (0..h * w)
            .map(|_| if with_ignore && rng.random_bool(0.1) { 255 } else { rng.random_range(0..classes) })
            .collect();
        Sample::new(image, label).unwrap()
    })
}

fn values(label: &[u8]) -> BTreeSet<u8> {
    label.iter().copied().collect()
}

fn invariants_hold() -> std::result::Result<(), String> {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(128));
    let checks: [(&str, Box<dyn Fn(Sample, u64) -> std::result::Result<(), TestCaseError>>); 4] = [
        (
            "flip_involution",
            Box::new(|s, _| {
                prop_assert_eq!(hflip(&hflip(&s)), s);
                Ok(())
            }),
        ),
        (
            "scale_one_identity",
            Box::new(|s, seed| {
                prop_assert_eq!(&scale(&s, 1.0).unwrap(), &s);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = Transform::RandomScale { lo: 1.0, hi: 1.0 };
                prop_assert_eq!(t.apply(s.clone(), &mut rng).unwrap(), s);
                Ok(())
            }),
        ),
        (
            "label_value_set",
            Box::new(|s, seed| {
                let before = values(&s.label);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f: f64 = rng.random_range(0.3..3.0);
                let exact = [
                    hflip(&s),
                    brightness(&s, rng.random_range(-0.5f32..0.5)),
                    normalize(&s, [0.5; 3], [0.2; 3]).unwrap(),
                    scale(&s, f.max(1.0)).unwrap(),
                ];
                for out in &exact {
                    prop_assert_eq!(values(&out.label), before.clone());
                }
                let mut allowed = before.clone();
                allowed.insert(255);
                let chain = [
                    Transform::RandomScale { lo: 0.3, hi: 3.0 },
                    Transform::RandomHflip { p: 0.5 },
                    Transform::RandomBrightness { delta: 0.3 },
                    Transform::RandomCropPad {
                        crop_h: rng.random_range(1..16),
                        crop_w: rng.random_range(1..16),
                        fill: None,
                        ignore_index: 255,
                    },
                    Transform::Normalize {
                        mean: [0.4; 3],
                        std: [0.3; 3],
                    },
                ];
                for t in &chain {
                    let out = t.apply(s.clone(), &mut rng).unwrap();
                    prop_assert!(values(&out.label).is_subset(&allowed), "{} produced new label values", t.name());
                }
                let scaled = scale(&s, f).unwrap();
                prop_assert!(values(&scaled.label).is_subset(&before));
                Ok(())
            }),
        ),
        (
            "pad_area_ignore_count",
            Box::new(|s, seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (h, w) = (s.height(), s.width());
                let (ch, cw) = (h + rng.random_range(0..6usize), w + rng.random_range(0..6usize));
                let pad = ch * cw - h * w;
                let ignored_before = s.label.iter().filter(|&&l| l == 255).count();
                let t = Transform::RandomCropPad {
                    crop_h: ch,
                    crop_w: cw,
                    fill: Some([0.0; 3]),
                    ignore_index: 255,
                };
                let out = t.apply(s.clone(), &mut rng).unwrap();
                let ignored = out.label.iter().filter(|&&l| l == 255).count();
                prop_assert_eq!(ignored, pad + ignored_before);

                // A crop smaller than the image in one axis still pads the other.
                let (ch2, cw2) = (rng.random_range(1..=h), w + rng.random_range(0..4usize));
                let top = rng.random_range(0..=h - ch2);
                let out = crop_pad(&s, ch2, cw2, top, 0, [0.0; 3], 255).unwrap();
                let ignored = out.label.iter().filter(|&&l| l == 255).count();
                prop_assert!(ignored >= ch2 * cw2 - ch2 * w);
                Ok(())
            }),
        ),
    ];
    for (name, check) in &checks {
        runner
            .run(&(sample_strategy(), any::<u64>()), |(s, seed)| check(s, seed))
            .map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(())
}

#[test]
fn augmentation_invariants() {
    let result = invariants_hold();
    report(
        "augmentation_invariants",
        result.is_ok(),
        &match &result {
            Ok(()) => "flip involution, scale-1 identity, label value set, pad-area ignore count; 128 cases each".to_string(),
            Err(e) => e.clone(),
        },
    );
    assert!(result.is_ok(), "{result:?}");
}
