//! Analytic gradients against central finite differences.

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use uvq_core::assignment::{CodebookSource, LayerAssignment};
use uvq_core::codebook::Codebook;
use uvq_core::nn::{Compress, Layer, Mode, NetBuilder, ParamId, ParamKind, TinyNet};
use uvq_core::objective::{
    backward_to_logits, kd_loss, kd_loss_grad, reg_loss, task_loss, task_loss_grad, total_loss,
    LossWeights,
};
use uvq_core::{rng, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn config() -> Config {
    Config {
        cases: 128,
        rng_seed: RngSeed::Fixed(0x6772_6164),
        failure_persistence: None,
        ..Config::default()
    }
}

fn randn(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(r))
}

/// Gradients below this norm are compared absolutely; a bias feeding batch
/// norm has an exactly zero gradient and finite differences only see noise.
const FLOOR: f64 = 1e-5;

/// Relative error of two gradient vectors in the Euclidean norm.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(FLOOR)
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Dense,
    DenseRelu,
    Conv,
    BatchNormTrain,
    BatchNormEval,
    Softmax,
    ConvStack,
}

const KINDS: [Kind; 7] = [
    Kind::Dense,
    Kind::DenseRelu,
    Kind::Conv,
    Kind::BatchNormTrain,
    Kind::BatchNormEval,
    Kind::Softmax,
    Kind::ConvStack,
];

fn instance(kind: Kind, seed: u64) -> (TinyNet, Tensor, Mode) {
    let mut r = rng::seeded(seed);
    let batch = r.random_range(2..5);
    let mut b_rng = rng::seeded(rng::derive(seed, 1));
    let mut b = NetBuilder::new("probe", &mut b_rng);
    let (shape, mode): (Vec<usize>, Mode) = match kind {
        Kind::Dense => {
            let (i, o) = (r.random_range(1..6), r.random_range(1..6));
            b.input(&[i]).dense(i, o, Compress::Universal).block("a");
            (vec![i], Mode::Eval)
        }
        Kind::DenseRelu => {
            let (i, h) = (r.random_range(2..6), r.random_range(2..8));
            b.input(&[i])
                .dense(i, h, Compress::Keep)
                .relu()
                .block("a")
                .dense(h, 3, Compress::Universal)
                .block("b");
            (vec![i], Mode::Eval)
        }
        Kind::Conv => {
            let (ci, co, hh, ww) = (
                r.random_range(1..3),
                r.random_range(1..4),
                r.random_range(2..5),
                r.random_range(2..5),
            );
            b.input(&[ci, hh, ww])
                .conv(ci, co, hh, ww, Compress::Universal)
                .block("a");
            (vec![ci, hh, ww], Mode::Eval)
        }
        Kind::BatchNormTrain | Kind::BatchNormEval => {
            let (ci, co) = (r.random_range(1..3), r.random_range(1..4));
            b.input(&[ci, 3, 3])
                .conv(ci, co, 3, 3, Compress::Keep)
                .batchnorm(co)
                .block("a");
            let mode = if matches!(kind, Kind::BatchNormTrain) {
                Mode::Train
            } else {
                Mode::Eval
            };
            (vec![ci, 3, 3], mode)
        }
        Kind::Softmax => {
            let (i, o) = (r.random_range(1..5), r.random_range(2..6));
            b.input(&[i])
                .dense(i, o, Compress::PerLayer)
                .softmax()
                .block("a");
            (vec![i], Mode::Eval)
        }
        Kind::ConvStack => {
            b.input(&[1, 3, 3])
                .conv(1, 2, 3, 3, Compress::Keep)
                .batchnorm(2)
                .relu()
                .block("a");
            b.flatten()
                .dense(18, 3, Compress::PerLayer)
                .softmax()
                .block("b");
            (vec![1, 3, 3], Mode::Train)
        }
    };
    let mut net = b.finish();
    // non-trivial affine and running statistics
    for layer in &mut net.layers {
        match layer {
            Layer::Dense(l) => l.bias = Some(randn(&[l.weight.shape()[0]], &mut r)),
            Layer::Conv3x3(l) => l.bias = Some(randn(&[l.weight.shape()[0]], &mut r)),
            Layer::BatchNorm(bn) => {
                let c = bn.gamma.len();
                bn.gamma = randn(&[c], &mut r).map(|v| 1.0 + 0.3 * v);
                bn.beta = randn(&[c], &mut r);
                bn.running_mean = randn(&[c], &mut r);
                bn.running_var = Tensor::from_fn(&[c], |_| r.random_range(0.5..2.0));
            }
            _ => {}
        }
    }
    let mut full = vec![batch];
    full.extend(shape);
    let x = randn(&full, &mut r);
    (net, x, mode)
}

/// `L = Σ out·G + Σ_blocks Σ tap·T`, a linear probe of every output.
fn probe_loss(
    net: &TinyNet,
    x: &Tensor,
    mode: Mode,
    g: &Tensor,
    taps: &BTreeMap<String, Tensor>,
) -> f64 {
    let names: Vec<&str> = taps.keys().map(String::as_str).collect();
    let (out, feats) = net.forward_taps(x, &names, mode).unwrap();
    let mut l: f64 = out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
    for (name, t) in taps {
        l += feats[name]
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    l
}

/// Smallest |pre-activation| feeding a ReLU; finite differences across a
/// kink are meaningless.
fn relu_margin(net: &TinyNet, x: &Tensor, mode: Mode) -> f64 {
    let trace = net.forward(x, mode).unwrap();
    let mut m = f64::INFINITY;
    for (i, l) in net.layers.iter().enumerate() {
        if matches!(l, Layer::Relu) {
            for v in trace.activation(i).data() {
                m = m.min(v.abs());
            }
        }
    }
    m
}

fn check_layer_gradients(kind: Kind, seed: u64) -> Result<(), TestCaseError> {
    let (net, x, mode) = instance(kind, seed);
    prop_assume!(relu_margin(&net, &x, mode) > 1e-3);
    let mut r = rng::seeded(rng::derive(seed, 2));
    let trace = net.forward(&x, mode).unwrap();
    let g = randn(trace.output().shape(), &mut r);
    let first = net.blocks[0].clone();
    let taps: BTreeMap<String, Tensor> = if net.blocks.len() > 1 {
        [(
            first.name.clone(),
            randn(trace.activation(first.end).shape(), &mut r),
        )]
        .into_iter()
        .collect()
    } else {
        BTreeMap::new()
    };
    let grads = net.backward(&trace, &g, &taps).unwrap();

    for id in net.param_ids().into_iter().filter(|id| id.kind.trainable()) {
        let analytic = grads.get(id).unwrap().data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let mut p = net.clone();
            p.param_mut(id).unwrap().data_mut()[i] += H;
            let up = probe_loss(&p, &x, mode, &g, &taps);
            p.param_mut(id).unwrap().data_mut()[i] -= 2.0 * H;
            let down = probe_loss(&p, &x, mode, &g, &taps);
            numeric.push((up - down) / (2.0 * H));
        }
        let e = rel_err(&analytic, &numeric);
        prop_assert!(e < TOL, "{kind:?} {}: relative error {e:.3e}", id.name());
    }

    let analytic = grads.input.unwrap().into_data();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let up = probe_loss(&net, &xp, mode, &g, &taps);
        xp.data_mut()[i] -= 2.0 * H;
        let down = probe_loss(&net, &xp, mode, &g, &taps);
        numeric.push((up - down) / (2.0 * H));
    }
    let e = rel_err(&analytic, &numeric);
    prop_assert!(e < TOL, "{kind:?} input: relative error {e:.3e}");
    Ok(())
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn dense(seed in any::<u64>()) {
        check_layer_gradients(Kind::Dense, seed)?;
    }

    #[test]
    fn dense_relu_with_tap(seed in any::<u64>()) {
        check_layer_gradients(Kind::DenseRelu, seed)?;
    }

    #[test]
    fn conv3x3(seed in any::<u64>()) {
        check_layer_gradients(Kind::Conv, seed)?;
    }

    #[test]
    fn batchnorm_batch_statistics(seed in any::<u64>()) {
        check_layer_gradients(Kind::BatchNormTrain, seed)?;
    }

    #[test]
    fn batchnorm_running_statistics(seed in any::<u64>()) {
        check_layer_gradients(Kind::BatchNormEval, seed)?;
    }

    #[test]
    fn softmax_output(seed in any::<u64>()) {
        check_layer_gradients(Kind::Softmax, seed)?;
    }

    #[test]
    fn conv_bn_relu_flatten_dense_softmax(seed in any::<u64>()) {
        check_layer_gradients(Kind::ConvStack, seed)?;
    }
}

#[test]
fn every_layer_kind_is_covered() {
    let mut seen = std::collections::BTreeSet::new();
    for (i, &k) in KINDS.iter().enumerate() {
        let (net, _, _) = instance(k, i as u64);
        seen.extend(net.layers.iter().map(Layer::kind_name));
    }
    for name in [
        "dense",
        "conv2d-3x3",
        "batchnorm",
        "relu",
        "flatten",
        "softmax-output",
    ] {
        assert!(seen.contains(name), "{name} not exercised");
    }
}

/// A two-layer net whose middle layer is driven by soft assignments.
struct LogitCase {
    fp: TinyNet,
    q: TinyNet,
    la: LayerAssignment,
    cb: Codebook,
    x: Tensor,
    y: Tensor,
    weights: LossWeights,
}

fn logit_case(seed: u64) -> LogitCase {
    let mut r = rng::seeded(seed);
    let d = r.random_range(1..4);
    let k = r.random_range(2..9);
    let n = r.random_range(1..=k);
    let (i, h, o) = (
        r.random_range(2..5),
        r.random_range(1..7),
        r.random_range(1..4),
    );
    let mut b_rng = rng::seeded(rng::derive(seed, 1));
    let mut b = NetBuilder::new("logits", &mut b_rng);
    b.input(&[i]).dense(i, h, Compress::Keep).relu().block("a");
    b.dense(h, o, Compress::Universal).block("b");
    b.dense(o, 2, Compress::Keep).softmax().block("c");
    let fp = b.finish();

    let normal = Normal::new(0.0, 0.5).unwrap();
    let cb = Codebook::new(k, d, (0..k * d).map(|_| normal.sample(&mut r)).collect()).unwrap();
    let count = o * h.div_ceil(d);
    let mut candidates = Vec::with_capacity(count * n);
    for _ in 0..count {
        candidates.extend(
            rand::seq::index::sample(&mut r, k, n)
                .into_iter()
                .map(|v| v as u32),
        );
    }
    let logits: Vec<f64> = (0..count * n)
        .map(|_| 2.0 * r.random::<f64>() - 1.0)
        .collect();
    let mut la =
        LayerAssignment::from_parts(2, o, h, d, n, CodebookSource::Universal, candidates, logits)
            .unwrap();
    for s in 0..count {
        if r.random_bool(0.25) {
            la.freeze(s, r.random_range(0..n));
        }
    }
    let batch = r.random_range(1..5);
    let x = randn(&[batch, i], &mut r);
    let y = Tensor::from_fn(&[batch, 2], |j| if j % 2 == 0 { 1.0 } else { 0.0 });
    let weights = LossWeights {
        task: r.random_range(0.1..2.0),
        kd: r.random_range(0.0..2.0),
        reg: r.random_range(0.0..2.0),
    };
    let mut q = fp.clone();
    for l in &mut q.layers {
        if let Layer::Dense(dl) = l {
            dl.weight = dl.weight.map(|v| v + 0.1);
        }
    }
    LogitCase {
        fp,
        q,
        la,
        cb,
        x,
        y,
        weights,
    }
}

fn with_soft(c: &LogitCase, la: &LayerAssignment) -> TinyNet {
    let mut q = c.q.clone();
    q.param_mut(ParamId {
        layer: 2,
        kind: ParamKind::Weight,
    })
    .unwrap()
    .data_mut()
    .copy_from_slice(&la.reconstruct_soft(&c.cb));
    q
}

fn objective(c: &LogitCase, la: &LayerAssignment) -> f64 {
    let taps = ["a", "b", "c"];
    let (_, fp_feats) = c.fp.forward_taps(&c.x, &taps, Mode::Eval).unwrap();
    let q = with_soft(c, la);
    let (out, q_feats) = q.forward_taps(&c.x, &taps, Mode::Eval).unwrap();
    let t = task_loss(&out, &c.y).unwrap();
    let kd = kd_loss(&fp_feats, &q_feats).unwrap();
    total_loss(t, kd, reg_loss(std::slice::from_ref(la)), c.weights).total
}

fn analytic_logit_grads(c: &LogitCase) -> Vec<f64> {
    let taps = ["a", "b", "c"];
    let (_, fp_feats) = c.fp.forward_taps(&c.x, &taps, Mode::Eval).unwrap();
    let q = with_soft(c, &c.la);
    let mut session = uvq_core::nn::Session::new(&q);
    let trace = session.forward(&c.x, Mode::Eval).unwrap();
    let q_feats = q.taps(trace, &taps).unwrap();
    let out_grad = task_loss_grad(trace.output(), &c.y)
        .unwrap()
        .map(|g| g * c.weights.task);
    let tap_grads: BTreeMap<String, Tensor> = kd_loss_grad(&fp_feats, &q_feats)
        .unwrap()
        .into_iter()
        .map(|(k, g)| (k, g.map(|v| v * c.weights.kd)))
        .collect();
    let grads = backward_to_logits(
        &session,
        &out_grad,
        &tap_grads,
        std::slice::from_ref(&c.la),
        &c.cb,
        c.weights.reg,
    )
    .unwrap();
    grads.logits.into_iter().next().unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn logit_gradients_through_soft_reconstruction(seed in any::<u64>()) {
        let c = logit_case(seed);
        prop_assume!(relu_margin(&with_soft(&c, &c.la), &c.x, Mode::Eval) > 1e-3);
        let analytic = analytic_logit_grads(&c);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let mut la = c.la.clone();
            la.logits_mut()[i] += H;
            let up = objective(&c, &la);
            la.logits_mut()[i] -= 2.0 * H;
            let down = objective(&c, &la);
            numeric.push((up - down) / (2.0 * H));
        }
        let e = rel_err(&analytic, &numeric);
        prop_assert!(e < TOL, "relative error {e:.3e}");
        for s in 0..c.la.count() {
            if c.la.frozen(s).is_some() {
                prop_assert!(analytic[s * c.la.n..(s + 1) * c.la.n].iter().all(|&g| g == 0.0));
            }
        }
    }
}
