#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sqcpc::cpc::nce_loss_op;
use sqcpc::diffcore::{grad_check, Activation, Graph, NormMode, RunningStats, Tensor, Var};
use sqcpc::model::{ModelBundle, NetworkConfig};
use sqcpc::semisup::{encode_sequence, supervised_loss};

pub type Inputs = Vec<Tensor<f64>>;
/// Builds the checked function on `g` from input tensors and returns the
/// output plus one variable per input (the ones gradients are taken for).
pub type Forward = Box<dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> sqcpc::Result<(Var, Vec<Var>)>>;

pub struct OpCase {
    pub name: &'static str,
    pub make: Box<dyn Fn(&mut ChaCha8Rng) -> Inputs>,
    pub forward: Forward,
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Worst relative error over all inputs of `case` for one seed. The output
/// is contracted with fixed random weights so every output element
/// contributes to the checked scalar.
pub fn case_error(case: &OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (case.make)(&mut rng);
    let (out_shape, checked) = {
        let mut g = Graph::new();
        let (out, vars) = (case.forward)(&mut g, &inputs).unwrap();
        (g.value(out).shape().to_vec(), vars.len())
    };
    let weights = randn(&out_shape, &mut rng);
    let mut worst = 0.0f64;
    for i in 0..checked {
        let err = grad_check(
            |p| {
                let mut local = inputs.clone();
                local[i] = p.clone();
                let mut g = Graph::new();
                let (out, vars) = (case.forward)(&mut g, &local)?;
                let loss = g.weighted_sum(out, &weights)?;
                let grads = g.backward(loss)?;
                Ok((g.value(loss).item(), grads.wrt(vars[i])))
            },
            &inputs[i],
            1e-6,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

fn leaves(g: &mut Graph<f64>, xs: &[Tensor<f64>]) -> Vec<Var> {
    xs.iter().map(|x| g.leaf(x.clone())).collect()
}

/// Case over plain graph leaves.
fn simple(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> Inputs + 'static,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> sqcpc::Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        make: Box::new(make),
        forward: Box::new(move |g, xs| {
            let vs = leaves(g, xs);
            Ok((f(g, &vs)?, vs))
        }),
    }
}

pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        in_channels: 1,
        height: 8,
        width: 8,
        widths: vec![2, 3],
        strides: vec![2, 2],
        num_outputs: 2,
    }
}

/// Model with its parameters replaced by `params` (in bundle order).
fn with_params(base: &ModelBundle<f64>, params: &[Tensor<f64>]) -> ModelBundle<f64> {
    let mut m = base.clone();
    for (p, v) in m.params_mut().iter_mut().zip(params) {
        p.value = v.clone();
    }
    m
}

/// Case over `extra` data inputs followed by every model parameter.
fn model_case(
    name: &'static str,
    make_extra: impl Fn(&mut ChaCha8Rng) -> Inputs + 'static,
    f: impl Fn(&mut Graph<f64>, &sqcpc::model::BoundModel, &ModelBundle<f64>, &[Var]) -> sqcpc::Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        make: Box::new(move |rng| {
            let seed = rng.gen();
            let model = ModelBundle::<f64>::init(tiny_config(), seed).unwrap();
            let mut xs = make_extra(rng);
            // Perturb parameters away from the all-zero biases of init.
            for p in model.params() {
                let noise = randn(p.value.shape(), rng);
                xs.push(p.value.zip_map(&noise, |v, e| v + 0.1 * e));
            }
            xs
        }),
        forward: Box::new(move |g, xs| {
            let model = ModelBundle::<f64>::init(tiny_config(), 0).unwrap();
            let n = model.params().len();
            let split = xs.len() - n;
            let model = with_params(&model, &xs[split..]);
            let data = leaves(g, &xs[..split]);
            let bound = model.bind(g);
            let out = f(g, &bound, &model, &data)?;
            let mut vars = data;
            vars.extend_from_slice(bound.vars());
            Ok((out, vars))
        }),
    }
}

fn grid(rng: &mut ChaCha8Rng, b: usize) -> Tensor<f64> {
    let (c, h, w) = tiny_config().feature_shape();
    randn(&[b, c, h, w], rng)
}

fn stats(rng: &mut ChaCha8Rng, c: usize) -> RunningStats<f64> {
    let mut s = RunningStats::new(c);
    s.mean = randn(&[c], rng);
    s.var = uniform(&[c], 0.5, 2.0, rng);
    s
}

/// Every differentiable graph operation, plus the network blocks and
/// losses built from them.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        simple(
            "conv2d stride 1 pad 1",
            |r| vec![randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)],
            |g, v| g.conv2d(v[0], v[1], v[2], 1, 1),
        ),
        simple(
            "conv2d stride 2 pad 1",
            |r| vec![randn(&[2, 2, 6, 5], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)],
            |g, v| g.conv2d(v[0], v[1], v[2], 2, 1),
        ),
        simple(
            "conv2d 1x1",
            |r| vec![randn(&[2, 4, 2, 2], r), randn(&[3, 4, 1, 1], r), randn(&[3], r)],
            |g, v| g.conv2d(v[0], v[1], v[2], 1, 0),
        ),
        simple("sigmoid", |r| vec![randn(&[3, 4], r)], |g, v| g.activation(v[0], Activation::Sigmoid)),
        simple("tanh", |r| vec![randn(&[3, 4], r)], |g, v| g.activation(v[0], Activation::Tanh)),
        simple("relu", |r| vec![randn(&[3, 4], r)], |g, v| g.activation(v[0], Activation::Relu)),
        simple("add", |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| g.add(v[0], v[1])),
        simple("sub", |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| g.sub(v[0], v[1])),
        simple("mul", |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| g.mul(v[0], v[1])),
        simple("sum", |r| vec![randn(&[2, 3, 2], r)], |g, v| g.sum(v[0])),
        simple(
            "concat_channels",
            |r| vec![randn(&[2, 1, 2, 2], r), randn(&[2, 3, 2, 2], r)],
            |g, v| g.concat_channels(v[0], v[1]),
        ),
        simple(
            "concat_batch",
            |r| vec![randn(&[1, 2, 2], r), randn(&[3, 2, 2], r)],
            |g, v| g.concat_batch(&[v[0], v[1]]),
        ),
        simple(
            "stack_axis1",
            |r| vec![randn(&[2, 3, 1, 2], r), randn(&[2, 3, 1, 2], r)],
            |g, v| g.stack_axis1(&[v[0], v[1]]),
        ),
        simple("slice_batch", |r| vec![randn(&[4, 2, 3], r)], |g, v| g.slice_batch(v[0], 1, 2)),
        simple("global_avg_pool", |r| vec![randn(&[2, 3, 2, 3], r)], |g, v| g.global_avg_pool(v[0])),
        simple(
            "batch_norm train",
            |r| vec![randn(&[5, 3], r), randn(&[3], r), randn(&[3], r)],
            |g, v| g.batch_norm(v[0], v[1], v[2], &mut RunningStats::new(3), NormMode::Train),
        ),
        OpCase {
            name: "batch_norm eval",
            make: Box::new(|r| {
                let s = stats(r, 3);
                vec![randn(&[4, 3], r), randn(&[3], r), randn(&[3], r), s.mean, s.var]
            }),
            forward: Box::new(|g, xs| {
                let vs = leaves(g, &xs[..3]);
                let mut s = RunningStats::new(3);
                s.mean = xs[3].clone();
                s.var = xs[4].clone();
                Ok((g.batch_norm(vs[0], vs[1], vs[2], &mut s, NormMode::Eval)?, vs))
            }),
        },
        simple(
            "affine",
            |r| vec![randn(&[3, 4], r), randn(&[2, 4], r), randn(&[2], r)],
            |g, v| g.affine(v[0], v[1], v[2]),
        ),
        simple(
            "channel_affine",
            |r| vec![randn(&[2, 3, 2, 2], r), randn(&[3], r), randn(&[3], r)],
            |g, v| g.channel_affine(v[0], v[1], v[2]),
        ),
        simple(
            "supervised_loss",
            |r| vec![randn(&[3, 2], r), uniform(&[3, 2], 0.0, 5.0, r)],
            |g, v| supervised_loss(g, v[0], v[1]),
        ),
        simple(
            "nce_loss",
            |r| (0..4).map(|_| randn(&[2, 3, 2, 2], r).map(|v| 0.5 * v)).collect(),
            |g, v| Ok(nce_loss_op(g, &v[..2], &v[2..])?.0),
        ),
    ];
    cases.extend([
        model_case(
            "feature_extract",
            |r| vec![uniform(&[2, 1, 8, 8], 0.0, 1.0, r)],
            |g, b, _, d| b.feature_extract(g, d[0]),
        ),
        model_case(
            "conv_gru_step",
            |r| vec![grid(r, 2), grid(r, 2)],
            |g, b, _, d| b.conv_gru_step(g, d[0], d[1]),
        ),
        model_case("predictive_step", |r| vec![grid(r, 2)], |g, b, _, d| b.predictive_step(g, d[0])),
        model_case(
            "regress_head train",
            |r| vec![grid(r, 4)],
            |g, b, m, d| b.regress_head(g, d[0], &mut m.norm_stats.clone(), NormMode::Train),
        ),
        model_case(
            "regress_head eval",
            |r| vec![grid(r, 2)],
            |g, b, _, d| {
                let mut s = RunningStats::new(3);
                s.mean = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
                s.var = Tensor::new(vec![3], vec![0.5, 1.5, 2.0]).unwrap();
                b.regress_head(g, d[0], &mut s, NormMode::Eval)
            },
        ),
    ]);
    cases
}

/// Pretext loss of two `T = 4` sequences (context 2) on the tiny network,
/// as a function of every parameter.
pub fn composed_pretext_case() -> OpCase {
    model_case(
        "composed pretext loss",
        |r| Vec::from_iter((0..4).map(|_| uniform(&[2, 1, 8, 8], 0.0, 1.0, r))),
        |g, b, _, d| Ok(sqcpc::cpc::pretext_loss(g, b, d, 2)?.0),
    )
}

/// Fine-tune loss through a 5-frame window labeled at its last frame,
/// as a function of the frames and every parameter.
pub fn bptt_case() -> OpCase {
    model_case(
        "fine-tune BPTT",
        |r| vec![uniform(&[5, 1, 8, 8], 0.0, 1.0, r), uniform(&[1, 2], 0.0, 5.0, r)],
        |g, b, m, d| {
            let states = encode_sequence(g, b, d[0])?;
            let h = *states.last().unwrap();
            let mut s = m.norm_stats.clone();
            let pred = b.regress_head(g, h, &mut s, NormMode::Eval)?;
            supervised_loss(g, pred, d[1])
        },
    )
}

/// ICC transcribed term by term from its definition: grand mean over both
/// raters, W from the two squared-deviation sums divided by N, S as the
/// plain sum of squared differences.
pub fn oracle_icc(y: &[f64], p: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mut total = 0.0;
    for i in 0..y.len() {
        total += y[i];
        total += p[i];
    }
    let grand = total / (2.0 * n);
    let mut dev_truth = 0.0;
    let mut dev_pred = 0.0;
    let mut s = 0.0;
    for i in 0..y.len() {
        dev_truth += (y[i] - grand) * (y[i] - grand);
        dev_pred += (p[i] - grand) * (p[i] - grand);
        s += (y[i] - p[i]) * (y[i] - p[i]);
    }
    let w = (dev_truth + dev_pred) / n;
    (w - s) / (w + s)
}

pub fn oracle_mae(y: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.len() {
        acc += if y[i] > p[i] { y[i] - p[i] } else { p[i] - y[i] };
    }
    acc / y.len() as f64
}

/// Worst absolute disagreement of `icc31`/`mae` with the oracles over
/// `count` random series of length 2–500 with values in [0,5].
pub fn metrics_oracle_gap(count: usize, seed: u64) -> (f64, f64) {
    use sqcpc::metrics::{icc31, mae, PairedSeries};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut icc_gap, mut mae_gap) = (0.0f64, 0.0f64);
    for i in 0..count {
        let n = rng.gen_range(2..=500);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=5.0)).collect();
        // Mix unrelated, correlated and near-identical predictions.
        let p: Vec<f64> = match i % 3 {
            0 => (0..n).map(|_| rng.gen_range(0.0..=5.0)).collect(),
            1 => y.iter().map(|v| (v + rng.gen_range(-1.0..1.0)).clamp(0.0, 5.0)).collect(),
            _ => y.iter().map(|v| v + rng.gen_range(-1e-3..1e-3)).collect(),
        };
        let s = PairedSeries::new(&y, &p).unwrap();
        icc_gap = icc_gap.max((icc31(s).unwrap().value - oracle_icc(&y, &p)).abs());
        mae_gap = mae_gap.max((mae(s).unwrap() - oracle_mae(&y, &p)).abs());
    }
    (icc_gap, mae_gap)
}

/// Histogram of sampled offsets for one labeled frame; panics if any draw
/// breaks the window invariants.
pub fn offset_counts(video_len: usize, labeled: usize, len: usize, samples: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; len];
    for _ in 0..samples {
        let w = sqcpc::semisup::sample_window(video_len, labeled, len, &mut rng).unwrap();
        assert_eq!(w.start + w.offset, labeled);
        assert!(w.offset < len && w.start + len <= video_len);
        counts[w.offset] += 1;
    }
    counts
}

/// Chi-square p-value of uniformity over the offsets that occurred.
pub fn uniformity_p(counts: &[usize]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let support: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if support.len() < 2 {
        return 1.0;
    }
    let total: usize = support.iter().sum();
    let expected = total as f64 / support.len() as f64;
    let stat: f64 = support.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((support.len() - 1) as f64).unwrap().cdf(stat)
}

/// Offsets with at least one draw.
pub fn support(counts: &[usize]) -> Vec<usize> {
    (0..counts.len()).filter(|&o| counts[o] > 0).collect()
}
