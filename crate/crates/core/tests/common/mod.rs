#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidgate::selection::{
    build_selection_net, log_prob_tape, reinforce_loss, ActionMask, ActionMode, Baselines,
    SelectionConfig, SelectionNet, SelectionSpec,
};
use vidgate::video_net::{build_toy_net, NetConfig, NetSpec, VideoNet};
use vidgate::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Random instances with a ReLU/clamp input this close to its breakpoint are
/// redrawn: a central difference straddling a kink is not a derivative.
pub const MIN_KINK_MARGIN: f64 = 1e-3;
/// Agreement required between enumerated expectations.
pub const ENUM_TOL: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from
/// amplifying round-off in the difference quotient.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Compares tape gradients of `f` w.r.t. every input against central
/// differences. `probe` limits how many coordinates per input are checked
/// (all when `None`). Returns the worst relative error.
pub fn gradcheck(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Var,
    probe: Option<usize>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut pick = rng(12345);
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match probe {
            Some(k) if k < t.numel() => (0..k).map(|_| pick.gen_range(0..t.numel())).collect(),
            _ => (0..t.numel()).collect(),
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Scalarises a non-scalar output with fixed pseudo-random weights.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

/// Independent direct-loop 2D cross-correlation, `[B, C, H, W]` by `[Co, C, kh, kw]`.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((o * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((bi * co + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], out).unwrap()
}

/// Class probabilities of `net` with every temporal stage switched off,
/// computed frame by frame with direct loops: each stage applies the
/// middle temporal slice of its kernel, then bias and ReLU; features are
/// averaged over frames and pixels before the linear head.
pub fn framewise_2d_probs(net: &VideoNet, clip: &[f64]) -> Vec<f64> {
    let spec = &net.spec;
    let (c, h, w) = (spec.in_channels(), spec.height, spec.width);
    let frame_len = c * h * w;
    let frames = clip.len() / frame_len;
    let feat = spec.feature_channels();
    let mut pooled = vec![0.0; feat];
    let mut count = 0usize;
    for t in 0..frames {
        let mut x = Tensor::new(
            vec![1, c, h, w],
            clip[t * frame_len..(t + 1) * frame_len].to_vec(),
        )
        .unwrap();
        for (i, s) in spec.stages.iter().enumerate() {
            let k = net.params.tensor(2 * i);
            let [co, ci, kt, kh, kw] = s.kernel_shape();
            let mid = kt / 2;
            let mut k2 = Vec::with_capacity(co * ci * kh * kw);
            for o in 0..co {
                for j in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            k2.push(k.data()[(((o * ci + j) * kt + mid) * kh + dy) * kw + dx]);
                        }
                    }
                }
            }
            let k2 = Tensor::new(vec![co, ci, kh, kw], k2).unwrap();
            let mut y = naive_conv2d(&x, &k2, s.spatial_stride, s.spatial_extent / 2);
            let plane = y.shape()[2] * y.shape()[3];
            let bias = net.params.tensor(2 * i + 1).data().to_vec();
            for (idx, val) in y.data_mut().iter_mut().enumerate() {
                *val = (*val + bias[idx / plane]).max(0.0);
            }
            x = y;
        }
        let plane = x.shape()[2] * x.shape()[3];
        for (idx, val) in x.data().iter().enumerate() {
            pooled[idx / plane] += val;
        }
        count += plane;
    }
    let n = spec.stages.len();
    let wt = net.params.tensor(2 * n);
    let bias = net.params.tensor(2 * n + 1);
    let classes = spec.num_classes;
    let logits: Vec<f64> = (0..classes)
        .map(|j| {
            bias.data()[j]
                + (0..feat)
                    .map(|i| pooled[i] / count as f64 * wt.data()[i * classes + j])
                    .sum::<f64>()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits.iter().map(|l| (l - max).exp() / z).collect()
}

/// Bits of action index `a`: the low `t` bits are frames, the next `k` stages.
pub fn action_bits(a: usize, t: usize, k: usize) -> (Vec<bool>, Vec<bool>) {
    let u = (0..t).map(|i| a >> i & 1 == 1).collect();
    let v = (0..k).map(|i| a >> (t + i) & 1 == 1).collect();
    (u, v)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Probability of drawing exactly `bits` from independent Bernoullis.
pub fn bernoulli_prob(probs: &[f64], bits: &[bool]) -> f64 {
    probs
        .iter()
        .zip(bits)
        .map(|(&q, &b)| if b { q } else { 1.0 - q })
        .product()
}

/// `∇_z Σ_a π(a) f(a)` for factorised Bernoulli heads with logits `zf`, `zc`,
/// by the product rule on each action probability (no score function).
pub fn expected_value_gradient(
    zf: &[f64],
    zc: &[f64],
    f: impl Fn(&[bool], &[bool]) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let (t, k) = (zf.len(), zc.len());
    let m: Vec<f64> = zf.iter().map(|&z| sigmoid(z)).collect();
    let n: Vec<f64> = zc.iter().map(|&z| sigmoid(z)).collect();
    let (mut gf, mut gc) = (vec![0.0; t], vec![0.0; k]);
    for a in 0..1usize << (t + k) {
        let (u, v) = action_bits(a, t, k);
        let value = f(&u, &v);
        let pu = bernoulli_prob(&m, &u);
        let pv = bernoulli_prob(&n, &v);
        for i in 0..t {
            let q = if u[i] { m[i] } else { 1.0 - m[i] };
            let dq = if u[i] { 1.0 } else { -1.0 } * m[i] * (1.0 - m[i]);
            gf[i] += value * pu / q * dq * pv;
        }
        for i in 0..k {
            let q = if v[i] { n[i] } else { 1.0 - n[i] };
            let dq = if v[i] { 1.0 } else { -1.0 } * n[i] * (1.0 - n[i]);
            gc[i] += value * pv / q * dq * pu;
        }
    }
    (gf, gc)
}

/// Exact expectation over all actions of the library's per-sample policy
/// gradient: the negated logit gradient of `reinforce_loss` for a batch of
/// one, weighted by the action's probability. `rewards` maps an executed
/// action to the `(frame-head, stage-head)` rewards fed to the loss.
pub fn expected_estimator(
    zf: &[f64],
    zc: &[f64],
    baselines: &Baselines,
    rewards: impl Fn(&ActionMask) -> (f64, f64),
) -> (Vec<f64>, Vec<f64>) {
    let (t, k) = (zf.len(), zc.len());
    let m: Vec<f64> = zf.iter().map(|&z| sigmoid(z)).collect();
    let n: Vec<f64> = zc.iter().map(|&z| sigmoid(z)).collect();
    let (mut gf, mut gc) = (vec![0.0; t], vec![0.0; k]);
    for a in 0..1usize << (t + k) {
        let (u, v) = action_bits(a, t, k);
        let p = bernoulli_prob(&m, &u) * bernoulli_prob(&n, &v);
        let action = ActionMask::new(u, v, ActionMode::Sampled);
        let (ru, rv) = rewards(&action);
        let mut tape = Tape::new();
        let lf = tape.leaf(Tensor::new(vec![1, t], zf.to_vec()).unwrap(), true);
        let lc = tape.leaf(Tensor::new(vec![1, k], zc.to_vec()).unwrap(), true);
        let mv = tape.sigmoid(lf);
        let nv = tape.sigmoid(lc);
        let (lpf, lpc) = log_prob_tape(&mut tape, mv, nv, std::slice::from_ref(&action)).unwrap();
        let loss = reinforce_loss(&mut tape, lpf, lpc, &[ru], &[rv], baselines).unwrap();
        tape.backward(loss).unwrap();
        for (g, d) in gf.iter_mut().zip(tape.grad(lf).unwrap().data()) {
            *g -= p * d;
        }
        for (g, d) in gc.iter_mut().zip(tape.grad(lc).unwrap().data()) {
            *g -= p * d;
        }
    }
    (gf, gc)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A small selection network with every parameter (heads included) and the
/// running embedding mean randomised, plus a two-clip batch `[2, 3, 1, 8, 8]`.
pub fn small_selection_instance(seed: u64) -> (SelectionNet, Tensor) {
    let cfg = SelectionConfig {
        widths: vec![3, 4],
        downsample: 2,
    };
    let spec = SelectionSpec::new(&cfg, 3, 2, 1, 8, 8).unwrap();
    let mut r = rng(seed ^ 0x5e1);
    loop {
        let mut net = build_selection_net(spec.clone(), seed).unwrap();
        for i in 0..net.params.len() {
            let shape = net.params.tensor(i).shape().to_vec();
            *net.params.tensor_mut(i) = random_tensor(&mut r, &shape, -0.8, 0.8);
        }
        net.embed_mean = (0..4).map(|_| r.gen_range(-0.5..0.5)).collect();
        let frames = random_tensor(&mut r, &[2, 3, 1, 8, 8], 0.0, 1.0);
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, true);
        net.policy_forward_tape(&mut tape, &vars, &frames).unwrap();
        if tape.kink_margin() > MIN_KINK_MARGIN {
            return (net, frames);
        }
    }
}

/// Worst gradient error of `Σ w·m + Σ w'·n` w.r.t. every selection parameter.
pub fn selection_gradcheck(seed: u64) -> f64 {
    let (net, frames) = small_selection_instance(seed);
    let inputs: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
    gradcheck(
        &inputs,
        |tp, v| {
            let h = net.policy_forward_tape(tp, v, &frames).unwrap();
            let a = weighted_sum(tp, h.m, seed);
            let b = weighted_sum(tp, h.n, seed + 1);
            tp.add(a, b).unwrap()
        },
        None,
    )
}

/// A small video net (stem plus two temporal stages, 6×6 input, 3 classes)
/// with random weights and biases, a 4-frame clip and a random stage mask.
pub fn small_video_instance(seed: u64) -> (VideoNet, Vec<f64>, Vec<bool>) {
    let cfg = NetConfig {
        widths: vec![2, 3, 3],
        strides: vec![1, 2, 1],
        temporal: vec![false, true, true],
        temporal_extent: 3,
        spatial_extent: 3,
    };
    let spec = NetSpec::from_config(&cfg, 3, 4, 1, 6, 6).unwrap();
    let mut r = rng(seed ^ 0x71d);
    loop {
        let mut net = build_toy_net(spec.clone(), seed).unwrap();
        for i in 0..net.params.len() {
            let shape = net.params.tensor(i).shape().to_vec();
            *net.params.tensor_mut(i) = random_tensor(&mut r, &shape, -0.6, 0.6);
        }
        let frames = r.gen_range(1..=4);
        let clip: Vec<f64> = (0..frames * 36).map(|_| r.gen_range(0.0..1.0)).collect();
        let v: Vec<bool> = (0..2).map(|_| r.gen_bool(0.5)).collect();
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, true);
        net.forward_tape(&mut tape, &vars, &clip, &v).unwrap();
        if tape.kink_margin() > MIN_KINK_MARGIN {
            return (net, clip, v);
        }
    }
}

/// Worst gradient error of a weighted log-softmax output w.r.t. every
/// video-net parameter.
pub fn video_gradcheck(seed: u64) -> f64 {
    let (net, clip, v) = small_video_instance(seed);
    let inputs: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
    gradcheck(
        &inputs,
        |tp, vars| {
            let logits = net.forward_tape(tp, vars, &clip, &v).unwrap();
            let lp = tp.log_softmax(logits).unwrap();
            weighted_sum(tp, lp, seed)
        },
        None,
    )
}

/// Zeroes every temporal tap except the middle one in each temporal stage.
pub fn zero_outer_temporal_taps(net: &mut VideoNet) {
    for (i, s) in net.spec.stages.clone().iter().enumerate() {
        if !s.has_temporal_conv {
            continue;
        }
        let [co, ci, kt, kh, kw] = s.kernel_shape();
        let k = net.params.tensor_mut(2 * i);
        for o in 0..co * ci {
            for t in (0..kt).filter(|&t| t != kt / 2) {
                let base = (o * kt + t) * kh * kw;
                k.data_mut()[base..base + kh * kw].fill(0.0);
            }
        }
    }
}

/// Logits for a T=3, K=2 policy.
pub fn toy_logits(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    (
        (0..3).map(|_| r.gen_range(-2.0..2.0)).collect(),
        (0..2).map(|_| r.gen_range(-2.0..2.0)).collect(),
    )
}

/// A fixed correct/wrong outcome for each of the 32 actions.
pub fn correctness_table(seed: u64) -> Vec<bool> {
    let mut r = rng(seed ^ 0xc0);
    (0..32).map(|_| r.gen_bool(0.6)).collect()
}

/// Inverse of `action_bits` for a drawn action.
pub fn index_of(a: &ActionMask) -> usize {
    a.drawn_u
        .iter()
        .chain(&a.v)
        .enumerate()
        .map(|(i, &b)| (b as usize) << i)
        .sum()
}

/// Gradient errors of every differentiable tape op on one random instance.
pub fn op_gradchecks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(1000 + seed);
    let a = random_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let b = random_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let m = random_tensor(&mut r, &[4, 5], -2.0, 2.0);
    let pos = random_tensor(&mut r, &[3, 4], 0.2, 3.0);
    let x3 = random_tensor(&mut r, &[2, 3, 4], -2.0, 2.0);
    let bias = random_tensor(&mut r, &[3], -1.0, 1.0);
    let x5 = random_tensor(&mut r, &[1, 2, 3, 5, 5], -1.0, 1.0);
    let k5 = random_tensor(&mut r, &[2, 2, 3, 3, 3], -1.0, 1.0);
    let x4 = random_tensor(&mut r, &[2, 2, 6, 5], -1.0, 1.0);
    let k4 = random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    type Probe = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let unary = |f: fn(&mut Tape, Var) -> Var| -> Probe {
        Box::new(move |tp: &mut Tape, v: &[Var]| {
            let y = f(tp, v[0]);
            weighted_sum(tp, y, seed)
        })
    };
    let binary = |f: fn(&mut Tape, Var, Var) -> Var| -> Probe {
        Box::new(move |tp: &mut Tape, v: &[Var]| {
            let y = f(tp, v[0], v[1]);
            weighted_sum(tp, y, seed)
        })
    };
    let cases: Vec<(&'static str, Vec<Tensor>, Probe)> = vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            binary(|tp, x, y| tp.add(x, y).unwrap()),
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            binary(|tp, x, y| tp.sub(x, y).unwrap()),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            binary(|tp, x, y| tp.mul(x, y).unwrap()),
        ),
        (
            "matmul",
            vec![a.clone(), m],
            binary(|tp, x, y| tp.matmul(x, y).unwrap()),
        ),
        (
            "affine",
            vec![a.clone()],
            unary(|tp, x| tp.affine(x, -1.7, 0.4)),
        ),
        ("scale", vec![a.clone()], unary(|tp, x| tp.scale(x, 0.3))),
        ("sigmoid", vec![a.clone()], unary(|tp, x| tp.sigmoid(x))),
        ("relu", vec![a.clone()], unary(|tp, x| tp.relu(x))),
        (
            "clamp",
            vec![a.clone()],
            unary(|tp, x| tp.clamp(x, -1.0, 1.0)),
        ),
        ("log", vec![pos], unary(|tp, x| tp.log(x))),
        ("exp", vec![a.clone()], unary(|tp, x| tp.exp(x))),
        (
            "log_softmax",
            vec![a.clone()],
            unary(|tp, x| tp.log_softmax(x).unwrap()),
        ),
        (
            "reshape",
            vec![a],
            unary(|tp, x| tp.reshape(x, &[2, 6]).unwrap()),
        ),
        (
            "pad",
            vec![x3.clone()],
            unary(|tp, x| tp.pad(x, &[(0, 1), (2, 0), (1, 1)]).unwrap()),
        ),
        (
            "slice",
            vec![x3.clone()],
            unary(|tp, x| tp.slice(x, 2, 1, 3).unwrap()),
        ),
        ("sum", vec![x3.clone()], unary(|tp, x| tp.sum(x))),
        ("mean", vec![x3.clone()], unary(|tp, x| tp.mean(x))),
        (
            "sum_axis",
            vec![x3.clone()],
            unary(|tp, x| tp.sum_axis(x, 1).unwrap()),
        ),
        (
            "mean_axis",
            vec![x3.clone()],
            unary(|tp, x| tp.mean_axis(x, 2).unwrap()),
        ),
        (
            "standardize",
            vec![x3.clone()],
            unary(|tp, x| tp.standardize(x, 1e-5).unwrap()),
        ),
        (
            "add_bias",
            vec![x3, bias],
            binary(|tp, x, y| tp.add_bias(x, y, 1).unwrap()),
        ),
        (
            "conv3d",
            vec![x5, k5],
            binary(|tp, x, k| {
                tp.conv3d(x, k, vidgate::tensor::ConvGeom::new([1, 2, 2], [1, 1, 1]))
                    .unwrap()
            }),
        ),
        (
            "conv2d",
            vec![x4, k4],
            binary(|tp, x, k| tp.conv2d(x, k, 2, 1).unwrap()),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| (name, gradcheck(&inputs, f, None)))
        .collect()
}
