//! Two-head selection network, Bernoulli action policies, rewards and the
//! REINFORCE objective.
//!
//! The selection network embeds every frame independently with a small
//! strided 2D conv net (on frames average-pooled by the downsample factor),
//! averages the per-frame embeddings over time, and standardises the clip
//! embedding across channels. A running mean of that embedding, tracked
//! while the policy trains, is subtracted before two linear heads: a frame
//! head with `T` outputs and a stage head with `K` outputs. Sigmoids turn
//! both into keep-probabilities `m` and `n`.
//!
//! Without the centring step the heads see a large shared component in every
//! clip embedding, and policy-gradient updates move all clips together long
//! before they separate easy clips from hard ones.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::optim::Params;
use crate::rng::{self, tag};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Variance floor when standardising the clip embedding.
pub const FEATURE_EPS: f64 = 1e-5;

/// Decay of the running embedding mean.
pub const EMBED_MEAN_DECAY: f64 = 0.9;

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]` so log-probs stay finite.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub widths: Vec<usize>,
    pub downsample: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32],
            downsample: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub widths: Vec<usize>,
    pub downsample: usize,
    pub frames: usize,
    pub num_stages: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SelectionSpec {
    pub fn new(
        cfg: &SelectionConfig,
        frames: usize,
        num_stages: usize,
        in_channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let spec = Self {
            widths: cfg.widths.clone(),
            downsample: cfg.downsample,
            frames,
            num_stages,
            in_channels,
            height,
            width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "selection widths must be positive".into(),
            ));
        }
        if self.downsample == 0
            || !self.height.is_multiple_of(self.downsample)
            || !self.width.is_multiple_of(self.downsample)
        {
            return Err(Error::InvalidArgument(format!(
                "downsample factor {} must divide the frame size",
                self.downsample
            )));
        }
        if self.frames == 0 || self.num_stages == 0 {
            return Err(Error::InvalidArgument("need T ≥ 1 and K ≥ 1".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Spatial size after each extractor layer (3×3, stride 2, padding 1).
    pub fn layer_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.height / self.downsample, self.width / self.downsample);
        self.widths
            .iter()
            .map(|_| {
                h = (h + 2 - 3) / 2 + 1;
                w = (w + 2 - 3) / 2 + 1;
                (h, w)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionNet {
    pub spec: SelectionSpec,
    pub params: Params,
    /// Running mean of the standardised clip embedding. Not a trainable
    /// parameter: it is updated from batch statistics while the policy trains.
    pub embed_mean: Vec<f64>,
}

/// Recorded policy graph for one batch.
#[derive(Debug, Clone, Copy)]
pub struct PolicyHeads {
    /// Keep-probabilities for frames, `[B, T]`.
    pub m: Var,
    /// Keep-probabilities for temporal stages, `[B, K]`.
    pub n: Var,
    /// Standardised clip embedding before centring, `[B, F]`.
    pub embedding: Var,
}

/// Extractor kernels are He-initialised; both heads start at zero so every
/// initial keep-probability is exactly 0.5.
pub fn build_selection_net(spec: SelectionSpec, seed: u64) -> Result<SelectionNet> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[tag::INIT, 1]);
    let mut params = Params::new();
    let mut in_ch = spec.in_channels;
    for (i, &w) in spec.widths.iter().enumerate() {
        let fan_in = in_ch * 9;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..w * fan_in).map(|_| normal.sample(&mut rng)).collect();
        params.push(
            format!("sel.conv{i}.weight"),
            Tensor::new(vec![w, in_ch, 3, 3], data)?,
        );
        params.push(format!("sel.conv{i}.bias"), Tensor::zeros(&[w]));
        in_ch = w;
    }
    let f = spec.feature_dim();
    params.push("sel.frame_head.weight", Tensor::zeros(&[f, spec.frames]));
    params.push("sel.frame_head.bias", Tensor::zeros(&[spec.frames]));
    params.push("sel.conv_head.weight", Tensor::zeros(&[f, spec.num_stages]));
    params.push("sel.conv_head.bias", Tensor::zeros(&[spec.num_stages]));
    let embed_mean = vec![0.0; f];
    Ok(SelectionNet {
        spec,
        params,
        embed_mean,
    })
}

/// Average-pools `[N, C, H, W]` frames by `factor`.
pub fn downsample_frames(
    frames: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &frames[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += src[(y * factor + dy) * w + x * factor + dx];
                    }
                }
                dst[y * ow + x] = s * norm;
            }
        }
    }
    out
}

/// Keep-probabilities for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub m: Vec<f64>,
    pub n: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sampled,
    Greedy,
    Fixed,
}

/// Executed actions for one clip.
///
/// `u` is what the classifier sees; `drawn_u` is what the policy produced
/// before the at-least-one-frame rule, and is what log-probabilities use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMask {
    pub u: Vec<bool>,
    pub v: Vec<bool>,
    pub drawn_u: Vec<bool>,
    pub mode: ActionMode,
}

/// Frame switched on when a frame mask comes out empty: 1-based `⌈T/2⌉`.
pub fn fallback_frame(frames: usize) -> usize {
    frames.div_ceil(2) - 1
}

impl ActionMask {
    pub fn new(drawn_u: Vec<bool>, v: Vec<bool>, mode: ActionMode) -> Self {
        let mut u = drawn_u.clone();
        if !u.iter().any(|&b| b) && !u.is_empty() {
            let c = fallback_frame(u.len());
            u[c] = true;
        }
        Self {
            u,
            v,
            drawn_u,
            mode,
        }
    }

    pub fn full(frames: usize, stages: usize) -> Self {
        Self::new(vec![true; frames], vec![true; stages], ActionMode::Fixed)
    }

    pub fn frames_used(&self) -> usize {
        self.u.iter().filter(|&&b| b).count()
    }

    pub fn stages_used(&self) -> usize {
        self.v.iter().filter(|&&b| b).count()
    }
}

impl SelectionNet {
    /// Records the policy forward pass for a batch `[B, T, C, H, W]`.
    pub fn policy_forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        frames: &Tensor,
    ) -> Result<PolicyHeads> {
        let s = frames.shape();
        if s.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "expected [B, T, C, H, W] frames, got {s:?}"
            )));
        }
        let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        if t != self.spec.frames {
            return Err(Error::InvalidArgument(format!(
                "selection network needs the full clip of {} frames, got {t}",
                self.spec.frames
            )));
        }
        if c != self.spec.in_channels || h != self.spec.height || w != self.spec.width {
            return Err(Error::InvalidArgument(format!(
                "frame geometry {c}x{h}x{w} does not match the selection network"
            )));
        }
        let f = self.spec.downsample;
        let small = downsample_frames(frames.data(), b * t, c, h, w, f);
        let mut act = tape.constant(Tensor::new(vec![b * t, c, h / f, w / f], small)?);
        let nlayers = self.spec.widths.len();
        for i in 0..nlayers {
            let y = tape.conv2d(act, vars[2 * i], 2, 1)?;
            let y = tape.add_bias(y, vars[2 * i + 1], 1)?;
            act = tape.relu(y);
        }
        let shape = tape.shape(act).to_vec();
        let feat = tape.reshape(act, &[shape[0], shape[1], shape[2] * shape[3]])?;
        let feat = tape.mean_axis(feat, 2)?;
        let feat = tape.reshape(feat, &[b, t, shape[1]])?;
        let clip_feat = tape.mean_axis(feat, 1)?;
        let embedding = tape.standardize(clip_feat, FEATURE_EPS)?;
        let shift = tape.constant(Tensor::from_vec(
            self.embed_mean.iter().map(|v| -v).collect(),
        ));
        let centred = tape.add_bias(embedding, shift, 1)?;
        let head = |tape: &mut Tape, wi: usize| -> Result<Var> {
            let z = tape.matmul(centred, vars[wi])?;
            let z = tape.add_bias(z, vars[wi + 1], 1)?;
            let p = tape.sigmoid(z);
            Ok(tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
        };
        let m = head(tape, 2 * nlayers)?;
        let n = head(tape, 2 * nlayers + 2)?;
        Ok(PolicyHeads { m, n, embedding })
    }

    /// Folds the batch mean of `embedding [B, F]` into the running mean.
    pub fn update_embed_mean(&mut self, embedding: &Tensor) -> Result<()> {
        let f = self.embed_mean.len();
        if embedding.shape().len() != 2 || embedding.shape()[1] != f {
            return Err(Error::InvalidArgument(format!(
                "embedding shape {:?} does not match width {f}",
                embedding.shape()
            )));
        }
        let b = embedding.shape()[0] as f64;
        let mut mean = vec![0.0; f];
        for row in embedding.data().chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / b;
            }
        }
        for (r, m) in self.embed_mean.iter_mut().zip(mean) {
            *r = EMBED_MEAN_DECAY * *r + (1.0 - EMBED_MEAN_DECAY) * m;
        }
        Ok(())
    }

    /// Per-clip policy outputs for a batch (no gradient tracking).
    pub fn policy_forward(&self, frames: &Tensor) -> Result<Vec<PolicyOutput>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let h = self.policy_forward_tape(&mut tape, &vars, frames)?;
        Ok(split_policy(tape.value(h.m), tape.value(h.n)))
    }
}

pub fn split_policy(m: &Tensor, n: &Tensor) -> Vec<PolicyOutput> {
    let (b, t) = (m.shape()[0], m.shape()[1]);
    let k = n.shape()[1];
    (0..b)
        .map(|i| PolicyOutput {
            m: m.data()[i * t..(i + 1) * t].to_vec(),
            n: n.data()[i * k..(i + 1) * k].to_vec(),
        })
        .collect()
}

pub fn sample_action(p: &PolicyOutput, rng: &mut impl Rng) -> ActionMask {
    let u = p.m.iter().map(|&q| rng.gen::<f64>() < q).collect();
    let v = p.n.iter().map(|&q| rng.gen::<f64>() < q).collect();
    ActionMask::new(u, v, ActionMode::Sampled)
}

/// Keeps a bit iff its probability is at least 0.5.
pub fn greedy_action(p: &PolicyOutput) -> ActionMask {
    let u = p.m.iter().map(|&q| q >= 0.5).collect();
    let v = p.n.iter().map(|&q| q >= 0.5).collect();
    ActionMask::new(u, v, ActionMode::Greedy)
}

fn bernoulli_log_prob(probs: &[f64], bits: &[bool]) -> f64 {
    probs
        .iter()
        .zip(bits)
        .map(|(&q, &b)| {
            let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if b {
                q.ln()
            } else {
                (1.0 - q).ln()
            }
        })
        .sum()
}

/// `(log π_f(u), log π_c(v))`, using the frame bits as drawn by the policy.
pub fn log_prob(p: &PolicyOutput, a: &ActionMask) -> (f64, f64) {
    (
        bernoulli_log_prob(&p.m, &a.drawn_u),
        bernoulli_log_prob(&p.n, &a.v),
    )
}

fn bits_tensor(rows: &[&[bool]]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, |r| r.len());
    let data = rows
        .iter()
        .flat_map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::new(vec![rows.len(), cols], data)?)
}

/// Row-wise Bernoulli log-likelihood of `bits` under probabilities `probs [B, N]`; returns `[B]`.
pub fn bernoulli_log_prob_tape(tape: &mut Tape, probs: Var, bits: &[&[bool]]) -> Result<Var> {
    let ones = bits_tensor(bits)?;
    if ones.shape() != tape.shape(probs) {
        return Err(Error::InvalidArgument(format!(
            "action shape {:?} does not match probabilities {:?}",
            ones.shape(),
            tape.shape(probs)
        )));
    }
    let zeros = Tensor::new(
        ones.shape().to_vec(),
        ones.data().iter().map(|b| 1.0 - b).collect(),
    )?;
    let on = tape.constant(ones);
    let off = tape.constant(zeros);
    let log_p = tape.log(probs);
    let q = tape.affine(probs, -1.0, 1.0);
    let log_q = tape.log(q);
    let a = tape.mul(on, log_p)?;
    let b = tape.mul(off, log_q)?;
    let s = tape.add(a, b)?;
    Ok(tape.sum_axis(s, 1)?)
}

/// `(log π_f, log π_c)` per clip as `[B]` vars.
pub fn log_prob_tape(
    tape: &mut Tape,
    m: Var,
    n: Var,
    actions: &[ActionMask],
) -> Result<(Var, Var)> {
    let us: Vec<&[bool]> = actions.iter().map(|a| a.drawn_u.as_slice()).collect();
    let vs: Vec<&[bool]> = actions.iter().map(|a| a.v.as_slice()).collect();
    Ok((
        bernoulli_log_prob_tape(tape, m, &us)?,
        bernoulli_log_prob_tape(tape, n, &vs)?,
    ))
}

/// Normalised frame usage `‖u‖₀ / T`.
pub fn cost_frames(u: &[bool]) -> f64 {
    u.iter().filter(|&&b| b).count() as f64 / u.len() as f64
}

/// Normalised stage usage `(‖v‖₀ / K)²`.
pub fn cost_convs(v: &[bool]) -> f64 {
    let r = v.iter().filter(|&&b| b).count() as f64 / v.len() as f64;
    r * r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Penalty for a wrong prediction.
    pub gamma: f64,
    /// Decay of the moving-average reward baselines.
    pub baseline_decay: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            baseline_decay: 0.9,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(
                "gamma must be finite and ≥ 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::InvalidArgument(
                "baseline_decay must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// `1 - cost` for a correct prediction, `-gamma` otherwise.
pub fn reward(correct: bool, cost: f64, cfg: &RewardConfig) -> f64 {
    if correct {
        1.0 - cost
    } else {
        -cfg.gamma
    }
}

/// Scalar exponential moving average of rewards, one per policy head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub frames: f64,
    pub convs: f64,
}

impl Default for Baselines {
    fn default() -> Self {
        Self {
            frames: 0.0,
            convs: 0.0,
        }
    }
}

impl Baselines {
    /// Folds in batch-mean rewards: `b ← decay·b + (1−decay)·mean`.
    pub fn update(&mut self, decay: f64, mean_frames: f64, mean_convs: f64) {
        self.frames = decay * self.frames + (1.0 - decay) * mean_frames;
        self.convs = decay * self.convs + (1.0 - decay) * mean_convs;
    }
}

/// `-(1/B) Σ_i [(R_u,i − b_f)·log π_f,i + (R_v,i − b_c)·log π_c,i]`.
///
/// Its gradient is the negated mini-batch policy-gradient estimate, so a
/// descent step on it ascends the expected reward.
pub fn reinforce_loss(
    tape: &mut Tape,
    log_pf: Var,
    log_pc: Var,
    rewards_u: &[f64],
    rewards_v: &[f64],
    baselines: &Baselines,
) -> Result<Var> {
    let b = rewards_u.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if rewards_v.len() != b || tape.shape(log_pf) != [b] || tape.shape(log_pc) != [b] {
        return Err(Error::InvalidArgument(
            "rewards and log-probabilities disagree on batch size".into(),
        ));
    }
    let adv_u = tape.constant(Tensor::from_vec(
        rewards_u.iter().map(|r| r - baselines.frames).collect(),
    ));
    let adv_v = tape.constant(Tensor::from_vec(
        rewards_v.iter().map(|r| r - baselines.convs).collect(),
    ));
    let a = tape.mul(adv_u, log_pf)?;
    let c = tape.mul(adv_v, log_pc)?;
    let s = tape.add(a, c)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, -1.0 / b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_threshold() {
        let p = PolicyOutput {
            m: vec![0.7, 0.3, 0.51],
            n: vec![0.5, 0.49],
        };
        let a = greedy_action(&p);
        assert_eq!(a.u, vec![true, false, true]);
        assert_eq!(a.v, vec![true, false]);
        assert_eq!(greedy_action(&p), a);
    }

    #[test]
    fn empty_frame_mask_keeps_center() {
        let p = PolicyOutput {
            m: vec![0.0; 8],
            n: vec![0.0; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_action(&p, &mut rng);
        assert_eq!(a.frames_used(), 1);
        assert!(a.u[3]);
        assert!(a.drawn_u.iter().all(|b| !b));
        let g = greedy_action(&p);
        assert!(g.u[3]);
        assert_eq!(fallback_frame(3), 1);
        assert_eq!(fallback_frame(1), 0);
    }

    #[test]
    fn log_prob_examples() {
        let p = PolicyOutput {
            m: vec![0.5, 0.5],
            n: vec![0.2],
        };
        let a = ActionMask::new(vec![true, false], vec![true], ActionMode::Fixed);
        let (lf, lc) = log_prob(&p, &a);
        assert!((lf - 0.25f64.ln()).abs() < 1e-15);
        assert!((lc - 0.2f64.ln()).abs() < 1e-15);
        let p = PolicyOutput {
            m: vec![0.3, 0.9, 0.6],
            n: vec![0.5],
        };
        let a = ActionMask::new(vec![true; 3], vec![false], ActionMode::Fixed);
        let (lf, _) = log_prob(&p, &a);
        let expect: f64 = p.m.iter().map(|q| q.ln()).sum();
        assert!((lf - expect).abs() < 1e-15);
    }

    #[test]
    fn cost_examples() {
        let u = [true, true, true, true, false, false, false, false];
        assert_eq!(cost_frames(&u), 0.5);
        assert!((cost_convs(&[true, true, true, false, false]) - 0.36).abs() < 1e-15);
        assert_eq!(cost_convs(&[false; 3]), 0.0);
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig {
            gamma: 0.3,
            ..RewardConfig::default()
        };
        assert_eq!(reward(true, cost_frames(&[true; 8]), &cfg), 0.0);
        assert_eq!(reward(true, cost_convs(&[false; 5]), &cfg), 1.0);
        assert_eq!(reward(false, 0.2, &cfg), -0.3);
    }

    #[test]
    fn reward_config_validation() {
        assert!(RewardConfig {
            gamma: -1.0,
            baseline_decay: 0.9
        }
        .validate()
        .is_err());
        assert!(RewardConfig {
            gamma: 1.0,
            baseline_decay: 1.0
        }
        .validate()
        .is_err());
        assert!(RewardConfig::default().validate().is_ok());
    }

    #[test]
    fn empty_batch_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0]), true);
        assert!(reinforce_loss(&mut tape, x, x, &[], &[], &Baselines::default()).is_err());
    }

    #[test]
    fn baseline_ema() {
        let mut b = Baselines::default();
        b.update(0.9, 1.0, -1.0);
        assert!((b.frames - 0.1).abs() < 1e-15);
        assert!((b.convs + 0.1).abs() < 1e-15);
    }
}
