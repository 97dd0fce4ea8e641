//! Small 3D convolutional video classifier with gateable temporal stages.
//!
//! The network is a plain stack of conv stages (conv → bias → ReLU), followed
//! by global average pooling over time and space, a linear layer and softmax.
//! Stages flagged `has_temporal_conv` carry a `[Co, C, t, d, d]` kernel and
//! can be switched per call between the full temporal convolution and its
//! degraded 2D form (the `⌊t/2⌋` temporal slice applied frame by frame).
//! Temporal convolutions always use stride 1 and `⌊t/2⌋` zero padding so the
//! number of frames is preserved.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::optim::Params;
use crate::rng::{self, tag};
use crate::tensor::{ConvGeom, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Temporal kernel extent; 1 for purely spatial stages, odd and ≥ 3 otherwise.
    pub temporal_extent: usize,
    pub spatial_extent: usize,
    pub spatial_stride: usize,
    pub has_temporal_conv: bool,
}

impl StageSpec {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.spatial_stride == 0 {
            return Err(Error::InvalidArgument(format!("degenerate stage {self:?}")));
        }
        if self.spatial_extent.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "spatial extent {} must be odd",
                self.spatial_extent
            )));
        }
        if self.has_temporal_conv {
            if self.temporal_extent < 3 || self.temporal_extent.is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "temporal extent {} must be odd and at least 3",
                    self.temporal_extent
                )));
            }
        } else if self.temporal_extent != 1 {
            return Err(Error::InvalidArgument(
                "spatial-only stages must have temporal extent 1".into(),
            ));
        }
        Ok(())
    }

    pub fn kernel_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.temporal_extent,
            self.spatial_extent,
            self.spatial_extent,
        ]
    }

    pub fn spatial_padding(&self) -> usize {
        self.spatial_extent / 2
    }

    /// Spatial output size for an input extent.
    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.spatial_padding() - self.spatial_extent) / self.spatial_stride + 1
    }
}

/// Architecture hyperparameters for [`build_toy_net`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub temporal: Vec<bool>,
    pub temporal_extent: usize,
    pub spatial_extent: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 8, 16, 16],
            strides: vec![2, 1, 2, 1],
            temporal: vec![false, true, true, true],
            temporal_extent: 3,
            spatial_extent: 3,
        }
    }
}

/// Full description of a classifier: stages plus input geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    /// Maximum clip length T.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl NetSpec {
    pub fn from_config(
        cfg: &NetConfig,
        num_classes: usize,
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let n = cfg.widths.len();
        if n == 0 || cfg.strides.len() != n || cfg.temporal.len() != n {
            return Err(Error::InvalidArgument(
                "widths, strides and temporal must be non-empty and equally long".into(),
            ));
        }
        let mut stages = Vec::with_capacity(n);
        let mut in_ch = channels;
        for i in 0..n {
            stages.push(StageSpec {
                in_channels: in_ch,
                out_channels: cfg.widths[i],
                temporal_extent: if cfg.temporal[i] {
                    cfg.temporal_extent
                } else {
                    1
                },
                spatial_extent: cfg.spatial_extent,
                spatial_stride: cfg.strides[i],
                has_temporal_conv: cfg.temporal[i],
            });
            in_ch = cfg.widths[i];
        }
        let spec = Self {
            stages,
            num_classes,
            frames,
            height,
            width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.stages {
            s.validate()?;
        }
        if self.num_temporal() == 0 {
            return Err(Error::InvalidArgument(
                "at least one stage must have a temporal convolution".into(),
            ));
        }
        if self.num_classes < 2 || self.frames == 0 {
            return Err(Error::InvalidArgument(
                "need ≥ 2 classes and ≥ 1 frame".into(),
            ));
        }
        for w in self.stages.windows(2) {
            if w[0].out_channels != w[1].in_channels {
                return Err(Error::InvalidArgument("stage channel mismatch".into()));
            }
        }
        Ok(())
    }

    /// Number K of gateable stages.
    pub fn num_temporal(&self) -> usize {
        self.stages.iter().filter(|s| s.has_temporal_conv).count()
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].in_channels
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().unwrap().out_channels
    }

    /// Spatial (height, width) after each stage.
    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.stages
            .iter()
            .map(|s| {
                h = s.output_extent(h);
                w = s.output_extent(w);
                (h, w)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoNet {
    pub spec: NetSpec,
    pub params: Params,
}

pub fn stage_weight_name(i: usize) -> String {
    format!("stage{i}.weight")
}

pub fn stage_bias_name(i: usize) -> String {
    format!("stage{i}.bias")
}

/// Deterministic He-normal initialisation; biases start at zero.
pub fn build_toy_net(spec: NetSpec, seed: u64) -> Result<VideoNet> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[tag::INIT, 0]);
    let mut params = Params::new();
    let mut he = |shape: &[usize], fan_in: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| normal.sample(&mut rng)).collect(),
        )
        .expect("consistent shape")
    };
    for (i, s) in spec.stages.iter().enumerate() {
        let shape = s.kernel_shape();
        let fan_in = shape[1..].iter().product();
        params.push(stage_weight_name(i), he(&shape, fan_in));
        params.push(stage_bias_name(i), Tensor::zeros(&[s.out_channels]));
    }
    let c = spec.feature_channels();
    params.push("head.weight", he(&[c, spec.num_classes], c));
    params.push("head.bias", Tensor::zeros(&[spec.num_classes]));
    Ok(VideoNet { spec, params })
}

/// The `⌊t/2⌋` temporal slice of a `[Co, C, t, d, d]` kernel as `[Co, C, d, d]`.
pub fn degrade_kernel(kernel: &Tensor) -> Result<Tensor> {
    let s = kernel.shape();
    if s.len() != 5 {
        return Err(Error::InvalidArgument(format!(
            "expected a 5-d kernel, got {s:?}"
        )));
    }
    let (co, c, t, kh, kw) = (s[0], s[1], s[2], s[3], s[4]);
    let center = t / 2;
    let plane = kh * kw;
    let mut out = Vec::with_capacity(co * c * plane);
    for o in 0..co {
        for i in 0..c {
            let base = ((o * c + i) * t + center) * plane;
            out.extend_from_slice(&kernel.data()[base..base + plane]);
        }
    }
    Ok(Tensor::new(vec![co, c, kh, kw], out)?)
}

/// Tape version of [`degrade_kernel`], kept 5-d (`t = 1`) for conv3d. Gradient
/// flows only into the center slice.
pub fn degrade_stage(tape: &mut Tape, kernel: Var) -> Result<Var> {
    let t = tape.shape(kernel)[2];
    Ok(tape.slice(kernel, 2, t / 2, t / 2 + 1)?)
}

/// Keeps the frames of a `[T, C, H, W]` clip whose bit in `keep` is set,
/// preserving their order.
pub fn gather_frames(clip: &[f64], frame_len: usize, keep: &[bool]) -> Vec<f64> {
    keep.iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .flat_map(|(t, _)| clip[t * frame_len..(t + 1) * frame_len].iter().copied())
        .collect()
}

impl VideoNet {
    pub fn num_temporal(&self) -> usize {
        self.spec.num_temporal()
    }

    pub fn frame_len(&self) -> usize {
        self.spec.in_channels() * self.spec.height * self.spec.width
    }

    /// Records the gated forward pass of one clip `[T', C, H, W]` on `tape`
    /// and returns logits `[1, num_classes]`. `vars` are this net's
    /// parameters bound on the same tape; `v[k]` enables the k-th temporal stage.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        clip: &[f64],
        v: &[bool],
    ) -> Result<Var> {
        let k = self.num_temporal();
        if v.len() != k {
            return Err(Error::InvalidArgument(format!(
                "stage mask has {} bits, net has {k} temporal stages",
                v.len()
            )));
        }
        let frame_len = self.frame_len();
        if clip.is_empty() || !clip.len().is_multiple_of(frame_len) {
            return Err(Error::InvalidArgument(
                "clip must contain at least one whole frame".into(),
            ));
        }
        let t = clip.len() / frame_len;
        if t > self.spec.frames {
            return Err(Error::InvalidArgument(format!(
                "clip has {t} frames, net accepts at most {}",
                self.spec.frames
            )));
        }
        let (c, h, w) = (self.spec.in_channels(), self.spec.height, self.spec.width);
        // [T, C, H, W] -> [1, C, T, H, W]
        let mut x = vec![0.0; clip.len()];
        for ti in 0..t {
            for ci in 0..c {
                let src = (ti * c + ci) * h * w;
                let dst = (ci * t + ti) * h * w;
                x[dst..dst + h * w].copy_from_slice(&clip[src..src + h * w]);
            }
        }
        let mut act = tape.constant(Tensor::new(vec![1, c, t, h, w], x)?);
        let mut gate = v.iter();
        for (i, s) in self.spec.stages.iter().enumerate() {
            let weight = vars[2 * i];
            let bias = vars[2 * i + 1];
            let pad = s.spatial_padding();
            let stride = s.spatial_stride;
            let temporal_on = s.has_temporal_conv && *gate.next().unwrap();
            let (kernel, tpad) = if !s.has_temporal_conv {
                (weight, 0)
            } else if temporal_on {
                (weight, s.temporal_extent / 2)
            } else {
                (degrade_stage(tape, weight)?, 0)
            };
            let y = tape.conv3d(
                act,
                kernel,
                ConvGeom::new([1, stride, stride], [tpad, pad, pad]),
            )?;
            let y = tape.add_bias(y, bias, 1)?;
            act = tape.relu(y);
        }
        let shape = tape.shape(act).to_vec();
        let flat = tape.reshape(act, &[shape[1], shape[2] * shape[3] * shape[4]])?;
        let pooled = tape.mean_axis(flat, 1)?;
        let pooled = tape.reshape(pooled, &[1, shape[1]])?;
        let nstage = self.spec.stages.len();
        let logits = tape.matmul(pooled, vars[2 * nstage])?;
        Ok(tape.add_bias(logits, vars[2 * nstage + 1], 1)?)
    }

    /// Class probabilities for one clip `[T', C, H, W]` under stage mask `v`.
    pub fn forward(&self, clip: &[f64], v: &[bool]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let logits = self.forward_tape(&mut tape, &vars, clip, v)?;
        Ok(softmax(tape.value(logits).data()))
    }

    /// Probabilities for a full clip after dropping frames with `u[t] = false`.
    pub fn forward_gated(&self, clip: &[f64], u: &[bool], v: &[bool]) -> Result<Vec<f64>> {
        if u.len() != self.spec.frames {
            return Err(Error::InvalidArgument(format!(
                "frame mask has {} bits, expected {}",
                u.len(),
                self.spec.frames
            )));
        }
        let sub = gather_frames(clip, self.frame_len(), u);
        if sub.is_empty() {
            return Err(Error::InvalidArgument("empty frame subset".into()));
        }
        self.forward(&sub, v)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}
