//! Closed-form multiply-accumulate accounting.
//!
//! Conventions: one MAC per kernel tap per output element (zero-padded taps
//! included), `FLOPs = 2 · MACs`. Bias additions, pooling, activations and
//! softmax are not counted. Selection-network cost is reported separately
//! and included in the total.

use serde::{Deserialize, Serialize};

use crate::selection::SelectionSpec;
use crate::video_net::NetSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: usize,
    pub macs: u64,
    pub temporal_active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub macs: u64,
    pub flops: u64,
    pub per_stage: Vec<StageCost>,
    pub head_macs: u64,
    pub selection_overhead_macs: u64,
}

impl FlopsReport {
    /// Adds the per-clip cost of running the selection network.
    pub fn with_selection(mut self, sel: &SelectionSpec) -> Self {
        let extra = selection_macs(sel);
        self.selection_overhead_macs += extra;
        self.macs += extra;
        self.flops = 2 * self.macs;
        self
    }
}

/// Cost of the classifier on a clip of `frames` frames with stage mask `v`.
pub fn count_forward(net: &NetSpec, frames: usize, v: &[bool]) -> Result<FlopsReport> {
    if frames == 0 || frames > net.frames {
        return Err(Error::InvalidArgument(format!(
            "frame count {frames} outside 1..={}",
            net.frames
        )));
    }
    if v.len() != net.num_temporal() {
        return Err(Error::InvalidArgument(format!(
            "stage mask has {} bits, net has {} temporal stages",
            v.len(),
            net.num_temporal()
        )));
    }
    let sizes = net.spatial_sizes();
    let mut gate = v.iter();
    let mut per_stage = Vec::with_capacity(net.stages.len());
    for (i, (s, (h, w))) in net.stages.iter().zip(sizes).enumerate() {
        let active = s.has_temporal_conv && *gate.next().unwrap();
        let t = if active { s.temporal_extent } else { 1 };
        let taps = (s.in_channels * t * s.spatial_extent * s.spatial_extent) as u64;
        let outputs = (s.out_channels * frames * h * w) as u64;
        per_stage.push(StageCost {
            stage: i,
            macs: taps * outputs,
            temporal_active: active,
        });
    }
    let head_macs = (net.feature_channels() * net.num_classes) as u64;
    let macs = per_stage.iter().map(|s| s.macs).sum::<u64>() + head_macs;
    Ok(FlopsReport {
        macs,
        flops: 2 * macs,
        per_stage,
        head_macs,
        selection_overhead_macs: 0,
    })
}

/// MACs of one selection-network pass over a full clip.
pub fn selection_macs(sel: &SelectionSpec) -> u64 {
    let mut in_ch = sel.in_channels;
    let mut total = 0u64;
    for (&w, (h, wd)) in sel.widths.iter().zip(sel.layer_sizes()) {
        total += (w * in_ch * 9 * h * wd) as u64;
        in_ch = w;
    }
    total *= sel.frames as u64;
    total + (sel.feature_dim() * (sel.frames + sel.num_stages)) as u64
}

/// Per-clip usage numbers fed to [`mean_usage`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageSample {
    pub flops: u64,
    pub stages: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanUsage {
    pub flops: f64,
    pub stages: f64,
    pub frames: f64,
}

/// Arithmetic means of FLOPs, `‖v‖₀` and `‖u‖₀`.
pub fn mean_usage(samples: &[UsageSample]) -> Result<MeanUsage> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation run".into()));
    }
    let n = samples.len() as f64;
    Ok(MeanUsage {
        flops: samples.iter().map(|s| s.flops as f64).sum::<f64>() / n,
        stages: samples.iter().map(|s| s.stages as f64).sum::<f64>() / n,
        frames: samples.iter().map(|s| s.frames as f64).sum::<f64>() / n,
    })
}
