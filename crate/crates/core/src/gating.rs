//! Interchangeable gating policies behind one trait, looked up by name.
//!
//! A [`GatingPolicy`] decides, per clip, which frames to keep and which
//! temporal stages to run. The learned selection network, the full-usage
//! reference and the usage-matched random policy all plug in here, so the
//! evaluator and CLI treat them uniformly.

use rand::Rng;

use crate::cost;
use crate::data::ClipBatch;
use crate::rng::{self, tag};
use crate::selection::{self, ActionMask, ActionMode, PolicyOutput, SelectionNet};
use crate::{Error, Result};

/// One clip's decision; `policy` is present for learned policies.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub policy: Option<PolicyOutput>,
    pub action: ActionMask,
}

pub trait GatingPolicy {
    fn name(&self) -> &'static str;

    /// Deterministic evaluation-time decisions for every clip in `batch`.
    fn decide(&self, batch: &ClipBatch) -> Result<Vec<Decision>>;

    /// Extra MACs spent per clip to reach the decision.
    fn overhead_macs(&self) -> u64 {
        0
    }
}

/// Every frame and every temporal stage.
#[derive(Debug, Clone)]
pub struct FullUsage {
    pub frames: usize,
    pub stages: usize,
}

impl GatingPolicy for FullUsage {
    fn name(&self) -> &'static str {
        "upper"
    }

    fn decide(&self, batch: &ClipBatch) -> Result<Vec<Decision>> {
        Ok((0..batch.len())
            .map(|_| Decision {
                policy: None,
                action: ActionMask::full(self.frames, self.stages),
            })
            .collect())
    }
}

/// Greedy decoding of a trained selection network.
#[derive(Debug, Clone)]
pub struct Learned {
    pub net: SelectionNet,
    /// Clips per selection-network forward call.
    pub chunk: usize,
}

impl Learned {
    pub fn new(net: SelectionNet) -> Self {
        Self { net, chunk: 64 }
    }
}

impl GatingPolicy for Learned {
    fn name(&self) -> &'static str {
        "learned"
    }

    fn decide(&self, batch: &ClipBatch) -> Result<Vec<Decision>> {
        let mut out = Vec::with_capacity(batch.len());
        let idx: Vec<usize> = (0..batch.len()).collect();
        for chunk in idx.chunks(self.chunk.max(1)) {
            let sub = batch.select(chunk);
            for p in self.net.policy_forward(&sub.frames)? {
                out.push(Decision {
                    action: selection::greedy_action(&p),
                    policy: Some(p),
                });
            }
        }
        Ok(out)
    }

    fn overhead_macs(&self) -> u64 {
        cost::selection_macs(&self.net.spec)
    }
}

/// I.i.d. Bernoulli masks with fixed per-bit keep rates.
///
/// Evaluation masks are a function of `(seed, clip_id)` only.
#[derive(Debug, Clone)]
pub struct RandomKeep {
    pub frames: usize,
    pub stages: usize,
    pub frame_rate: f64,
    pub stage_rate: f64,
    pub seed: u64,
}

impl RandomKeep {
    /// Keep rates whose expected `‖u‖₀` (after the at-least-one-frame rule)
    /// and `‖v‖₀` equal the targets.
    pub fn matching(
        frames: usize,
        stages: usize,
        target_frames: f64,
        target_stages: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(1.0..=frames as f64).contains(&target_frames)
            || !(0.0..=stages as f64).contains(&target_stages)
        {
            return Err(Error::InvalidArgument(format!(
                "usage targets ({target_frames}, {target_stages}) outside [1, {frames}] x [0, {stages}]"
            )));
        }
        Ok(Self {
            frames,
            stages,
            frame_rate: frame_rate_for(frames, target_frames),
            stage_rate: target_stages / stages as f64,
            seed,
        })
    }

    pub fn draw(&self, rng: &mut impl Rng, mode: ActionMode) -> ActionMask {
        let u = (0..self.frames)
            .map(|_| rng.gen::<f64>() < self.frame_rate)
            .collect();
        let v = (0..self.stages)
            .map(|_| rng.gen::<f64>() < self.stage_rate)
            .collect();
        ActionMask::new(u, v, mode)
    }
}

/// Expected kept frames at keep rate `p`, counting the forced fallback frame.
pub fn expected_frames(frames: usize, p: f64) -> f64 {
    frames as f64 * p + (1.0 - p).powi(frames as i32)
}

fn frame_rate_for(frames: usize, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected_frames(frames, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl GatingPolicy for RandomKeep {
    fn name(&self) -> &'static str {
        "random"
    }

    fn decide(&self, batch: &ClipBatch) -> Result<Vec<Decision>> {
        Ok(batch
            .clip_ids
            .iter()
            .map(|&id| {
                let mut r = rng::stream(self.seed, &[tag::RANDOM_POLICY, id]);
                Decision {
                    policy: None,
                    action: self.draw(&mut r, ActionMode::Fixed),
                }
            })
            .collect())
    }
}

/// Inputs a policy constructor may draw on.
#[derive(Default)]
pub struct PolicyContext {
    pub frames: usize,
    pub stages: usize,
    pub selection: Option<SelectionNet>,
    /// Target `(mean ‖u‖₀, mean ‖v‖₀)` for usage-matched policies.
    pub target_usage: Option<(f64, f64)>,
    pub seed: u64,
}

type Builder = fn(PolicyContext) -> Result<Box<dyn GatingPolicy>>;

const REGISTRY: &[(&str, Builder)] = &[
    ("upper", |ctx| {
        Ok(Box::new(FullUsage {
            frames: ctx.frames,
            stages: ctx.stages,
        }))
    }),
    ("learned", |ctx| {
        let net = ctx.selection.ok_or_else(|| {
            Error::InvalidArgument("learned policy needs a selection network".into())
        })?;
        Ok(Box::new(Learned::new(net)))
    }),
    ("random", |ctx| {
        let (f, s) = ctx
            .target_usage
            .ok_or_else(|| Error::InvalidArgument("random policy needs target usage".into()))?;
        Ok(Box::new(RandomKeep::matching(
            ctx.frames, ctx.stages, f, s, ctx.seed,
        )?))
    }),
];

pub fn policy_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build_policy(name: &str, ctx: PolicyContext) -> Result<Box<dyn GatingPolicy>> {
    let (_, build) = REGISTRY.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "unknown policy '{name}' (known: {})",
            policy_names().join(", ")
        ))
    })?;
    build(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_rate_hits_target() {
        for target in [1.0, 1.5, 3.0, 6.5, 8.0] {
            let p = frame_rate_for(8, target);
            assert!(
                (expected_frames(8, p) - target).abs() < 1e-9,
                "target {target}"
            );
        }
    }

    #[test]
    fn unknown_policy_rejected() {
        let err = build_policy("oracle", PolicyContext::default())
            .err()
            .unwrap();
        assert!(err.to_string().contains("upper"));
        assert!(build_policy("learned", PolicyContext::default()).is_err());
        assert!(build_policy("random", PolicyContext::default()).is_err());
    }

    #[test]
    fn registry_lists_all() {
        assert_eq!(policy_names(), vec!["upper", "learned", "random"]);
    }
}
