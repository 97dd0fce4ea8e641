//! Greedy evaluation, per-clip policy dumps and the gamma sweep.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{count_forward, mean_usage, UsageSample};
use crate::data::{ClipBatch, Dataset, MotionTag};
use crate::gating::{GatingPolicy, Learned};
use crate::selection::{
    build_selection_net, cost_convs, cost_frames, reward, RewardConfig, SelectionSpec,
};
use crate::trainer::{train_adaptive, TrainConfig};
use crate::video_net::{argmax, VideoNet};
use crate::{Error, Result};

/// One line of a policy dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub clip_id: u64,
    pub label: usize,
    pub prediction: usize,
    pub motion_tag: MotionTag,
    pub m: Option<Vec<f64>>,
    pub n: Option<Vec<f64>>,
    pub u: Vec<u8>,
    pub v: Vec<u8>,
    pub correct: bool,
    pub cost_u: f64,
    pub cost_v: f64,
    pub reward_u: f64,
    pub reward_v: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub clips: usize,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub mean_3d: f64,
    pub mean_frames: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub policy: String,
    pub gamma: f64,
    pub clips: usize,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub mean_3d: f64,
    pub mean_frames: f64,
    pub mean_reward_u: f64,
    pub mean_reward_v: f64,
    /// Keyed by motion tag (`"motion"`, `"static"`).
    pub per_tag: BTreeMap<String, UsageStats>,
}

fn tag_key(t: MotionTag) -> &'static str {
    match t {
        MotionTag::Static => "static",
        MotionTag::Motion => "motion",
    }
}

fn bits(b: &[bool]) -> Vec<u8> {
    b.iter().map(|&x| x as u8).collect()
}

fn stats(records: &[&PolicyRecord]) -> Result<UsageStats> {
    let usage: Vec<UsageSample> = records
        .iter()
        .map(|r| UsageSample {
            flops: r.flops,
            stages: r.v.iter().filter(|&&x| x == 1).count(),
            frames: r.u.iter().filter(|&&x| x == 1).count(),
        })
        .collect();
    let m = mean_usage(&usage)?;
    Ok(UsageStats {
        clips: records.len(),
        accuracy: records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64,
        mean_flops: m.flops,
        mean_3d: m.stages,
        mean_frames: m.frames,
    })
}

/// Aggregates a dump. The summary is a pure function of the records.
pub fn summarize(records: &[PolicyRecord], policy: &str, gamma: f64) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let all: Vec<&PolicyRecord> = records.iter().collect();
    let overall = stats(&all)?;
    let mut per_tag = BTreeMap::new();
    for t in [MotionTag::Static, MotionTag::Motion] {
        let sub: Vec<&PolicyRecord> = records.iter().filter(|r| r.motion_tag == t).collect();
        if !sub.is_empty() {
            per_tag.insert(tag_key(t).to_string(), stats(&sub)?);
        }
    }
    let n = records.len() as f64;
    Ok(EvalSummary {
        policy: policy.to_string(),
        gamma,
        clips: records.len(),
        accuracy: overall.accuracy,
        mean_flops: overall.mean_flops,
        mean_3d: overall.mean_3d,
        mean_frames: overall.mean_frames,
        mean_reward_u: records.iter().map(|r| r.reward_u).sum::<f64>() / n,
        mean_reward_v: records.iter().map(|r| r.reward_v).sum::<f64>() / n,
        per_tag,
    })
}

/// Runs `policy` greedily over `test` and the classifier on every gated clip.
pub fn evaluate(
    policy: &dyn GatingPolicy,
    classifier: &VideoNet,
    test: &ClipBatch,
    reward_cfg: &RewardConfig,
) -> Result<(EvalSummary, Vec<PolicyRecord>)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let decisions = policy.decide(test)?;
    let overhead = policy.overhead_macs();
    let mut records = Vec::with_capacity(test.len());
    for (i, d) in decisions.into_iter().enumerate() {
        let a = &d.action;
        let probs = classifier.forward_gated(test.clip(i), &a.u, &a.v)?;
        let prediction = argmax(&probs);
        let correct = prediction == test.labels[i];
        let (cost_u, cost_v) = (cost_frames(&a.u), cost_convs(&a.v));
        let flops = 2 * (count_forward(&classifier.spec, a.frames_used(), &a.v)?.macs + overhead);
        records.push(PolicyRecord {
            clip_id: test.clip_ids[i],
            label: test.labels[i],
            prediction,
            motion_tag: test.motion_tags[i],
            m: d.policy.as_ref().map(|p| p.m.clone()),
            n: d.policy.as_ref().map(|p| p.n.clone()),
            u: bits(&a.u),
            v: bits(&a.v),
            correct,
            cost_u,
            cost_v,
            reward_u: reward(correct, cost_u, reward_cfg),
            reward_v: reward(correct, cost_v, reward_cfg),
            flops,
        });
    }
    let summary = summarize(&records, policy.name(), reward_cfg.gamma)?;
    Ok((summary, records))
}

/// For each gamma: fresh selection network, both training stages from the
/// given pretrained classifier, greedy evaluation. Output order follows `gammas`.
pub fn sweep_gamma(
    gammas: &[f64],
    pretrained: &VideoNet,
    selection: &SelectionSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    reward_template: &RewardConfig,
) -> Result<Vec<EvalSummary>> {
    if gammas.is_empty() {
        return Err(Error::InvalidArgument("empty gamma list".into()));
    }
    gammas
        .iter()
        .map(|&gamma| {
            let reward_cfg = RewardConfig {
                gamma,
                ..reward_template.clone()
            };
            let sel = build_selection_net(selection.clone(), cfg.seed)?;
            let run = train_adaptive(pretrained, sel, &data.train, cfg, &reward_cfg)?;
            let (summary, _) = evaluate(
                &Learned::new(run.selection),
                &run.classifier,
                &data.test,
                &reward_cfg,
            )?;
            Ok(summary)
        })
        .collect()
}

pub fn write_summary(path: &Path, summary: &EvalSummary) -> Result<()> {
    let mut s = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<EvalSummary> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_dump(path: &Path, records: &[PolicyRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<PolicyRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// `gamma,accuracy,mean_flops,mean_3d,mean_frames` rows.
pub fn sweep_csv(rows: &[EvalSummary]) -> String {
    let mut out = String::from("gamma,accuracy,mean_flops,mean_3d,mean_frames\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.gamma, r.accuracy, r.mean_flops, r.mean_3d, r.mean_frames
        ));
    }
    out
}
