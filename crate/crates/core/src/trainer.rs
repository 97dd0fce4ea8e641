//! Two-stage training: classifier pretraining, selection-network training
//! against a frozen classifier, then joint fine-tuning of both; plus the
//! usage-matched random baselines.
//!
//! Every step processes one mini-batch. The selection network runs once on
//! the whole batch (one tape); the classifier runs one tape per clip and the
//! clip gradients are summed in batch order, so results are bit-reproducible.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cost::{self, count_forward};
use crate::data::ClipBatch;
use crate::gating::RandomKeep;
use crate::optim::Sgd;
use crate::rng::{self, tag};
use crate::selection::{
    self, cost_convs, cost_frames, log_prob_tape, reinforce_loss, reward, split_policy, ActionMask,
    ActionMode, Baselines, RewardConfig, SelectionNet,
};
use crate::tensor::Tape;
use crate::video_net::{argmax, gather_frames, VideoNet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    /// Selection-network epochs with the classifier frozen.
    pub selection_epochs: usize,
    /// Joint fine-tuning epochs.
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr_pretrain: f64,
    pub lr_selection: f64,
    /// Classifier learning rate during joint fine-tuning (and random fine-tuning).
    pub lr_joint: f64,
    /// Selection-network learning rate during joint fine-tuning.
    pub lr_joint_policy: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 4,
            selection_epochs: 3,
            joint_epochs: 20,
            batch_size: 32,
            lr_pretrain: 0.02,
            lr_selection: 0.01,
            lr_joint: 0.01,
            lr_joint_policy: 0.06,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.selection_epochs == 0 || self.joint_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, selection_epochs and joint_epochs must be positive".into(),
            ));
        }
        let lrs = [
            self.lr_pretrain,
            self.lr_selection,
            self.lr_joint,
            self.lr_joint_policy,
        ];
        if lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return Err(Error::InvalidArgument(
                "learning rates must be finite and ≥ 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Selection,
    Joint,
    RandomFinetune,
}

impl Phase {
    fn id(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::Selection => 1,
            Phase::Joint => 2,
            Phase::RandomFinetune => 3,
        }
    }
}

/// Training statistics for one epoch, measured on the sampled actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub mean_reward_u: f64,
    pub mean_reward_v: f64,
    pub accuracy: f64,
    pub mean_frames: f64,
    pub mean_stages: f64,
    pub mean_flops: f64,
    pub policy_loss: f64,
    pub cls_loss: f64,
}

pub type RunMetrics = Vec<EpochRecord>;

/// Where a step's actions come from.
enum Actor<'a> {
    Full,
    Learned {
        net: &'a mut SelectionNet,
        opt: Option<Sgd>,
        baselines: &'a mut Baselines,
    },
    Random(&'a RandomKeep),
}

struct Gated<'a> {
    phase: Phase,
    epochs: usize,
    actor: Actor<'a>,
    classifier_opt: Option<Sgd>,
}

#[derive(Default)]
struct Tally {
    clips: usize,
    correct: usize,
    reward_u: f64,
    reward_v: f64,
    frames: f64,
    stages: f64,
    flops: f64,
    policy_loss: f64,
    cls_loss: f64,
}

fn run_gated(
    mut job: Gated<'_>,
    f: &mut VideoNet,
    data: &ClipBatch,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
) -> Result<RunMetrics> {
    cfg.validate()?;
    reward_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let frames_t = f.spec.frames;
    let stages_k = f.num_temporal();
    let frame_len = f.frame_len();
    let overhead = match &job.actor {
        Actor::Learned { net, .. } => cost::selection_macs(&net.spec),
        _ => 0,
    };
    let mut records = Vec::with_capacity(job.epochs);
    for epoch in 0..job.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(
            cfg.seed,
            &[tag::SHUFFLE, job.phase.id(), epoch as u64],
        ));
        let mut tally = Tally::default();
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch = data.select(batch_idx);
            let b = batch.len();
            let action_rng = |clip_id: u64| {
                rng::stream(
                    cfg.seed,
                    &[tag::ACTION, job.phase.id(), epoch as u64, clip_id],
                )
            };

            // 1. actions
            let mut policy_tape = Tape::new();
            let mut policy_vars = Vec::new();
            let mut policy_heads = None;
            let actions: Vec<ActionMask> = match &job.actor {
                Actor::Full => (0..b)
                    .map(|_| ActionMask::full(frames_t, stages_k))
                    .collect(),
                Actor::Random(r) => batch
                    .clip_ids
                    .iter()
                    .map(|&id| r.draw(&mut action_rng(id), ActionMode::Sampled))
                    .collect(),
                Actor::Learned { net, opt, .. } => {
                    policy_vars = net.params.bind(&mut policy_tape, opt.is_some());
                    let h =
                        net.policy_forward_tape(&mut policy_tape, &policy_vars, &batch.frames)?;
                    policy_heads = Some(h);
                    split_policy(policy_tape.value(h.m), policy_tape.value(h.n))
                        .iter()
                        .zip(&batch.clip_ids)
                        .map(|(p, &id)| selection::sample_action(p, &mut action_rng(id)))
                        .collect()
                }
            };

            // 2. classifier on the gated clips
            let mut f_grads = f.params.zeros_like();
            let mut rewards_u = Vec::with_capacity(b);
            let mut rewards_v = Vec::with_capacity(b);
            let mut batch_cls_loss = 0.0;
            for (i, a) in actions.iter().enumerate() {
                let sub = gather_frames(batch.clip(i), frame_len, &a.u);
                let mut tape = Tape::new();
                let vars = f.params.bind(&mut tape, job.classifier_opt.is_some());
                let logits = f.forward_tape(&mut tape, &vars, &sub, &a.v)?;
                let logp = tape.log_softmax(logits)?;
                let label = batch.labels[i];
                let nll = -tape.value(logp).data()[label];
                if !nll.is_finite() {
                    return Err(Error::Diverged(format!(
                        "{:?} epoch {epoch}: non-finite classification loss",
                        job.phase
                    )));
                }
                batch_cls_loss += nll;
                let correct = argmax(tape.value(logits).data()) == label;
                if job.classifier_opt.is_some() {
                    let picked = tape.slice(logp, 1, label, label + 1)?;
                    let loss = tape.scale(picked, -1.0 / b as f64);
                    tape.backward(loss)?;
                    f_grads.accumulate_from(&tape, &vars);
                }
                let ru = reward(correct, cost_frames(&a.u), reward_cfg);
                let rv = reward(correct, cost_convs(&a.v), reward_cfg);
                rewards_u.push(ru);
                rewards_v.push(rv);
                tally.clips += 1;
                tally.correct += correct as usize;
                tally.reward_u += ru;
                tally.reward_v += rv;
                tally.frames += a.frames_used() as f64;
                tally.stages += a.stages_used() as f64;
                tally.flops +=
                    (count_forward(&f.spec, a.frames_used(), &a.v)?.macs + overhead) as f64 * 2.0;
            }
            tally.cls_loss += batch_cls_loss;

            // 3. policy update
            if let Actor::Learned {
                net,
                opt,
                baselines,
            } = &mut job.actor
            {
                let h = policy_heads.expect("learned actor records heads");
                let (lpf, lpc) = log_prob_tape(&mut policy_tape, h.m, h.n, &actions)?;
                let loss = reinforce_loss(
                    &mut policy_tape,
                    lpf,
                    lpc,
                    &rewards_u,
                    &rewards_v,
                    baselines,
                )?;
                let loss_value = policy_tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "{:?} epoch {epoch}: non-finite policy loss",
                        job.phase
                    )));
                }
                tally.policy_loss += loss_value * b as f64;
                if let Some(opt) = opt {
                    policy_tape.backward(loss)?;
                    let mut g = net.params.zeros_like();
                    g.accumulate_from(&policy_tape, &policy_vars);
                    opt.step(&mut net.params, &g)?;
                    net.update_embed_mean(policy_tape.value(h.embedding))?;
                }
                let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
                baselines.update(
                    reward_cfg.baseline_decay,
                    mean(&rewards_u),
                    mean(&rewards_v),
                );
            }

            // 4. classifier update
            if let Some(opt) = &mut job.classifier_opt {
                opt.step(&mut f.params, &f_grads)?;
            }
        }
        let n = tally.clips as f64;
        records.push(EpochRecord {
            phase: job.phase,
            epoch,
            mean_reward_u: tally.reward_u / n,
            mean_reward_v: tally.reward_v / n,
            accuracy: tally.correct as f64 / n,
            mean_frames: tally.frames / n,
            mean_stages: tally.stages / n,
            mean_flops: tally.flops / n,
            policy_loss: tally.policy_loss / n,
            cls_loss: tally.cls_loss / n,
        });
    }
    Ok(records)
}

/// Cross-entropy training on full clips with every temporal stage on.
pub fn pretrain_classifier(
    net: &mut VideoNet,
    data: &ClipBatch,
    cfg: &TrainConfig,
) -> Result<RunMetrics> {
    if cfg.pretrain_epochs == 0 {
        return Ok(Vec::new());
    }
    run_gated(
        Gated {
            phase: Phase::Pretrain,
            epochs: cfg.pretrain_epochs,
            actor: Actor::Full,
            classifier_opt: Some(Sgd::new(cfg.lr_pretrain, cfg.momentum)),
        },
        net,
        data,
        cfg,
        &RewardConfig::default(),
    )
}

/// Policy-gradient training of the selection network. The classifier is
/// borrowed immutably and never updated.
pub fn train_selection(
    sel: &mut SelectionNet,
    classifier: &VideoNet,
    data: &ClipBatch,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
    baselines: &mut Baselines,
) -> Result<RunMetrics> {
    let mut frozen = classifier.clone();
    run_gated(
        Gated {
            phase: Phase::Selection,
            epochs: cfg.selection_epochs,
            actor: Actor::Learned {
                net: sel,
                opt: Some(Sgd::new(cfg.lr_selection, cfg.momentum)),
                baselines,
            },
            classifier_opt: None,
        },
        &mut frozen,
        data,
        cfg,
        reward_cfg,
    )
}

/// Which terms of the joint objective are optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointTerms {
    pub policy: bool,
    pub classifier: bool,
}

impl Default for JointTerms {
    fn default() -> Self {
        Self {
            policy: true,
            classifier: true,
        }
    }
}

/// Joint fine-tuning: the policy-gradient step on the selection network and
/// a cross-entropy step on the classifier, both from the same sampled
/// actions and the same forward pass. Actions are constants for the
/// classifier update.
pub fn joint_finetune(
    sel: &mut SelectionNet,
    classifier: &mut VideoNet,
    data: &ClipBatch,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
    baselines: &mut Baselines,
    terms: JointTerms,
) -> Result<RunMetrics> {
    run_gated(
        Gated {
            phase: Phase::Joint,
            epochs: cfg.joint_epochs,
            actor: Actor::Learned {
                net: sel,
                opt: terms
                    .policy
                    .then(|| Sgd::new(cfg.lr_joint_policy, cfg.momentum)),
                baselines,
            },
            classifier_opt: terms
                .classifier
                .then(|| Sgd::new(cfg.lr_joint, cfg.momentum)),
        },
        classifier,
        data,
        cfg,
        reward_cfg,
    )
}

/// Classifier fine-tuning under i.i.d. random masks (the Random FT baseline).
pub fn finetune_with_random(
    classifier: &mut VideoNet,
    policy: &RandomKeep,
    data: &ClipBatch,
    cfg: &TrainConfig,
) -> Result<RunMetrics> {
    run_gated(
        Gated {
            phase: Phase::RandomFinetune,
            epochs: cfg.joint_epochs,
            actor: Actor::Random(policy),
            classifier_opt: Some(Sgd::new(cfg.lr_joint, cfg.momentum)),
        },
        classifier,
        data,
        cfg,
        &RewardConfig::default(),
    )
}

/// Everything produced by the two-stage procedure.
#[derive(Debug, Clone)]
pub struct AdaptiveRun {
    /// Selection network after the frozen-classifier stage.
    pub selection_stage1: SelectionNet,
    pub selection: SelectionNet,
    pub classifier: VideoNet,
    pub baselines: Baselines,
    pub metrics: RunMetrics,
}

/// Runs both training stages starting from a pretrained classifier and a
/// freshly initialised selection network.
pub fn train_adaptive(
    pretrained: &VideoNet,
    selection_init: SelectionNet,
    data: &ClipBatch,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
) -> Result<AdaptiveRun> {
    let mut sel = selection_init;
    let mut baselines = Baselines::default();
    let mut metrics = train_selection(&mut sel, pretrained, data, cfg, reward_cfg, &mut baselines)?;
    let selection_stage1 = sel.clone();
    let mut classifier = pretrained.clone();
    metrics.extend(joint_finetune(
        &mut sel,
        &mut classifier,
        data,
        cfg,
        reward_cfg,
        &mut baselines,
        JointTerms::default(),
    )?);
    Ok(AdaptiveRun {
        selection_stage1,
        selection: sel,
        classifier,
        baselines,
        metrics,
    })
}

pub fn write_metrics(path: &std::path::Path, metrics: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in metrics {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics(path: &std::path::Path) -> Result<RunMetrics> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}
