//! Group-relative policy optimization over evidence-inserting rollouts.
//!
//! Every step samples a batch of prompts, rolls out a group per prompt under
//! frozen weights, scores and normalizes rewards within each group, takes one
//! clipped-surrogate gradient step and finally refreshes the cached evidence
//! of prompts whose evidence-using rollouts still failed.

mod optim;
mod replay;
mod warm_start;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{Adam, AdamParams, Sgd};
pub use replay::Replay;
pub use warm_start::{
    gold_snapshot, patch_mask, script_text, scripted_suffix, warm_start, Script, WarmStartConfig, WarmStartReport,
};

use crate::error::{Error, Result};
use crate::evidence_cache::{refresh_triggered, EvidenceCache};
use crate::grounding::DiscoveryParams;
use crate::numerics::{log_softmax, RngStream, Scalar};
use crate::reward::{grpo_advantages, score_trajectory, ActParams, RewardBreakdown, RewardWeights};
use crate::rollout::{chosen_snapshot, RolloutParams, RolloutState, Sampler, Trajectory};
use crate::synth_data::Sample;
use crate::toy_vlm::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub prompts_per_batch: usize,
    pub group_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub seed: u64,
    /// Also refresh every sample in the batch every this many updates.
    pub refresh_period: Option<usize>,
    pub rollout: RolloutParams,
    pub weights: RewardWeights,
    pub act: ActParams,
    pub discovery: DiscoveryParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prompts_per_batch: 16,
            group_size: 8,
            steps: 60,
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_eps: 0.2,
            kl_coeff: 0.0,
            seed: 0,
            refresh_period: None,
            rollout: RolloutParams::default(),
            weights: RewardWeights::default(),
            act: ActParams::default(),
            discovery: DiscoveryParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if self.prompts_per_batch < 1 {
            return Err(Error::Config("prompts_per_batch must be >= 1".into()));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(Error::Config(format!("kl_coeff must be >= 0, got {}", self.kl_coeff)));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_eps >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning_rate, clip_eps must be >= 0 and momentum in [0, 1)".into()));
        }
        self.weights.validate()
    }
}

/// `G` rollouts of one prompt. The prompt is encoded once; rollout `g` draws
/// from child stream `g` of `rng`.
pub fn generate_group<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    cache: &EvidenceCache<T>,
    group_size: usize,
    params: &RolloutParams,
    rng: &RngStream,
) -> Result<Vec<Trajectory<T>>> {
    let start = RolloutState::start(model, &sample.sample_id, &sample.image, &sample.question)?;
    let snapshot = chosen_snapshot(cache, &sample.sample_id);
    (0..group_size)
        .into_par_iter()
        .map(|g| {
            let mut r = rng.split_index("rollout", g as u64);
            start.clone().run(snapshot, &mut Sampler::Temperature(params.temperature), &mut r, params)
        })
        .collect()
}

/// One prompt's rollouts with their rewards and advantages.
#[derive(Debug, Clone)]
pub struct ScoredGroup<'s, T> {
    pub sample: &'s Sample,
    pub trajectories: Vec<Trajectory<T>>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

pub fn score_group<'s, T: Scalar>(
    model: &Model<T>,
    sample: &'s Sample,
    trajectories: Vec<Trajectory<T>>,
    weights: &RewardWeights,
    act: &ActParams,
) -> Result<ScoredGroup<'s, T>> {
    let rewards: Vec<RewardBreakdown> = trajectories
        .iter()
        .map(|t| score_trajectory(t, model.vocab(), &sample.gold_answer, weights, act))
        .collect();
    let advantages = grpo_advantages(&rewards.iter().map(|r| r.total).collect::<Vec<_>>())?;
    Ok(ScoredGroup { sample, trajectories, rewards, advantages })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub tokens: usize,
    pub clipped_tokens: usize,
    pub applied: bool,
}

/// Gradient of the clipped surrogate (plus the KL penalty when a reference
/// model is given and `kl_coeff > 0`), averaged over all trajectories.
pub fn policy_gradient<T: Scalar>(
    model: &Model<T>,
    groups: &[ScoredGroup<'_, T>],
    config: &TrainConfig,
    reference: Option<&Model<T>>,
) -> Result<(Vec<T>, UpdateStats)> {
    let n_traj: usize = groups.iter().map(|g| g.trajectories.len()).sum();
    let use_kl = config.kl_coeff > 0.0 && reference.is_some();
    let per_group: Vec<(Vec<T>, UpdateStats)> = groups
        .par_iter()
        .map(|g| group_gradient(model, g, config, if use_kl { reference } else { None }, n_traj))
        .collect::<Result<_>>()?;
    let mut grads = vec![T::zero(); model.n_params()];
    let mut stats = UpdateStats::default();
    for (g, s) in per_group {
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += *b;
        }
        stats.loss += s.loss;
        stats.tokens += s.tokens;
        stats.clipped_tokens += s.clipped_tokens;
    }
    Ok((grads, stats))
}

fn group_gradient<T: Scalar>(
    model: &Model<T>,
    group: &ScoredGroup<'_, T>,
    config: &TrainConfig,
    reference: Option<&Model<T>>,
    n_traj: usize,
) -> Result<(Vec<T>, UpdateStats)> {
    let mut grads = vec![T::zero(); model.n_params()];
    let mut stats = UpdateStats::default();
    let active: Vec<usize> = (0..group.trajectories.len())
        .filter(|&i| group.advantages[i] != 0.0 || reference.is_some())
        .filter(|&i| group.trajectories[i].generated_len() > 0)
        .collect();
    if active.is_empty() {
        return Ok((grads, stats));
    }
    let prompt_ids = &group.trajectories[0].prompt_ids;
    let mut replay = Replay::new(model, &group.sample.image, prompt_ids)?;
    let ref_replay = reference.map(|r| Replay::new(r, &group.sample.image, prompt_ids)).transpose()?;
    let (lo, hi) = (1.0 - config.clip_eps, 1.0 + config.clip_eps);
    for i in active {
        let traj = &group.trajectories[i];
        let adv = group.advantages[i];
        let suffix = traj.suffix(model.vocab());
        let ref_logits = match &ref_replay {
            Some(r) => Some(r.target_logits(&suffix)?),
            None => None,
        };
        let n_tok = suffix.targets.len() as f64;
        let weight = 1.0 / (n_tok * n_traj as f64);
        let targets = suffix.targets.clone();
        let mut clipped = 0;
        let loss = replay.accumulate(&suffix, &mut grads, |logits| {
            let mut value = 0.0;
            let mut d = Vec::with_capacity(logits.len());
            for (t, ((_, tok, old_lp), z)) in targets.iter().zip(logits).enumerate() {
                let ls = log_softmax(z, T::one());
                let lp = ls[*tok as usize].to_f64_lossy();
                let ratio = (lp - old_lp).exp();
                let clipped_ratio = ratio.clamp(lo, hi);
                let surrogate = (ratio * adv).min(clipped_ratio * adv);
                value -= surrogate * weight;
                let unclipped_active = ratio * adv <= clipped_ratio * adv;
                if !unclipped_active {
                    clipped += 1;
                }
                // dL/dlp for this token
                let mut g_lp = if unclipped_active { -adv * ratio * weight } else { 0.0 };
                if let Some(rl) = &ref_logits {
                    let ref_lp = log_softmax(&rl[t], T::one())[*tok as usize].to_f64_lossy();
                    let diff = ref_lp - lp;
                    value += config.kl_coeff * (diff.exp() - diff - 1.0) * weight;
                    g_lp += config.kl_coeff * (1.0 - diff.exp()) * weight;
                }
                // dlp/dz = onehot - softmax
                let mut dz: Vec<T> = ls.iter().map(|&l| -l.exp() * T::of(g_lp)).collect();
                dz[*tok as usize] += T::of(g_lp);
                d.push(dz);
            }
            Ok((value, d))
        })?;
        stats.loss += loss;
        stats.tokens += targets.len();
        stats.clipped_tokens += clipped;
    }
    replay.finish(Vec::new(), &mut grads)?;
    Ok((grads, stats))
}

/// One optimizer step on the surrogate. A non-finite gradient skips the step.
pub fn policy_update<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Sgd<T>,
    groups: &[ScoredGroup<'_, T>],
    config: &TrainConfig,
    reference: Option<&Model<T>>,
) -> Result<UpdateStats> {
    let (grads, mut stats) = policy_gradient(model, groups, config, reference)?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        log::warn!("non-finite policy gradient at parameter {i}; update skipped");
        return Ok(stats);
    }
    optimizer.step(&mut model.params, &grads);
    model.version += 1;
    stats.applied = true;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_len: f64,
    pub max_len: usize,
    pub insertion_rate: f64,
    pub refreshes: usize,
    /// Mean negative log-probability of the sampled tokens.
    pub entropy_proxy: f64,
    pub accuracy: f64,
    pub clip_fraction: f64,
    pub update_applied: bool,
    pub model_version: u64,
}

pub const METRICS_HEADER: &str = "step,mean_reward,mean_len,max_len,insertion_rate,refreshes";

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.step, m.mean_reward, m.mean_len, m.max_len, m.insertion_rate, m.refreshes
        ));
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub refreshed: Vec<(usize, String)>,
    pub halted: Option<String>,
}

const MAX_CONSECUTIVE_SKIPS: usize = 3;

/// Indices of `k` distinct samples for one step.
pub fn batch_indices(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Runs `config.steps` updates. `on_step` sees each step's metrics as soon
/// as they are known.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    cache: &mut EvidenceCache<T>,
    config: &TrainConfig,
    reference: Option<&Model<T>>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut optimizer = Sgd::new(model.n_params(), config.learning_rate, config.momentum);
    let root = RngStream::new(config.seed).split("train");
    let mut report = TrainReport::default();
    let mut skips = 0;
    for step in 0..config.steps {
        let batch = batch_indices(samples.len(), config.prompts_per_batch, &mut root.split_index("batch", step as u64));
        let version = model.version;
        let frozen: &Model<T> = model;
        let shared_cache: &EvidenceCache<T> = cache;
        let groups: Vec<ScoredGroup<'_, T>> = batch
            .par_iter()
            .enumerate()
            .map(|(b, &i)| {
                let rng = root.split_index("step", step as u64).split_index("prompt", b as u64);
                let trajs = generate_group(frozen, &samples[i], shared_cache, config.group_size, &config.rollout, &rng)?;
                score_group(frozen, &samples[i], trajs, &config.weights, &config.act)
            })
            .collect::<Result<_>>()?;
        debug_assert!(groups.iter().flat_map(|g| &g.trajectories).all(|t| t.model_version == version));

        let stats = policy_update(model, &mut optimizer, &groups, config, reference)?;
        skips = if stats.applied { 0 } else { skips + 1 };

        let periodic = config.refresh_period.is_some_and(|p| p > 0 && (step + 1) % p == 0);
        let mut refreshes = 0;
        for g in &groups {
            let outcomes = g.trajectories.iter().zip(&g.rewards).map(|(t, r)| (t.insertion_count, r.r_res == 1));
            if periodic || refresh_triggered(outcomes) {
                if cache.lookup(&g.sample.sample_id).is_some() {
                    cache.refresh(g.sample, model, &config.discovery)?;
                } else {
                    let snaps = crate::grounding::discover_evidence(
                        model,
                        &g.sample.image,
                        &crate::rollout::prompt_text(&g.sample.question),
                        &config.discovery,
                    )?;
                    cache.upsert(&g.sample.sample_id, snaps, model.version);
                }
                report.refreshed.push((step, g.sample.sample_id.clone()));
                refreshes += 1;
            }
        }

        let metrics = step_metrics(step, &groups, &stats, refreshes, version);
        log::info!(
            "step {step}: reward {:.3} len {:.1} insert {:.2} acc {:.2}",
            metrics.mean_reward,
            metrics.mean_len,
            metrics.insertion_rate,
            metrics.accuracy
        );
        on_step(&metrics);
        report.metrics.push(metrics);
        if skips >= MAX_CONSECUTIVE_SKIPS {
            report.halted = Some(format!("{skips} consecutive non-finite gradients at step {step}"));
            log::error!("training halted: {}", report.halted.as_deref().unwrap_or_default());
            break;
        }
    }
    Ok(report)
}

fn step_metrics<T: Scalar>(
    step: usize,
    groups: &[ScoredGroup<'_, T>],
    stats: &UpdateStats,
    refreshes: usize,
    version: u64,
) -> StepMetrics {
    let trajs: Vec<&Trajectory<T>> = groups.iter().flat_map(|g| &g.trajectories).collect();
    let rewards: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
    let n = trajs.len().max(1) as f64;
    let lens: Vec<usize> = trajs.iter().map(|t| t.generated_len()).collect();
    let n_tokens: usize = lens.iter().sum();
    let neg_lp: f64 = trajs.iter().flat_map(|t| t.turns.iter().flat_map(|u| &u.logprobs)).map(|lp| -lp).sum();
    StepMetrics {
        step,
        mean_reward: rewards.iter().map(|r| r.total).sum::<f64>() / n,
        mean_len: n_tokens as f64 / n,
        max_len: lens.iter().copied().max().unwrap_or(0),
        insertion_rate: trajs.iter().filter(|t| t.insertion_count > 0).count() as f64 / n,
        refreshes,
        entropy_proxy: if n_tokens > 0 { neg_lp / n_tokens as f64 } else { 0.0 },
        accuracy: rewards.iter().filter(|r| r.r_res == 1).count() as f64 / n,
        clip_fraction: if stats.tokens > 0 { stats.clipped_tokens as f64 / stats.tokens as f64 } else { 0.0 },
        update_applied: stats.applied,
        model_version: version,
    }
}
