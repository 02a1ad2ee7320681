//! Four-part trajectory reward and group-relative advantages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::rollout::{Action, TerminatedBy, Trajectory};
use crate::toy_vlm::{TokenId, Vocab, ANSWER_CLOSE, ANSWER_OPEN, INSERT_EVIDENCE, THINK_CLOSE, THINK_OPEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub result: f64,
    pub format: f64,
    pub embedding: f64,
    pub action: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { result: 0.6, format: 0.3, embedding: 0.5, action: 0.2 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.result, self.format, self.embedding, self.action];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("reward weights must be finite and >= 0, got {all:?}")))
        }
    }

    /// The 16 totals reachable with binary components, ascending.
    pub fn subset_sums(&self) -> Vec<f64> {
        let w = [self.result, self.format, self.embedding, self.action];
        let mut sums: Vec<f64> = (0..16u32)
            .map(|mask| (0..4).filter(|b| mask & (1 << b) != 0).map(|b| w[b]).sum())
            .collect();
        sums.sort_by(f64::total_cmp);
        sums
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    And,
    Or,
}

/// Settings of the reasoning-length component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActParams {
    pub enabled: bool,
    pub min_think: usize,
    pub combine: Combine,
}

impl Default for ActParams {
    fn default() -> Self {
        Self { enabled: true, min_think: 8, combine: Combine::And }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_res: u8,
    pub r_format: u8,
    pub r_emb: u8,
    pub r_act: u8,
    pub total: f64,
}

/// The facts about a trajectory that the reward depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Features {
    pub well_formed: bool,
    pub correct: bool,
    pub insertion_count: usize,
    pub think_tokens: usize,
    pub answered: bool,
    pub committed_insertion: bool,
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn score_features(f: &Features, weights: &RewardWeights, act: &ActParams) -> RewardBreakdown {
    let r_res = u8::from(f.correct);
    let r_format = u8::from(f.well_formed);
    let r_emb = u8::from(f.correct && f.insertion_count >= 1);
    let long_enough = f.think_tokens >= act.min_think;
    let committed = f.answered || f.committed_insertion;
    let r_act = u8::from(
        act.enabled
            && match act.combine {
                Combine::And => long_enough && committed,
                Combine::Or => long_enough || committed,
            },
    );
    let total = weights.result * f64::from(r_res)
        + weights.format * f64::from(r_format)
        + weights.embedding * f64::from(r_emb)
        + weights.action * f64::from(r_act);
    RewardBreakdown { r_res, r_format, r_emb, r_act, total }
}

pub fn features<T: Scalar>(traj: &Trajectory<T>, vocab: &Vocab, gold_answer: &str) -> Features {
    let answered = traj.terminated_by == TerminatedBy::Answer;
    Features {
        well_formed: well_formed(traj, vocab),
        correct: answered
            && traj.final_answer.as_deref().is_some_and(|a| normalize_answer(a) == normalize_answer(gold_answer)),
        insertion_count: traj.insertion_count,
        think_tokens: traj.think_token_count,
        answered,
        committed_insertion: traj.turns.iter().any(|t| t.action == Action::InsertEvidence),
    }
}

pub fn score_trajectory<T: Scalar>(
    traj: &Trajectory<T>,
    vocab: &Vocab,
    gold_answer: &str,
    weights: &RewardWeights,
    act: &ActParams,
) -> RewardBreakdown {
    score_features(&features(traj, vocab, gold_answer), weights, act)
}

/// Every turn is a closed think span; the last one is followed by an answer
/// span and every earlier one by an insertion that actually delivered
/// evidence. The first turn's think span is opened by the prompt.
pub fn well_formed<T: Scalar>(traj: &Trajectory<T>, vocab: &Vocab) -> bool {
    if traj.terminated_by != TerminatedBy::Answer || traj.turns.is_empty() || traj.failed_insertions > 0 {
        return false;
    }
    if traj.prompt_ids.last() != Some(&vocab.expect_id(THINK_OPEN)) {
        return false;
    }
    let last = traj.turns.len() - 1;
    traj.turns.iter().enumerate().all(|(i, turn)| {
        let mut rest: &[TokenId] = &turn.tokens;
        if i > 0 {
            let Some(r) = expect(rest, vocab.expect_id(THINK_OPEN)) else { return false };
            rest = r;
        }
        let Some(r) = words_until(rest, vocab, vocab.expect_id(THINK_CLOSE)) else { return false };
        rest = r;
        if i == last {
            let Some(r) = expect(rest, vocab.expect_id(ANSWER_OPEN)) else { return false };
            words_until(r, vocab, vocab.expect_id(ANSWER_CLOSE)).is_some_and(<[TokenId]>::is_empty)
        } else {
            rest == [vocab.expect_id(INSERT_EVIDENCE)]
                && turn.insertion.as_ref().is_some_and(|ins| !ins.failed && ins.n_vectors > 0)
        }
    })
}

fn expect(tokens: &[TokenId], id: TokenId) -> Option<&[TokenId]> {
    tokens.split_first().filter(|(&first, _)| first == id).map(|(_, rest)| rest)
}

/// At least one non-control token, then `close`; returns what follows.
fn words_until<'a>(tokens: &'a [TokenId], vocab: &Vocab, close: TokenId) -> Option<&'a [TokenId]> {
    let n = tokens.iter().take_while(|&&t| !vocab.is_control(t)).count();
    if n == 0 {
        return None;
    }
    expect(&tokens[n..], close)
}

/// `(r_i - mean) / (population std + 1e-6)`.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!("group needs at least 2 rewards, got {}", rewards.len())));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-6;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(well_formed: bool, correct: bool, insertions: usize, think: usize) -> Features {
        Features {
            well_formed,
            correct,
            insertion_count: insertions,
            think_tokens: think,
            answered: true,
            committed_insertion: insertions > 0,
        }
    }

    #[test]
    fn published_totals() {
        let w = RewardWeights::default();
        let a = ActParams::default();
        assert!((score_features(&feat(true, true, 1, 10), &w, &a).total - 1.6).abs() < 1e-12);
        assert!((score_features(&feat(true, true, 0, 10), &w, &a).total - 1.1).abs() < 1e-12);
        let none = Features { answered: false, ..feat(false, false, 0, 0) };
        assert_eq!(score_features(&none, &w, &a).total, 0.0);
        assert_eq!(score_features(&feat(true, false, 1, 10), &w, &a).r_emb, 0);
    }

    #[test]
    fn act_flags() {
        let w = RewardWeights::default();
        let short = feat(true, true, 1, 3);
        assert_eq!(score_features(&short, &w, &ActParams::default()).r_act, 0);
        let or = ActParams { combine: Combine::Or, ..ActParams::default() };
        assert_eq!(score_features(&short, &w, &or).r_act, 1);
        let off = ActParams { enabled: false, ..ActParams::default() };
        assert_eq!(score_features(&feat(true, true, 1, 30), &w, &off).r_act, 0);
    }

    #[test]
    fn advantage_examples() {
        let a = grpo_advantages(&[1.6, 0.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-5 && (a[1] + 1.0).abs() < 1e-5);
        assert_eq!(grpo_advantages(&[0.9; 8]).unwrap(), vec![0.0; 8]);
        assert!(matches!(grpo_advantages(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn sixteen_subset_sums() {
        let s = RewardWeights::default().subset_sums();
        assert_eq!(s.len(), 16);
        assert_eq!(s[0], 0.0);
        assert!((s[15] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn answer_normalization() {
        assert_eq!(normalize_answer("  Red \t"), "red");
        assert_eq!(normalize_answer("Light   BLUE"), "light blue");
    }
}
