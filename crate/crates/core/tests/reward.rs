mod common;

use common::{ids, small_model};
use proptest::prelude::*;
use sieve_core::reward::{
    grpo_advantages, score_features, score_trajectory, well_formed, ActParams, Features, RewardWeights,
};
use sieve_core::rollout::{RolloutParams, RolloutState, Sampler};
use sieve_core::synth_data::generate_samples;
use sieve_core::RngStream;

/// (well_formed, correct, inserted, long think) → (r_res, r_format, r_emb, r_act, total)
const TABLE: [((bool, bool, bool, bool), (u8, u8, u8, u8, f64)); 16] = [
    ((false, false, false, false), (0, 0, 0, 0, 0.0)),
    ((false, false, false, true), (0, 0, 0, 1, 0.2)),
    ((false, false, true, false), (0, 0, 0, 0, 0.0)),
    ((false, false, true, true), (0, 0, 0, 1, 0.2)),
    ((false, true, false, false), (1, 0, 0, 0, 0.6)),
    ((false, true, false, true), (1, 0, 0, 1, 0.8)),
    ((false, true, true, false), (1, 0, 1, 0, 1.1)),
    ((false, true, true, true), (1, 0, 1, 1, 1.3)),
    ((true, false, false, false), (0, 1, 0, 0, 0.3)),
    ((true, false, false, true), (0, 1, 0, 1, 0.5)),
    ((true, false, true, false), (0, 1, 0, 0, 0.3)),
    ((true, false, true, true), (0, 1, 0, 1, 0.5)),
    ((true, true, false, false), (1, 1, 0, 0, 0.9)),
    ((true, true, false, true), (1, 1, 0, 1, 1.1)),
    ((true, true, true, false), (1, 1, 1, 0, 1.4)),
    ((true, true, true, true), (1, 1, 1, 1, 1.6)),
];

#[test]
fn hand_written_truth_table() {
    let w = RewardWeights::default();
    let sums = w.subset_sums();
    for ((wf, correct, inserted, long), (res, fmt, emb, act, total)) in TABLE {
        let f = Features {
            well_formed: wf,
            correct,
            insertion_count: usize::from(inserted),
            think_tokens: if long { 12 } else { 2 },
            answered: true,
            committed_insertion: inserted,
        };
        let r = score_features(&f, &w, &ActParams::default());
        assert_eq!((r.r_res, r.r_format, r.r_emb, r.r_act), (res, fmt, emb, act), "{f:?}");
        assert!((r.total - total).abs() < 1e-12, "{f:?}: {} vs {total}", r.total);
        assert!(sums.iter().any(|s| (s - r.total).abs() < 1e-12));
    }
}

#[test]
fn embedding_reward_needs_a_committed_insertion() {
    let w = RewardWeights::default();
    let f = Features {
        well_formed: true,
        correct: true,
        insertion_count: 0,
        think_tokens: 10,
        answered: true,
        committed_insertion: true,
    };
    assert_eq!(score_features(&f, &w, &ActParams::default()).r_emb, 0);
}

#[test]
fn scripted_trajectories_score_as_expected() {
    let model = small_model(2);
    let samples = generate_samples(4, 21);
    let s = &samples[0];
    let gold = s.gold_answer.clone();
    let wrong = if gold == "yes" { "no" } else { "yes" };
    let cases = [
        (format!("find the circle and look at its color in the image </think> <answer> {gold} </answer>"), true, 1.1),
        (format!("look at it </think> <answer> {gold} </answer>"), true, 0.9),
        (format!("look at it </think> <answer> {wrong} </answer>"), true, 0.3),
        (format!("<answer> {gold} </answer>"), false, 0.6),
        (format!("look </think> <answer> </answer> {gold}"), false, 0.0),
    ];
    for (text, wf, total) in cases {
        let state = RolloutState::start(&model, &s.sample_id, &s.image, &s.question).unwrap();
        let traj = state
            .run(None, &mut Sampler::scripted(ids(&model, &text)), &mut RngStream::new(0), &RolloutParams::default())
            .unwrap_or_else(|e| panic!("{text}: {e}"));
        assert_eq!(well_formed(&traj, model.vocab()), wf, "{text}");
        let r = score_trajectory(&traj, model.vocab(), &gold, &RewardWeights::default(), &ActParams::default());
        assert!((r.total - total).abs() < 1e-12, "{text}: {}", r.total);
    }
}

#[test]
fn published_advantage_example() {
    let a = grpo_advantages(&[1.6, 0.0]).unwrap();
    let exact = 0.8 / (0.8 + 1e-6);
    assert!((a[0] - exact).abs() < 1e-12 && (a[1] + exact).abs() < 1e-12);
    assert!((a[0] - 1.0).abs() < 2e-6 && (a[1] + 1.0).abs() < 2e-6);
}

proptest! {
    #[test]
    fn advantages_sum_to_zero_and_ignore_shifts(
        picks in prop::collection::vec(0usize..16, 2..16),
        shift in -5.0f64..5.0,
    ) {
        let sums = RewardWeights::default().subset_sums();
        let rewards: Vec<f64> = picks.iter().map(|&i| sums[i]).collect();
        let a = grpo_advantages(&rewards).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = grpo_advantages(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_groups_have_zero_advantage(r in 0.0f64..1.6, n in 2usize..16) {
        prop_assert!(grpo_advantages(&vec![r; n]).unwrap().iter().all(|&a| a == 0.0));
    }
}
