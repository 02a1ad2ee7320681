mod common;

use common::small_model;
use sieve_core::evidence_cache::EvidenceCache;
use sieve_core::grounding::DiscoveryParams;
use sieve_core::numerics::log_softmax;
use sieve_core::rollout::RolloutParams;
use sieve_core::synth_data::{generate_samples, Sample};
use sieve_core::toy_vlm::Model;
use sieve_core::trainer::{
    generate_group, metrics_csv, policy_gradient, policy_update, score_group, train, warm_start, Adam, AdamParams,
    Replay, ScoredGroup, Sgd, TrainConfig, WarmStartConfig, METRICS_HEADER,
};
use sieve_core::RngStream;

fn config() -> TrainConfig {
    TrainConfig {
        prompts_per_batch: 2,
        group_size: 4,
        steps: 2,
        rollout: RolloutParams { max_turns: 2, turn_budget: 6, temperature: 1.0 },
        ..TrainConfig::default()
    }
}

fn group<'s>(model: &Model<f64>, sample: &'s Sample, advantages: &[f64]) -> ScoredGroup<'s, f64> {
    let cfg = config();
    let cache = EvidenceCache::populate(std::slice::from_ref(sample), model, &DiscoveryParams::default()).unwrap();
    let trajs = generate_group(model, sample, &cache, advantages.len(), &cfg.rollout, &RngStream::new(4)).unwrap();
    let mut g = score_group(model, sample, trajs, &cfg.weights, &cfg.act).unwrap();
    g.advantages = advantages.to_vec();
    g
}

fn sequence_logprob(model: &Model<f64>, g: &ScoredGroup<'_, f64>, i: usize) -> f64 {
    let traj = &g.trajectories[i];
    let suffix = traj.suffix(model.vocab());
    let replay = Replay::new(model, &g.sample.image, &traj.prompt_ids).unwrap();
    let logits = replay.target_logits(&suffix).unwrap();
    suffix.targets.iter().zip(&logits).map(|((_, tok, _), z)| log_softmax(z, 1.0)[*tok as usize]).sum()
}

#[test]
fn recorded_logprobs_match_replayed_ones() {
    let model = small_model(1);
    let samples = generate_samples(1, 2);
    let g = group(&model, &samples[0], &[0.0; 4]);
    for (i, t) in g.trajectories.iter().enumerate() {
        let recorded: f64 = t.turns.iter().flat_map(|turn| &turn.logprobs).sum();
        assert!((recorded - sequence_logprob(&model, &g, i)).abs() < 1e-9);
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let model = small_model(1);
    let samples = generate_samples(1, 2);
    let mut reference = model.clone();
    for (i, p) in reference.params.iter_mut().enumerate() {
        *p += 0.01 * ((i % 7) as f64 - 3.0);
    }
    for kl_coeff in [0.0, 0.5] {
        let g = group(&model, &samples[0], &[1.2, -0.4, 0.7, -1.5]);
        let cfg = TrainConfig { kl_coeff, ..config() };
        let (grads, _) = policy_gradient(&model, std::slice::from_ref(&g), &cfg, Some(&reference)).unwrap();
        let loss_at = |params: &[f64]| {
            let mut m = model.clone();
            m.params.copy_from_slice(params);
            policy_gradient(&m, std::slice::from_ref(&g), &cfg, Some(&reference)).unwrap().1.loss
        };
        let mut rng = RngStream::new(31);
        let h = 1e-5;
        for _ in 0..24 {
            let i = rng.below(model.n_params());
            let mut p = model.params.clone();
            p[i] += h;
            let up = loss_at(&p);
            p[i] -= 2.0 * h;
            let down = loss_at(&p);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grads[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "kl {kl_coeff} param {i}: {fd} vs {}", grads[i]);
        }
    }
}

#[test]
fn zero_advantages_leave_weights_alone() {
    let mut model = small_model(1);
    let samples = generate_samples(1, 2);
    let before = model.params.clone();
    let g = group(&model, &samples[0], &[0.0; 4]);
    let cfg = config();
    let (grads, stats) = policy_gradient(&model, std::slice::from_ref(&g), &cfg, None).unwrap();
    assert!(grads.iter().all(|&x| x == 0.0));
    assert_eq!(stats.tokens, 0);
    let mut sgd = Sgd::new(model.n_params(), cfg.learning_rate, cfg.momentum);
    policy_update(&mut model, &mut sgd, std::slice::from_ref(&g), &cfg, None).unwrap();
    assert_eq!(model.params, before);
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let mut model = small_model(1);
    let samples = generate_samples(1, 2);
    let before = model.params.clone();
    let g = group(&model, &samples[0], &[1.0, -1.0, 1.0, -1.0]);
    let mut sgd = Sgd::new(model.n_params(), 0.0, 0.9);
    let stats = policy_update(&mut model, &mut sgd, std::slice::from_ref(&g), &config(), None).unwrap();
    assert!(stats.applied);
    assert_eq!(model.params, before);
    assert_eq!(model.version, 1);
}

#[test]
fn positive_advantage_raises_sequence_probability() {
    let mut model = small_model(1);
    let samples = generate_samples(1, 2);
    let g = group(&model, &samples[0], &[1.0, -1.0, 0.0, 0.0]);
    let (up0, down0) = (sequence_logprob(&model, &g, 0), sequence_logprob(&model, &g, 1));
    let mut sgd = Sgd::new(model.n_params(), 0.05, 0.0);
    policy_update(&mut model, &mut sgd, std::slice::from_ref(&g), &config(), None).unwrap();
    assert!(sequence_logprob(&model, &g, 0) > up0);
    assert!(sequence_logprob(&model, &g, 1) < down0);
}

#[test]
fn zero_steps_change_nothing() {
    let mut model = small_model(1);
    let samples = generate_samples(3, 2);
    let mut cache = EvidenceCache::populate(&samples, &model, &DiscoveryParams::default()).unwrap();
    let before = model.clone();
    let report = train(&mut model, &samples, &mut cache, &TrainConfig { steps: 0, ..config() }, None, |_| {}).unwrap();
    assert!(report.metrics.is_empty());
    assert_eq!(model.params, before.params);
    assert_eq!(metrics_csv(&report.metrics), format!("{METRICS_HEADER}\n"));
}

#[test]
fn training_is_reproducible_and_stamps_versions() {
    let samples = generate_samples(6, 2);
    let run = || {
        let mut model = small_model(1);
        let mut cache = EvidenceCache::populate(&samples, &model, &DiscoveryParams::default()).unwrap();
        let report = train(&mut model, &samples, &mut cache, &config(), None, |_| {}).unwrap();
        (model, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.params, b.params);
    assert_eq!(metrics_csv(&ra.metrics), metrics_csv(&rb.metrics));
    assert_eq!(ra.metrics.len(), 2);
    assert_eq!(a.version, 2);
    assert_eq!(ra.metrics[0].model_version, 0);
    assert_eq!(ra.metrics[1].model_version, 1);
    let csv = metrics_csv(&ra.metrics);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert!(fields.iter().all(|f| f.parse::<f64>().is_ok()));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut model = small_model(1);
    let samples = generate_samples(2, 2);
    let mut cache = EvidenceCache::new();
    for bad in [
        TrainConfig { group_size: 1, ..config() },
        TrainConfig { kl_coeff: -1.0, ..config() },
        TrainConfig { momentum: 1.0, ..config() },
    ] {
        assert!(train(&mut model, &samples, &mut cache, &bad, None, |_| {}).is_err());
    }
    assert!(train(&mut model, &[], &mut cache, &config(), None, |_| {}).is_err());
}

#[test]
fn sgd_and_adam_follow_their_update_rules() {
    let mut p = vec![1.0f64, -2.0];
    let mut sgd = Sgd::new(2, 0.1, 0.5);
    sgd.step(&mut p, &[1.0, 2.0]);
    sgd.step(&mut p, &[1.0, 2.0]);
    // v = 1, then 1.5; p = 1 - 0.1 - 0.15
    assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] + 2.5).abs() < 1e-12);

    let mut q = vec![0.0f64];
    let mut adam = Adam::new(1, AdamParams { lr: 0.01, ..AdamParams::default() });
    adam.step(&mut q, &[4.0]);
    assert!((q[0] + 0.01).abs() < 1e-8);
}

#[test]
fn warm_start_lowers_the_supervised_loss() {
    let mut model = small_model(3);
    let samples = generate_samples(40, 5);
    let cfg = WarmStartConfig { steps: 80, batch: 8, adam: AdamParams { lr: 1e-2, ..AdamParams::default() }, ..WarmStartConfig::default() };
    let report = warm_start(&mut model, &samples, &cfg, &DiscoveryParams::default(), |_, _, _| {}).unwrap();
    assert_eq!(report.losses.len(), 80);
    let mean = |r: &[(f64, f64)]| r.iter().map(|l| l.0).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&report.losses[..5]), mean(&report.losses[75..]));
    assert!(last < 0.5 * first, "first {first} last {last}");
    assert_eq!(model.version, 80);
}
