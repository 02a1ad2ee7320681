mod common;

use common::small_model;
use sieve_core::evidence_cache::EvidenceCache;
use sieve_core::grounding::DiscoveryParams;
use sieve_core::metrics::{
    evaluate, ihr, k_sweep, layer_sweep, layer_sweep_with, random_patch_box, randomize_cache, BBox, EvalParams,
};
use sieve_core::rollout::RolloutParams;
use sieve_core::synth_data::generate_samples;
use sieve_core::RngStream;

fn b(x0: i64, y0: i64, x1: i64, y1: i64) -> BBox {
    BBox::new(x0, y0, x1, y1).unwrap()
}

fn brute_force(p: &BBox, g: &BBox) -> u8 {
    for y in 0..32 {
        for x in 0..32 {
            let inside = |q: &BBox| q.x_min <= x && x < q.x_max && q.y_min <= y && y < q.y_max;
            if inside(p) && inside(g) {
                return 1;
            }
        }
    }
    0
}

fn random_box(rng: &mut RngStream) -> BBox {
    let x0 = rng.below(31) as i64;
    let y0 = rng.below(31) as i64;
    let x1 = x0 + 1 + rng.below((32 - x0) as usize) as i64;
    let y1 = y0 + 1 + rng.below((32 - y0) as usize) as i64;
    b(x0, y0, x1, y1)
}

#[test]
fn ihr_examples() {
    assert_eq!(ihr(&b(0, 0, 4, 4), &b(0, 0, 4, 4)).unwrap(), 1);
    assert_eq!(ihr(&b(0, 0, 4, 4), &b(4, 0, 8, 4)).unwrap(), 0);
    assert_eq!(ihr(&b(0, 0, 4, 4), &b(3, 3, 8, 8)).unwrap(), 1);
    let bad = BBox { x_min: 3, y_min: 0, x_max: 3, y_max: 5 };
    assert!(ihr(&bad, &b(0, 0, 4, 4)).is_err());
    assert!(BBox::new(5, 5, 4, 9).is_err());
}

#[test]
fn ihr_agrees_with_pixel_membership() {
    let mut rng = RngStream::new(17);
    for _ in 0..1000 {
        let (p, g) = (random_box(&mut rng), random_box(&mut rng));
        let v = ihr(&p, &g).unwrap();
        assert_eq!(v, brute_force(&p, &g), "{p:?} {g:?}");
        assert_eq!(v, ihr(&g, &p).unwrap());
    }
}

#[test]
fn gold_grounding_scores_one_on_every_layer() {
    let samples = generate_samples(6, 2);
    let choices = vec![vec![1], vec![2], vec![1, 2]];
    let rows = layer_sweep_with(&samples, &choices, |s, _| {
        Ok(s.mentioned_objects().iter().map(|g| (g.object.clone(), g.bbox)).collect())
    })
    .unwrap();
    assert_eq!(rows.len(), choices.len());
    for r in rows {
        assert_eq!(r.mean_ihr, 1.0);
        assert!(r.pairs >= samples.len());
    }
}

#[test]
fn layer_sweep_is_reproducible() {
    let model = small_model(4);
    let samples = generate_samples(4, 6);
    let choices = vec![vec![1], vec![2]];
    let a = layer_sweep(&model, &samples, &choices, &DiscoveryParams::default()).unwrap();
    let b = layer_sweep(&model, &samples, &choices, &DiscoveryParams::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.mean_ihr)));
    assert!(layer_sweep(&model, &samples, &[vec![3]], &DiscoveryParams::default()).is_err());
}

#[test]
fn k_sweep_clamps_and_annotates() {
    let model = small_model(4);
    let samples = generate_samples(2, 6);
    let params = EvalParams { rollout: RolloutParams { turn_budget: 8, ..EvalParams::default().rollout }, ..EvalParams::default() };
    let rows = k_sweep(&model, &samples, &[1, 40], &params).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].effective_k, rows[0].clamped), (1, false));
    assert_eq!((rows[1].effective_k, rows[1].clamped), (16, true));
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

#[test]
fn random_boxes_cover_every_placement() {
    let mut rng = RngStream::new(3);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..2000 {
        let p = random_patch_box(3, 2, (8, 8), &mut rng).unwrap();
        assert_eq!((p.rows(), p.cols()), (3, 2));
        assert!(p.within((8, 8)));
        seen.insert((p.row_min, p.col_min));
    }
    assert_eq!(seen.len(), 6 * 7);
    assert!(random_patch_box(9, 1, (8, 8), &mut rng).is_err());
}

#[test]
fn random_evidence_matches_discovered_sizes() {
    let model = small_model(4);
    let samples = generate_samples(5, 8);
    let discovered = EvidenceCache::populate(&samples, &model, &DiscoveryParams::default()).unwrap();
    let a = randomize_cache(&model, &samples, &discovered, 1).unwrap();
    let b = randomize_cache(&model, &samples, &discovered, 1).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    for (d, r) in discovered.entries().zip(a.entries()) {
        assert_eq!(d.snapshots.len(), r.snapshots.len());
        for (x, y) in d.snapshots.iter().zip(&r.snapshots) {
            assert_eq!(x.region.bbox_patches.rows(), y.region.bbox_patches.rows());
            assert_eq!(x.region.bbox_patches.cols(), y.region.bbox_patches.cols());
            assert_eq!(x.n_vectors(), y.n_vectors());
            assert_eq!(x.anchor_token, y.anchor_token);
        }
    }
}

#[test]
fn evaluation_is_reproducible() {
    let model = small_model(4);
    let samples = generate_samples(4, 9);
    let params = EvalParams {
        rollout: RolloutParams { temperature: 1.0, turn_budget: 12, max_turns: 2 },
        seed: 5,
        ..EvalParams::default()
    };
    let a = evaluate(&model, &samples, &params).unwrap();
    let b = evaluate(&model, &samples, &params).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 4);
    assert!((0.0..=1.0).contains(&a.accuracy));
}
