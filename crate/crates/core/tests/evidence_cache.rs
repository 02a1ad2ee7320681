mod common;

use common::small_model;
use sieve_core::evidence_cache::{refresh_triggered, sidecar_path, EvidenceCache};
use sieve_core::grounding::{DiscoveryParams, EvidenceSnapshot, PatchBox, Region, SourceSpace};
use sieve_core::synth_data::generate_samples;
use sieve_core::{Error, RngStream, Scalar};

fn random_snapshot<T: Scalar>(rng: &mut RngStream, d: usize) -> EvidenceSnapshot<T> {
    let row_min = rng.below(6);
    let col_min = rng.below(6);
    let b = PatchBox { row_min, col_min, row_max: row_min + rng.below(3), col_max: col_min + rng.below(3) };
    let embeddings = (0..b.patch_count() * d).map(|_| T::of(f64::from((rng.uniform() * 4.0 - 2.0) as f32))).collect();
    EvidenceSnapshot {
        anchor_id: rng.below(40) as u32,
        anchor_token: format!("tok{}", rng.below(9)),
        region: Region { blocks: vec![(row_min / 2, col_min / 2)], block_size: 2, bbox_patches: b, bbox_pixels: b.to_pixels(8) },
        d,
        embeddings,
        source_space: SourceSpace::InputEmbedding,
        model_version: 0,
    }
}

fn random_cache<T: Scalar>(entries: usize, seed: u64) -> EvidenceCache<T> {
    let mut rng = RngStream::new(seed);
    let mut cache = EvidenceCache::new();
    for i in 0..entries {
        let snaps = (0..rng.below(4)).map(|_| random_snapshot(&mut rng, 8)).collect();
        cache.upsert(&format!("sample-{i:05}"), snaps, i as u64 * 3);
    }
    cache
}

fn assert_bitwise_equal<T: Scalar>(a: &EvidenceCache<T>, b: &EvidenceCache<T>) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.entries().zip(b.entries()) {
        assert_eq!(x.sample_id, y.sample_id);
        assert_eq!(x.model_version, y.model_version);
        assert_eq!(x.snapshots.len(), y.snapshots.len());
        for (s, t) in x.snapshots.iter().zip(&y.snapshots) {
            assert_eq!(s.anchor_id, t.anchor_id);
            assert_eq!(s.region.bbox_patches, t.region.bbox_patches);
            assert_eq!(s.embeddings.len(), t.embeddings.len());
            assert!(s.embeddings.iter().zip(&t.embeddings).all(|(p, q)| p.to_f64_lossy().to_bits() == q.to_f64_lossy().to_bits()));
        }
    }
}

#[test]
fn hundred_entry_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.svec");
    let cache: EvidenceCache<f32> = random_cache(100, 1);
    cache.save(&path).unwrap();
    let back = EvidenceCache::<f32>::load(&path).unwrap();
    assert_bitwise_equal(&cache, &back);
    assert_eq!(back.to_bytes().unwrap(), cache.to_bytes().unwrap());
    let first = back.entries().find(|e| !e.snapshots.is_empty()).unwrap();
    let orig = cache.lookup(&first.sample_id).unwrap();
    assert_eq!(first.snapshots[0].anchor_token, orig.snapshots[0].anchor_token);
    assert_eq!(first.snapshots[0].region, orig.snapshots[0].region);
}

#[test]
fn f32_representable_doubles_survive_exactly() {
    let cache: EvidenceCache<f64> = random_cache(20, 2);
    let back = EvidenceCache::<f64>::from_bytes(&cache.to_bytes().unwrap()).unwrap();
    assert_bitwise_equal(&cache, &back);
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = random_cache::<f32>(5, 3).to_bytes().unwrap();
    for cut in 0..bytes.len() {
        assert!(EvidenceCache::<f32>::from_bytes(&bytes[..cut]).is_err(), "accepted {cut} of {} bytes", bytes.len());
    }
    let mut extended = bytes.clone();
    extended.push(0);
    assert!(EvidenceCache::<f32>::from_bytes(&extended).is_err());
}

#[test]
fn truncated_file_leaves_no_partial_cache() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.svec");
    let bytes = random_cache::<f32>(10, 4).to_bytes().unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(EvidenceCache::<f32>::load(&path), Err(Error::Format { .. })));
}

#[test]
fn loading_without_a_sidecar_keeps_the_payload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bare.svec");
    let cache: EvidenceCache<f32> = random_cache(10, 5);
    cache.save(&path).unwrap();
    std::fs::remove_file(sidecar_path(&path)).unwrap();
    let back = EvidenceCache::<f32>::load(&path).unwrap();
    assert_bitwise_equal(&cache, &back);
}

#[test]
fn refresh_restamps_and_counts() {
    let mut model = small_model(8);
    let samples = generate_samples(2, 4);
    let params = DiscoveryParams::default();
    let mut cache = EvidenceCache::populate(&samples, &model, &params).unwrap();
    assert_eq!(cache.lookup(&samples[0].sample_id).unwrap().refresh_count, 0);
    model.version = 7;
    cache.refresh(&samples[0], &model, &params).unwrap();
    let e = cache.lookup(&samples[0].sample_id).unwrap();
    assert_eq!((e.refresh_count, e.model_version), (1, 7));
    assert!(e.snapshots.iter().all(|s| s.model_version == 7));
    assert_eq!(cache.lookup(&samples[1].sample_id).unwrap().model_version, 0);

    let other = generate_samples(3, 99);
    assert!(cache.refresh(&other[2], &model, &params).is_err());
}

#[test]
fn refresh_fires_on_wrong_answers_after_insertion() {
    assert!(refresh_triggered([(1, false), (0, true)]));
    assert!(!refresh_triggered([(0, false), (2, true)]));
    assert!(!refresh_triggered(std::iter::empty()));
}
