use sieve_core::synth_data::{
    answer_from_manifest, check_sample, generate_dataset, generate_samples, load_dataset, read_manifest, MANIFEST_FILE,
};

#[test]
fn manifest_is_stable_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(25, 7, a.path()).unwrap();
    generate_dataset(25, 7, b.path()).unwrap();
    let ma = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
    let mb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(ma, mb);
    let img = "images/sample-00003.ppm";
    assert_eq!(std::fs::read(a.path().join(img)).unwrap(), std::fs::read(b.path().join(img)).unwrap());
}

#[test]
fn reload_matches_the_generated_samples() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(12, 3, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    let fresh = generate_samples(12, 3);
    assert_eq!(loaded.len(), 12);
    for (l, f) in loaded.iter().zip(&fresh) {
        check_sample(l).unwrap();
        assert_eq!(l.sample_id, f.sample_id);
        assert_eq!(l.question, f.question);
        assert_eq!(l.gold_boxes, f.gold_boxes);
        assert_eq!(l.image, f.image);
    }
}

#[test]
fn single_sample_manifest() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(1, 0, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(generate_dataset(0, 0, dir.path()).is_err());
}

#[test]
fn answers_follow_from_the_manifest_alone() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(200, 11, dir.path()).unwrap();
    for e in read_manifest(dir.path()).unwrap() {
        assert_eq!(answer_from_manifest(&e).as_deref(), Some(e.gold_answer.as_str()), "{}", e.sample_id);
    }
}

#[test]
fn shapes_keep_clear_of_each_other() {
    for s in generate_samples(300, 5) {
        for (i, a) in s.gold_boxes.iter().enumerate() {
            assert!(a.bbox.x_min >= 2 && a.bbox.y_min >= 2 && a.bbox.x_max <= 62 && a.bbox.y_max <= 62);
            for b in &s.gold_boxes[i + 1..] {
                assert_ne!(a.object, b.object);
                assert_eq!(a.bbox.intersection_area(&b.bbox), 0);
            }
        }
    }
}
