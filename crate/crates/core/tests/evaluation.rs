mod common;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Timelike, Utc};
use common::{descriptor, frame, toy_generator};
use nowcast_core::archive::{enumerate_tuples, FrameCache, ImageTensor, TupleRef};
use nowcast_core::descriptor::{DescriptorSource, WeatherDescriptor};
use nowcast_core::evaluation::{
    aggregate_confusion, assign_items, audit_pairs, read_manifest, read_truth, sample_realism_set, select_realism_pairs,
    write_study, JudgmentRecord, RealismConfig, Study, Truth,
};
use nowcast_core::models::Generator;
use nowcast_core::Error;

struct Normalized;

impl DescriptorSource for Normalized {
    fn descriptor_at(&self, t: DateTime<Utc>) -> Option<WeatherDescriptor> {
        Some(descriptor(t, &[0.2; 27], Some("n")))
    }
}

/// Three days of frames at 10-minute cadence.
fn archive() -> (Vec<nowcast_core::archive::FrameRef>, Vec<TupleRef>) {
    let frames: Vec<_> = (0..3 * 144).map(|i| frame(10 * i)).collect();
    let tuples = enumerate_tuples(&frames, &Normalized, 360, 10).unwrap().collect();
    (frames, tuples)
}

fn config(seed: u64) -> RealismConfig {
    RealismConfig {
        seed,
        ..Default::default()
    }
}

#[test]
fn pairs_respect_window_and_seed() {
    let (_, tuples) = archive();
    let a = select_realism_pairs(&tuples, &config(1)).unwrap();
    assert_eq!(a.len(), 75);
    let starts: BTreeSet<_> = a.iter().map(|p| p.tuple.t0).collect();
    assert_eq!(starts.len(), 75);
    for p in &a {
        assert!((6..14).contains(&p.tuple.t0.hour()) && (6..14).contains(&p.tuple.t.hour()));
        assert!(p.tuple.lead_minutes <= 360 && p.tuple.lead_minutes % 10 == 0);
    }
    assert_eq!(a, select_realism_pairs(&tuples, &config(1)).unwrap());
    assert_ne!(a, select_realism_pairs(&tuples, &config(2)).unwrap());
    assert_eq!(audit_pairs(&a, 45), &a[..45]);
}

#[test]
fn too_few_eligible_starts_is_an_error() {
    let (_, tuples) = archive();
    let cfg = RealismConfig {
        n_pairs: 1000,
        ..config(1)
    };
    assert!(matches!(
        select_realism_pairs(&tuples, &cfg),
        Err(Error::InsufficientPairs { requested: 1000, .. })
    ));
}

#[test]
fn realism_set_has_one_real_and_one_generated_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (frames, tuples) = archive();
    let images = (0..frames.len())
        .map(|i| ImageTensor::filled(4, 8, (i % 7) as f64 / 7.0 - 0.5))
        .collect();
    let mut cache = FrameCache::from_images(frames, images).unwrap();
    let g = Generator::new(toy_generator(), 2).unwrap();
    let cfg = config(3);
    let pairs = select_realism_pairs(&tuples, &cfg).unwrap();
    let items = sample_realism_set(&pairs, &mut cache, &g, "cevio", &cfg, dir.path()).unwrap();
    assert_eq!(items.len(), 150);

    let mut per_pair: BTreeMap<&str, Vec<Truth>> = BTreeMap::new();
    for it in &items {
        per_pair.entry(&it.truth.pair_id).or_default().push(it.truth.truth);
        assert!(dir.path().join(&it.item.image).exists());
        assert!((6..14).contains(&it.truth.timestamp.hour()));
    }
    assert_eq!(per_pair.len(), 75);
    assert!(per_pair.values().all(|v| v.contains(&Truth::Real) && v.contains(&Truth::Generated)));
    // Shuffled: the truth sequence is not the strict real/generated alternation.
    let alternating = items.iter().enumerate().all(|(k, it)| (it.truth.truth == Truth::Real) == (k % 2 == 0));
    assert!(!alternating);
    // Restored display aspect 2:1 at the frame height.
    let img = image::open(dir.path().join(&items[0].item.image)).unwrap();
    assert_eq!((img.width(), img.height()), (8, 4));

    write_study(&items, dir.path()).unwrap();
    let manifest = read_manifest(&dir.path().join("items.json")).unwrap();
    let truth = read_truth(&dir.path().join("truth.json")).unwrap();
    assert_eq!(manifest.len(), 150);
    let public = std::fs::read_to_string(dir.path().join("items.json")).unwrap();
    assert!(!public.contains("generated") && !public.contains("real"));

    // Judging everything "real" gives exactly 50% accuracy.
    let judgments: Vec<_> = truth
        .iter()
        .map(|t| JudgmentRecord {
            item_id: t.item_id.clone(),
            examiner_id: "e".into(),
            judged: Truth::Real,
            decided_at: t.timestamp,
        })
        .collect();
    let report = aggregate_confusion(&judgments, &truth).unwrap();
    assert_eq!(report.matrix.total(), 150);
    assert!((report.accuracy - 0.5).abs() < 1e-12);
}

#[test]
fn study_serves_assigned_items_until_exhausted() {
    let dir = tempfile::tempdir().unwrap();
    let (frames, tuples) = archive();
    let images = vec![ImageTensor::filled(4, 8, 0.0); frames.len()];
    let mut cache = FrameCache::from_images(frames, images).unwrap();
    let g = Generator::new(toy_generator(), 2).unwrap();
    let cfg = RealismConfig {
        n_pairs: 5,
        ..config(4)
    };
    let pairs = select_realism_pairs(&tuples, &cfg).unwrap();
    let items = sample_realism_set(&pairs, &mut cache, &g, "s", &cfg, dir.path()).unwrap();
    let manifest: Vec<_> = items.iter().map(|i| i.item.clone()).collect();
    let truth: Vec<_> = items.iter().map(|i| i.truth.clone()).collect();
    let ids: Vec<String> = manifest.iter().map(|m| m.item_id.clone()).collect();
    let assignments = assign_items(&ids, &["a".into(), "b".into()], 4, 1).unwrap();
    let mut study = Study::new(manifest, truth, Some(assignments.clone()), Vec::new()).unwrap();

    let mut seen = Vec::new();
    while let Some(next) = study.next_item("a") {
        assert_eq!(next.progress.assigned, 4);
        seen.push(next.item_id.clone());
        study
            .record(JudgmentRecord {
                item_id: next.item_id,
                examiner_id: "a".into(),
                judged: Truth::Generated,
                decided_at: common::epoch(),
            })
            .unwrap();
    }
    assert_eq!(seen, assignments["a"]);
    assert_eq!(study.progress("a").judged, 4);
    assert_eq!(study.report().unwrap().matrix.total(), 4);
}
