mod common;

use common::{at_minutes, descriptor, random_batch, toy_generator};
use nowcast_core::archive::ImageTensor;
use nowcast_core::models::Generator;
use nowcast_core::synthesis::{export_strip, synthesize_sequence, ForecastStep, NowcastRequest, Sidecar};
use nowcast_core::Error;

fn request(seed: u64) -> NowcastRequest {
    let i0 = ImageTensor::from_nchw(&random_batch(1, 4, 8, 3).i0, 0);
    let forecast = (0..7)
        .map(|k| ForecastStep {
            lead_minutes: 60 * k,
            descriptor: descriptor(at_minutes(60 * k as i64), &[0.1 * k as f64; 27], Some("n1")),
        })
        .collect();
    NowcastRequest::new(i0, descriptor(at_minutes(0), &[0.0; 27], Some("n1")), forecast, seed)
}

fn generator() -> Generator {
    Generator::new(toy_generator(), 5).unwrap()
}

#[test]
fn hourly_request_yields_seven_frames_with_shared_latent() {
    let seq = synthesize_sequence(&request(1), &generator(), "n1", "ck").unwrap();
    assert_eq!(seq.frames.len(), 7);
    assert_eq!(seq.provenance.leads, vec![0, 60, 120, 180, 240, 300, 360]);
    assert!(seq.latents.windows(2).all(|w| w[0] == w[1]));
    assert!(seq.provenance.lead0_mad.is_some());
    for (_, f) in &seq.frames {
        assert_eq!((f.height(), f.width()), (4, 8));
        assert!(f.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn per_lead_latents_differ() {
    let mut req = request(1);
    req.share_z = false;
    let seq = synthesize_sequence(&req, &generator(), "n1", "ck").unwrap();
    assert!(seq.latents.windows(2).all(|w| w[0] != w[1]));
}

#[test]
fn same_seed_is_reproducible_and_seeds_differ() {
    let g = generator();
    let a = synthesize_sequence(&request(9), &g, "n1", "ck").unwrap();
    let b = synthesize_sequence(&request(9), &g, "n1", "ck").unwrap();
    let c = synthesize_sequence(&request(10), &g, "n1", "ck").unwrap();
    let data = |s: &nowcast_core::synthesis::NowcastSequence| s.frames.iter().map(|(_, f)| f.clone()).collect::<Vec<_>>();
    assert_eq!(data(&a), data(&b));
    assert_ne!(data(&a), data(&c));
}

#[test]
fn normalizer_mismatch_is_refused() {
    assert!(matches!(
        synthesize_sequence(&request(1), &generator(), "n2", "ck"),
        Err(Error::NormalizerMismatch { .. })
    ));
    let mut raw = request(1);
    raw.forecast[3].descriptor.normalizer = None;
    assert!(synthesize_sequence(&raw, &generator(), "n1", "ck").is_err());
}

#[test]
fn invalid_requests_are_refused() {
    let mut r = request(1);
    r.sigma = -0.1;
    assert!(synthesize_sequence(&r, &generator(), "n1", "ck").is_err());
    let mut r = request(1);
    r.forecast.swap(1, 2);
    assert!(synthesize_sequence(&r, &generator(), "n1", "ck").is_err());
    let mut r = request(1);
    r.forecast.clear();
    assert!(synthesize_sequence(&r, &generator(), "n1", "ck").is_err());
}

#[test]
fn export_writes_frames_strip_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synthesize_sequence(&request(4), &generator(), "n1", "abc123").unwrap();
    let files = export_strip(&seq, "cevio", 2.0, dir.path()).unwrap();
    let pngs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    let jsons = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!((pngs, jsons), (8, 1));

    let frame_widths: u32 = files.frames.iter().map(|p| image::open(p).unwrap().width()).sum();
    let strip = image::open(&files.strip).unwrap();
    assert_eq!(strip.width(), frame_widths);
    assert_eq!(strip.height(), 4);
    assert_eq!(image::open(&files.frames[0]).unwrap().width(), 8);

    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(&files.sidecar).unwrap()).unwrap();
    assert_eq!(sidecar.provenance.seed, 4);
    assert_eq!(sidecar.provenance.checkpoint_id, "abc123");
    assert_eq!(sidecar.provenance.normalizer_id, "n1");
    assert_eq!(sidecar.frames.len(), 7);
    assert!(files.strip.file_name().unwrap().to_string_lossy().starts_with("cevio_20190601T0000Z"));
}
