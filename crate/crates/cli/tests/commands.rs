use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{Duration, TimeZone, Utc};
use nowcast_core::descriptor::{write_nwp_csv, NwpRecord, NWP_FIELDS};

fn nowcast<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let o = nowcast(args);
    assert!(
        o.status.success(),
        "nowcast {args:?} failed:\n{}\n{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn owned(args: &[&str]) -> Vec<String> {
    args.iter().map(|a| a.to_string()).collect()
}

fn fixture(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(rel)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn help_and_exit_codes() {
    let o = nowcast(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["build-dataset", "train", "nowcast", "analog", "eval-serve", "eval-report", "selftest"] {
        assert!(stdout(&o).contains(sub), "help lists {sub}");
    }
    assert_eq!(nowcast(&["selftest", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(nowcast(&["frobnicate"]).status.code(), Some(2));
    let missing = nowcast(&["eval-report", "--truth", "/nonexistent/truth.json", "--judgments", "/nonexistent/j.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    assert!(out.lines().count() >= 6);
    assert!(!out.contains("FAIL"));
}

#[test]
fn report_reproduces_fixture_tables() {
    let out = ok(&[
        "eval-report",
        "--truth",
        &fixture("realism/cevio/truth.json"),
        "--judgments",
        &fixture("realism/cevio/judgments.jsonl"),
        "--checklists",
        &format!("Cevio={}", fixture("audit/cevio.csv")),
    ]);
    assert!(out.contains("accuracy 59.3% (89/150)"), "{out}");
    assert!(out.contains("32/45"), "{out}");

    let json = ok(&[
        "eval-report",
        "--json",
        "--truth",
        &fixture("realism/etziken/truth.json"),
        "--judgments",
        &fixture("realism/etziken/judgments.jsonl"),
    ]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let acc = v["realism"]["Etziken"]["accuracy"].as_f64().unwrap();
    assert!((acc - 95.0 / 150.0).abs() < 1e-12);
}

/// Two days (one per year) of 16×32 frames from 06:00 to 14:00 and hourly
/// NWP records covering them.
fn write_site(dir: &Path) -> (PathBuf, PathBuf) {
    let archive = dir.join("frames");
    std::fs::create_dir_all(&archive).unwrap();
    let mut records = Vec::new();
    for year in [2019, 2020] {
        let day = Utc.with_ymd_and_hms(year, 6, 1, 0, 0, 0).unwrap();
        for h in 0..24 {
            let t = day + Duration::hours(h);
            let values: BTreeMap<String, f64> = NWP_FIELDS
                .iter()
                .enumerate()
                .map(|(k, f)| (f.to_string(), (h as f64 * 0.7 + k as f64).sin() * 10.0 + year as f64 - 2019.0))
                .collect();
            records.push(NwpRecord::new(t, "toy", values).unwrap());
        }
        for slot in 0..=48 {
            let t = day + Duration::hours(6) + Duration::minutes(10 * slot);
            let shade = (slot * 5 + (year as i64 - 2019) * 40) as u8;
            let img = image::RgbImage::from_fn(32, 16, |x, y| image::Rgb([shade, (x * 8) as u8, (y * 16) as u8]));
            img.save(archive.join(format!("toy_{}.png", t.format("%Y%m%dT%H%MZ")))).unwrap();
        }
    }
    let nwp = dir.join("nwp.csv");
    write_nwp_csv(std::fs::File::create(&nwp).unwrap(), &records).unwrap();
    (archive, nwp)
}

const TOY_CONFIG: &str = r#"
seed = 5
checkpoint_every = 2

[optimizer]
batch_size = 2
steps = 3

[generator]
stages = 1
base_channels = 4
latent_dim = 4
latent_channels = 2
input_h = 4
input_w = 8

[discriminator]
stages = 1
base_channels = 4
input_h = 4
input_w = 8
"#;

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    let (archive, nwp) = write_site(d);
    let (archive, nwp) = (archive.to_string_lossy().into_owned(), nwp.to_string_lossy().into_owned());

    ok(&["fit-normalizer", "--nwp", &nwp, "--years", "2019", "--id", "toy-2019", "--out", &p("norm.json")]);
    let source = owned(&["--archive", &archive, "--site", "toy", "--nwp", &nwp, "--normalizer", &p("norm.json")]);

    let mut args = owned(&["build-dataset"]);
    args.extend(source.clone());
    args.extend(owned(&["--train-years", "2019", "--test-years", "2020", "--max-lead", "120", "--out", &p("ds")]));
    ok(&args);
    let index: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ds/index.json")).unwrap()).unwrap();
    assert_eq!(index["frames"], 98);
    assert!(index["train_tuples"].as_u64().unwrap() > 0 && index["test_tuples"].as_u64().unwrap() > 0);
    assert_eq!(index["analog_entries"], 49);

    std::fs::write(d.join("train.toml"), TOY_CONFIG).unwrap();
    let mut args = owned(&["train"]);
    args.extend(source.clone());
    args.extend(owned(&["--manifest", &p("ds/train.csv"), "--config", &p("train.toml"), "--run-dir", &p("run")]));
    ok(&args);
    let ckpt = p("run/checkpoint_00000003.ckpt");
    assert!(Path::new(&ckpt).exists());
    assert!(d.join("run/checkpoint_00000002.ckpt").exists());
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["normalizer_id"], "toy-2019");

    // Resume extends the run from the saved step.
    let mut args = owned(&["train"]);
    args.extend(source.clone());
    args.extend(owned(&["--manifest", &p("ds/train.csv"), "--run-dir", &p("run"), "--resume", &ckpt, "--steps", "4"]));
    assert!(ok(&args).contains("steps 4..4"));

    let frame = format!("{archive}/toy_20200601T0800Z.png");
    let run_nowcast = |out: &str| {
        ok(&[
            "nowcast", "--checkpoint", &ckpt, "--image", &frame, "--nwp", &nwp, "--normalizer", &p("norm.json"),
            "--site", "toy", "--t0", "2020-06-01T08:00:00Z", "--seed", "7", "--label", "toy", "--out", &p(out),
        ])
    };
    run_nowcast("a");
    run_nowcast("b");
    let strip = "toy_20200601T0800Z_strip.png";
    let a = std::fs::read(d.join("a").join(strip)).unwrap();
    assert_eq!(a, std::fs::read(d.join("b").join(strip)).unwrap());
    let strip_img = image::load_from_memory(&a).unwrap();
    assert_eq!((strip_img.width(), strip_img.height()), (7 * 8, 4));
    let pngs = std::fs::read_dir(d.join("a")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count();
    assert_eq!(pngs, 8);
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("a/toy_20200601T0800Z.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 7);

    let analog = |mode: &str, leads: &str| {
        ok(&[
            "analog", mode, "--table", &p("ds/analog.csv"), "--nwp", &nwp, "--normalizer", &p("norm.json"), "--site",
            "toy", "--t0", "2020-06-01T08:00:00Z", "--leads", leads,
        ])
    };
    let individual: serde_json::Value = serde_json::from_str(&analog("individual", "0,60,120")).unwrap();
    assert_eq!(individual["matches"].as_array().unwrap().len(), 3);
    let sequence: serde_json::Value = serde_json::from_str(&analog("sequence", "0,10,20")).unwrap();
    assert_eq!(sequence["frames"].as_array().unwrap().len(), 3);

    let mut args = owned(&["eval-sample"]);
    args.extend(source.clone());
    args.extend(owned(&[
        "--checkpoint", &ckpt, "--manifest", &p("ds/test.csv"), "--pairs", "5", "--examiners", "e1,e2",
        "--per-examiner", "4", "--audit-pairs", "3", "--out", &p("study"),
    ]));
    ok(&args);
    let items: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(d.join("study/items.json")).unwrap()).unwrap();
    assert_eq!(items.len(), 10);
    let assignments: BTreeMap<String, Vec<String>> =
        serde_json::from_slice(&std::fs::read(d.join("study/assignments.json")).unwrap()).unwrap();
    assert_eq!(assignments["e1"].len(), 4);
    assert_eq!(std::fs::read_to_string(d.join("study/audit_pairs.csv")).unwrap().lines().count(), 4);
}

#[test]
fn normalizer_mismatch_is_an_operational_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    let (archive, nwp) = write_site(d);
    let (archive, nwp) = (archive.to_string_lossy().into_owned(), nwp.to_string_lossy().into_owned());
    ok(&["fit-normalizer", "--nwp", &nwp, "--years", "2019", "--id", "first", "--out", &p("n1.json")]);
    ok(&["fit-normalizer", "--nwp", &nwp, "--years", "2019", "--id", "second", "--out", &p("n2.json")]);
    let source = |n: &str| vec!["--archive".to_string(), archive.clone(), "--site".into(), "toy".into(), "--nwp".into(), nwp.clone(), "--normalizer".into(), p(n)];
    let mut args: Vec<String> = vec!["build-dataset".into()];
    args.extend(source("n1.json"));
    args.extend(["--train-years", "2019", "--test-years", "2020", "--max-lead", "60", "--out"].map(String::from));
    args.push(p("ds"));
    ok(&args);
    std::fs::write(d.join("train.toml"), TOY_CONFIG.replace("steps = 3", "steps = 1")).unwrap();
    let mut train: Vec<String> = vec!["train".into()];
    train.extend(source("n1.json"));
    train.extend(["--manifest".into(), p("ds/train.csv"), "--config".into(), p("train.toml"), "--run-dir".into(), p("run")]);
    ok(&train);

    let o = nowcast(&[
        "nowcast", "--checkpoint", &p("run/checkpoint_00000001.ckpt"), "--image", &format!("{archive}/toy_20200601T0800Z.png"),
        "--nwp", &nwp, "--normalizer", &p("n2.json"), "--t0", "2020-06-01T08:00:00Z", "--out", &p("out"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("normalized with"));
}
