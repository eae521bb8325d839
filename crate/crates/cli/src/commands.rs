//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::Datelike;
use nowcast_core::analog::{AnalogArchive, AnalogEntry};
use nowcast_core::archive::{
    enumerate_tuples, load_rgb, preprocess_image, split_by_year, write_manifest, FrameCache, ManifestRow,
};
use nowcast_core::descriptor::{fit_normalizer, DescriptorSource, HourlySeries, WeatherDescriptor};
use nowcast_core::evaluation::{
    aggregate_by_site, assign_items, audit_pairs, read_checklists, read_judgments, read_truth, render_audit,
    render_confusion, sample_realism_set, score_condition_audit, select_realism_pairs, write_study, RealismConfig,
};
use nowcast_core::selftest;
use nowcast_core::synthesis::{export_strip, synthesize_sequence, NowcastRequest};
use nowcast_core::train::{fit, ArchiveDataset, Batch, FitOptions, TrainConfig, TrainState, TrainingMode};
use serde_json::json;

use crate::cli::*;
use crate::data::*;

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

pub fn fit_normalizer_cmd(args: &FitNormalizerArgs) -> Result<()> {
    let years: BTreeSet<i32> = args.years.iter().copied().collect();
    let records: Vec<_> = load_records(&args.nwp, args.site.as_deref())?
        .into_iter()
        .filter(|r| years.contains(&r.timestamp.year()))
        .collect();
    let series = HourlySeries::from_records(&records)?;
    let descriptors: Vec<WeatherDescriptor> = series.descriptors().cloned().collect();
    let id = args.id.clone().unwrap_or_else(|| {
        let ys: Vec<String> = years.iter().map(|y| y.to_string()).collect();
        format!("nwp-{}", ys.join("-"))
    });
    let normalizer = fit_normalizer(&descriptors, id)?;
    normalizer.save(BufWriter::new(File::create(&args.out)?))?;
    println!(
        "fitted `{}` on {} hourly records -> {}",
        normalizer.fitted_on,
        descriptors.len(),
        args.out.display()
    );
    Ok(())
}

pub fn build_dataset_cmd(args: &BuildDatasetArgs) -> Result<()> {
    let src = &args.source;
    let normalizer = load_normalizer(&src.normalizer)?;
    let series = normalized_series(&src.nwp, Some(&src.site), &normalizer)?;
    let index = index_site(&src.archive, &src.site, src.exclusions.as_deref())?;
    let mut stream = enumerate_tuples(&index.frames, &series, args.max_lead, args.lead_step)?;
    let tuples: Vec<_> = stream.by_ref().collect();
    let skipped = stream.skipped();
    let total = tuples.len();
    let train_years: BTreeSet<i32> = args.train_years.iter().copied().collect();
    let test_years: BTreeSet<i32> = args.test_years.iter().copied().collect();
    let (train, test) = split_by_year(tuples, &train_years, &test_years)?;

    std::fs::create_dir_all(&args.out)?;
    write_manifest(File::create(args.out.join("train.csv"))?, train.iter().map(ManifestRow::from))?;
    write_manifest(File::create(args.out.join("test.csv"))?, test.iter().map(ManifestRow::from))?;

    let entries: Vec<AnalogEntry> = index
        .frames
        .iter()
        .filter(|f| train_years.contains(&f.timestamp.year()))
        .filter_map(|f| {
            series.descriptor_at(f.timestamp).map(|d| AnalogEntry {
                frame: f.clone(),
                descriptor: d,
            })
        })
        .collect();
    let analog = AnalogArchive::new(entries, normalizer.fitted_on.clone())?;
    analog.write_csv(BufWriter::new(File::create(args.out.join("analog.csv"))?))?;

    let report = json!({
        "site": src.site,
        "frames": index.frames.len(),
        "gaps": index.gaps,
        "off_grid": index.off_grid,
        "excluded": index.excluded,
        "warnings": index.warnings,
        "tuples": total,
        "tuples_without_descriptor": skipped,
        "train_tuples": train.len(),
        "test_tuples": test.len(),
        "analog_entries": analog.len(),
        "normalizer_id": normalizer.fitted_on,
    });
    write_json(&args.out.join("index.json"), &report)?;
    println!(
        "{} frames, {} gaps, {} tuples ({} train, {} test, {} without descriptor), {} analog entries -> {}",
        index.frames.len(),
        index.gaps.len(),
        total,
        train.len(),
        test.len(),
        skipped,
        analog.len(),
        args.out.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let src = &args.source;
    let normalizer = load_normalizer(&src.normalizer)?;
    let mut state = match &args.resume {
        Some(p) => TrainState::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let mut cfg = load_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(mode) = args.mode {
                cfg.mode = match mode {
                    ModeArg::Adversarial => TrainingMode::Adversarial,
                    ModeArg::L1Baseline => TrainingMode::L1Baseline,
                };
            }
            TrainState::new(cfg, normalizer.fitted_on.clone())?
        }
    };
    if state.normalizer_id != normalizer.fitted_on {
        bail!(
            "checkpoint was trained with normalizer `{}` but `{}` was given",
            state.normalizer_id,
            normalizer.fitted_on
        );
    }
    if let Some(steps) = args.steps {
        state.config.optimizer.steps = steps;
    }
    let series = normalized_series(&src.nwp, Some(&src.site), &normalizer)?;
    let index = index_site(&src.archive, &src.site, src.exclusions.as_deref())?;
    let tuples = tuples_from_manifest(&load_manifest(&args.manifest)?, &index.frames, &series)?;
    if tuples.is_empty() {
        bail!("manifest {} lists no tuples", args.manifest.display());
    }
    let g = &state.config.generator;
    let mut cache = FrameCache::new(index.frames.clone(), g.input_h, g.input_w);
    let probe = Batch::from_tuples(&[cache.materialize(&tuples[0])?], &normalizer.fitted_on)?;
    let mut dataset = ArchiveDataset {
        cache,
        tuples,
        normalizer_id: normalizer.fitted_on.clone(),
    };
    let options = FitOptions {
        run_dir: Some(args.run_dir.clone()),
        probe: Some(probe),
    };
    let start = state.step;
    let history = fit(&mut state, &mut dataset, &options)?;
    if let Some(last) = history.last() {
        println!("trained steps {}..{}; last: {:?}", start + 1, last.step, last.adversarial_components());
    } else {
        println!("nothing to do: already at step {}", state.step);
    }
    Ok(())
}

pub fn nowcast_cmd(args: &NowcastArgs) -> Result<()> {
    let state = TrainState::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let normalizer = load_normalizer(&args.forecast.normalizer)?;
    let series = normalized_series(&args.forecast.nwp, args.forecast.site.as_deref(), &normalizer)?;
    let (w0, forecast) = forecast_steps(&series, args.forecast.t0, &args.forecast.leads)?;
    let g = &state.generator;
    let raw = load_rgb(&args.image)?;
    let i0 = preprocess_image(&raw, g.config.input_h, g.config.input_w)?;
    let mut req = NowcastRequest::new(i0, w0, forecast, args.seed);
    req.sigma = args.sigma;
    req.share_z = !args.per_lead_z;
    let seq = synthesize_sequence(&req, g, &state.normalizer_id, &state.checkpoint_id())?;
    let files = export_strip(&seq, &args.label, args.aspect, &args.out)?;
    for p in &files.frames {
        println!("{}", p.display());
    }
    println!("{}", files.strip.display());
    println!("{}", files.sidecar.display());
    Ok(())
}

pub fn analog_cmd(args: &AnalogArgs) -> Result<()> {
    let archive = AnalogArchive::read_csv(BufReader::new(open(&args.table)?))?;
    let normalizer = load_normalizer(&args.forecast.normalizer)?;
    let series = normalized_series(&args.forecast.nwp, args.forecast.site.as_deref(), &normalizer)?;
    let (_, forecast) = forecast_steps(&series, args.forecast.t0, &args.forecast.leads)?;
    let out = match args.mode {
        AnalogMode::Individual => {
            let matches = forecast
                .iter()
                .map(|f| {
                    let m = archive.retrieve_individual(&f.descriptor)?;
                    Ok(json!({
                        "lead_minutes": f.lead_minutes,
                        "timestamp": m.frame.timestamp,
                        "path": m.frame.path,
                        "distance": m.distance,
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            json!({ "mode": "individual", "matches": matches })
        }
        AnalogMode::Sequence => {
            let leads = &args.forecast.leads;
            let cadence = match args.cadence {
                Some(c) => c,
                None if leads.len() >= 2 => (leads[1] - leads[0]) as i64,
                None => 60,
            };
            if leads.windows(2).any(|w| (w[1] - w[0]) as i64 != cadence) {
                bail!("sequence retrieval needs evenly spaced leads at the {cadence}-minute cadence");
            }
            let descriptors: Vec<WeatherDescriptor> = forecast.iter().map(|f| f.descriptor.clone()).collect();
            let m = archive.retrieve_sequence(&descriptors, cadence)?;
            json!({
                "mode": "sequence",
                "cadence_minutes": cadence,
                "distance": m.distance,
                "frames": m.frames.iter().map(|f| json!({"timestamp": f.timestamp, "path": f.path})).collect::<Vec<_>>(),
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn eval_sample_cmd(args: &EvalSampleArgs) -> Result<()> {
    let src = &args.source;
    let state = TrainState::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let normalizer = load_normalizer(&src.normalizer)?;
    if state.normalizer_id != normalizer.fitted_on {
        bail!(
            "checkpoint expects normalizer `{}` but `{}` was given",
            state.normalizer_id,
            normalizer.fitted_on
        );
    }
    let series = normalized_series(&src.nwp, Some(&src.site), &normalizer)?;
    let index = index_site(&src.archive, &src.site, src.exclusions.as_deref())?;
    let tuples = tuples_from_manifest(&load_manifest(&args.manifest)?, &index.frames, &series)?;
    let cfg = RealismConfig {
        n_pairs: args.pairs,
        seed: args.seed,
        sigma: args.sigma,
        aspect_ratio: args.aspect,
        ..Default::default()
    };
    let pairs = select_realism_pairs(&tuples, &cfg)?;
    let g = &state.generator;
    let mut cache = FrameCache::new(index.frames.clone(), g.config.input_h, g.config.input_w);
    let items = sample_realism_set(&pairs, &mut cache, g, &src.site, &cfg, &args.out)?;
    write_study(&items, &args.out)?;
    if !args.examiners.is_empty() {
        let ids: Vec<String> = items.iter().map(|i| i.item.item_id.clone()).collect();
        let assignments = assign_items(&ids, &args.examiners, args.per_examiner, args.seed)?;
        write_json(&args.out.join("assignments.json"), &assignments)?;
    }
    let mut audit = csv_writer(&args.out.join("audit_pairs.csv"))?;
    writeln!(audit, "pair_id,t0,t,lead_minutes")?;
    for p in audit_pairs(&pairs, args.audit_pairs) {
        writeln!(
            audit,
            "{},{},{},{}",
            p.pair_id,
            p.tuple.t0.to_rfc3339(),
            p.tuple.t.to_rfc3339(),
            p.tuple.lead_minutes
        )?;
    }
    audit.flush()?;
    println!("{} items from {} pairs -> {}", items.len(), pairs.len(), args.out.display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

pub fn eval_report_cmd(args: &EvalReportArgs) -> Result<String> {
    let mut text = String::new();
    let mut doc = serde_json::Map::new();
    match (&args.truth, &args.judgments) {
        (Some(t), Some(j)) => {
            let truth = read_truth(t).with_context(|| format!("reading {}", t.display()))?;
            let judgments = read_judgments(BufReader::new(open(j)?)).with_context(|| format!("reading {}", j.display()))?;
            let by_site = aggregate_by_site(&judgments, &truth)?;
            for (site, report) in &by_site {
                text.push_str(&render_confusion(site, report));
                for w in &report.warnings {
                    text.push_str(&format!("warning: {w}\n"));
                }
                text.push('\n');
            }
            doc.insert("realism".into(), serde_json::to_value(&by_site)?);
        }
        (None, None) => {}
        _ => bail!("--truth and --judgments must be given together"),
    }
    if !args.checklists.is_empty() {
        let mut rows = Vec::new();
        for (site, path) in &args.checklists {
            let lists = read_checklists(BufReader::new(open(path)?)).with_context(|| format!("reading {}", path.display()))?;
            rows.push((site.clone(), score_condition_audit(&lists)?));
        }
        text.push_str(&render_audit(&rows));
        doc.insert("audit".into(), serde_json::to_value(rows.into_iter().collect::<std::collections::BTreeMap<_, _>>())?);
    }
    if doc.is_empty() {
        bail!("nothing to report: give --truth/--judgments and/or --checklists");
    }
    Ok(if args.json {
        serde_json::to_string_pretty(&doc)? + "\n"
    } else {
        text
    })
}

/// Prints one line per check; fails if any check failed.
pub fn selftest_cmd() -> Result<()> {
    let results = selftest::run_all();
    for r in &results {
        println!("{} {:<10} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} self-test check(s) failed");
    }
    Ok(())
}
