//! Loading helpers shared by the subcommands.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Duration, Utc};
use nowcast_core::archive::{index_archive, read_exclusions, read_manifest, ArchiveIndex, FrameRef, ManifestRow, TupleRef};
use nowcast_core::descriptor::{read_nwp_csv, DescriptorNormalizer, DescriptorSource, HourlySeries, NwpRecord};
use nowcast_core::synthesis::ForecastStep;
use nowcast_core::descriptor::WeatherDescriptor;

pub fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

pub fn load_normalizer(path: &Path) -> Result<DescriptorNormalizer> {
    DescriptorNormalizer::load(BufReader::new(open(path)?)).with_context(|| format!("reading normalizer {}", path.display()))
}

/// NWP records, optionally restricted to one site.
pub fn load_records(path: &Path, site: Option<&str>) -> Result<Vec<NwpRecord>> {
    let records = read_nwp_csv(BufReader::new(open(path)?)).with_context(|| format!("reading NWP table {}", path.display()))?;
    Ok(match site {
        Some(s) => records.into_iter().filter(|r| r.site_id == s).collect(),
        None => records,
    })
}

/// Hourly descriptors normalized with `normalizer`.
pub fn normalized_series(nwp: &Path, site: Option<&str>, normalizer: &DescriptorNormalizer) -> Result<HourlySeries> {
    let records = load_records(nwp, site)?;
    if records.is_empty() {
        bail!("no NWP records in {} for the requested site", nwp.display());
    }
    Ok(HourlySeries::from_records(&records)?.normalized(normalizer)?)
}

pub fn descriptor_at(series: &HourlySeries, t: DateTime<Utc>) -> Result<WeatherDescriptor> {
    series
        .descriptor_at(t)
        .ok_or_else(|| anyhow!("no NWP forecast covers {}", t.to_rfc3339()))
}

/// `w₀` at `t0` and one forecast step per lead.
pub fn forecast_steps(series: &HourlySeries, t0: DateTime<Utc>, leads: &[u32]) -> Result<(WeatherDescriptor, Vec<ForecastStep>)> {
    let w0 = descriptor_at(series, t0)?;
    let steps = leads
        .iter()
        .map(|&lead| {
            Ok(ForecastStep {
                lead_minutes: lead,
                descriptor: descriptor_at(series, t0 + Duration::minutes(lead as i64))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((w0, steps))
}

pub fn index_site(archive: &Path, site: &str, exclusions: Option<&Path>) -> Result<ArchiveIndex> {
    let excluded = match exclusions {
        Some(p) => read_exclusions(BufReader::new(open(p)?))?,
        None => BTreeSet::new(),
    };
    let index = index_archive(archive, site, &excluded).with_context(|| format!("indexing {}", archive.display()))?;
    if index.frames.is_empty() {
        bail!("no frames for site `{site}` in {}", archive.display());
    }
    Ok(index)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    read_manifest(BufReader::new(open(path)?)).with_context(|| format!("reading manifest {}", path.display()))
}

/// Resolves manifest rows against the indexed frames and descriptors.
pub fn tuples_from_manifest(rows: &[ManifestRow], frames: &[FrameRef], series: &HourlySeries) -> Result<Vec<TupleRef>> {
    let by_time: HashMap<DateTime<Utc>, usize> = frames.iter().enumerate().map(|(i, f)| (f.timestamp, i)).collect();
    rows.iter()
        .map(|r| {
            let frame = |t: DateTime<Utc>| {
                by_time
                    .get(&t)
                    .copied()
                    .ok_or_else(|| anyhow!("manifest frame {} is not in the archive", t.to_rfc3339()))
            };
            Ok(TupleRef {
                frame0: frame(r.t0)?,
                frame_t: frame(r.t)?,
                t0: r.t0,
                t: r.t,
                lead_minutes: r.lead_minutes,
                w0: descriptor_at(series, r.t0)?,
                wt: descriptor_at(series, r.t)?,
            })
        })
        .collect()
}

pub fn parse_time(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("expected an RFC 3339 time: {e}"))
}
