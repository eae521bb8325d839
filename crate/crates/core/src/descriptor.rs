//! Weather descriptors: cyclic time encodings plus NWP surface fields at the
//! camera site, with normalization, hourly-to-10-minute interpolation and
//! spatial tiling into network input channels.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};

use chrono::{DateTime, Datelike, Duration, DurationRound, NaiveDate, Timelike, Utc};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// NWP output fields, sorted by abbreviation (byte order). Units: ALB_RAD %,
/// radiation fluxes W/m², cloud fractions %, D_TD_2M K, DD_10M deg, DURSUN s,
/// winds m/s, H_SNOW and HPBL m, PS Pa, RELHUM_2M %, temperatures K,
/// precipitation kg/m².
pub const NWP_FIELDS: [&str; 27] = [
    "ALB_RAD",
    "ASOB_S",
    "ASWDIFD_S",
    "ASWDIFU_S",
    "ASWDIR_S",
    "ATHB_S",
    "CLCH",
    "CLCL",
    "CLCM",
    "CLCT",
    "DD_10M",
    "DURSUN",
    "D_TD_2M",
    "FF_10M",
    "GLOB",
    "HPBL",
    "H_SNOW",
    "PS",
    "RELHUM_2M",
    "TD_2M",
    "TOT_PREC",
    "TOT_RAIN",
    "TOT_SNOW",
    "T_2M",
    "U_10M",
    "VMAX_10M",
    "V_10M",
];

/// Number of leading cyclic elements: time-of-day (sin, cos), day-of-year (sin, cos).
pub const CYCLIC_DIM: usize = 4;
pub const DESCRIPTOR_DIM: usize = CYCLIC_DIM + NWP_FIELDS.len();

/// Names of all descriptor elements in canonical order.
pub fn element_names() -> Vec<String> {
    let mut names = vec![
        "tod_sin".to_string(),
        "tod_cos".to_string(),
        "doy_sin".to_string(),
        "doy_cos".to_string(),
    ];
    names.extend(NWP_FIELDS.iter().map(|s| s.to_string()));
    names
}

/// Index of an NWP field within the descriptor vector.
pub fn field_index(abbreviation: &str) -> Option<usize> {
    NWP_FIELDS
        .binary_search(&abbreviation)
        .ok()
        .map(|i| i + CYCLIC_DIM)
}

/// One hourly NWP output row at a camera site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NwpRecord {
    pub timestamp: DateTime<Utc>,
    pub site_id: String,
    pub values: BTreeMap<String, f64>,
}

impl NwpRecord {
    /// Validates completeness: every field present and finite, nothing extra.
    pub fn new(timestamp: DateTime<Utc>, site_id: impl Into<String>, values: BTreeMap<String, f64>) -> Result<Self> {
        for field in NWP_FIELDS {
            match values.get(field) {
                Some(v) if v.is_finite() => {}
                _ => return Err(Error::MissingField(field.to_string())),
            }
        }
        if let Some(extra) = values.keys().find(|k| field_index(k).is_none()) {
            return Err(Error::UnknownField(extra.clone()));
        }
        Ok(Self {
            timestamp,
            site_id: site_id.into(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherDescriptor {
    pub vector: [f64; DESCRIPTOR_DIM],
    pub valid_time: DateTime<Utc>,
    /// Dataset id of the normalizer applied, `None` for raw units.
    #[serde(default)]
    pub normalizer: Option<String>,
}

impl WeatherDescriptor {
    pub fn nwp(&self) -> &[f64] {
        &self.vector[CYCLIC_DIM..]
    }

    pub fn field(&self, abbreviation: &str) -> Option<f64> {
        field_index(abbreviation).map(|i| self.vector[i])
    }

    /// Fails unless this descriptor was normalized with `normalizer_id`.
    pub fn require_normalizer(&self, normalizer_id: &str) -> Result<()> {
        match &self.normalizer {
            Some(id) if id == normalizer_id => Ok(()),
            other => Err(Error::NormalizerMismatch {
                expected: normalizer_id.to_string(),
                found: other.clone().unwrap_or_else(|| "<raw>".to_string()),
            }),
        }
    }
}

fn days_in_year(year: i32) -> u32 {
    NaiveDate::from_ymd_opt(year, 12, 31)
        .expect("valid year")
        .ordinal()
}

/// `(sin, cos)` of time of day and day of year.
pub fn time_encoding(t: DateTime<Utc>) -> [f64; CYCLIC_DIM] {
    let seconds = t.num_seconds_from_midnight() as f64 + t.nanosecond() as f64 * 1e-9;
    let f_t = seconds / 86_400.0;
    let f_d = t.ordinal0() as f64 / days_in_year(t.year()) as f64;
    [
        (TAU * f_t).sin(),
        (TAU * f_t).cos(),
        (TAU * f_d).sin(),
        (TAU * f_d).cos(),
    ]
}

/// Nearest full hour, halves rounding up.
pub fn round_to_hour(t: DateTime<Utc>) -> DateTime<Utc> {
    (t + Duration::minutes(30))
        .duration_trunc(Duration::hours(1))
        .expect("hour truncation")
}

/// Builds the descriptor for `valid_time` from the NWP record for the
/// corresponding hour.
pub fn build_descriptor(record: &NwpRecord, valid_time: DateTime<Utc>) -> Result<WeatherDescriptor> {
    if record.timestamp != round_to_hour(valid_time) {
        return Err(Error::Alignment {
            record: record.timestamp,
            valid: valid_time,
        });
    }
    let mut vector = [0.0; DESCRIPTOR_DIM];
    vector[..CYCLIC_DIM].copy_from_slice(&time_encoding(valid_time));
    for (i, field) in NWP_FIELDS.iter().enumerate() {
        vector[CYCLIC_DIM + i] = *record
            .values
            .get(*field)
            .ok_or_else(|| Error::MissingField(field.to_string()))?;
    }
    Ok(WeatherDescriptor {
        vector,
        valid_time,
        normalizer: None,
    })
}

/// Linear interpolation of the NWP elements between two hourly descriptors;
/// time encodings are recomputed for `valid_time`.
pub fn interpolate_descriptor(
    before: &WeatherDescriptor,
    after: &WeatherDescriptor,
    valid_time: DateTime<Utc>,
) -> Result<WeatherDescriptor> {
    if valid_time < before.valid_time || valid_time > after.valid_time {
        return Err(Error::OutOfRange {
            time: valid_time,
            start: before.valid_time,
            end: after.valid_time,
        });
    }
    if before.normalizer != after.normalizer {
        return Err(Error::NormalizerMismatch {
            expected: before.normalizer.clone().unwrap_or_else(|| "<raw>".into()),
            found: after.normalizer.clone().unwrap_or_else(|| "<raw>".into()),
        });
    }
    let span = (after.valid_time - before.valid_time).num_milliseconds() as f64;
    let alpha = if span > 0.0 {
        (valid_time - before.valid_time).num_milliseconds() as f64 / span
    } else {
        0.0
    };
    let mut vector = [0.0; DESCRIPTOR_DIM];
    vector[..CYCLIC_DIM].copy_from_slice(&time_encoding(valid_time));
    for i in CYCLIC_DIM..DESCRIPTOR_DIM {
        vector[i] = (1.0 - alpha) * before.vector[i] + alpha * after.vector[i];
    }
    Ok(WeatherDescriptor {
        vector,
        valid_time,
        normalizer: before.normalizer.clone(),
    })
}

/// Per-element standardization fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorNormalizer {
    pub fitted_on: String,
    pub elements: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population mean/std per element; zero-variance elements get std 1 and the
/// cyclic elements pass through as (0, 1).
pub fn fit_normalizer(descriptors: &[WeatherDescriptor], fitted_on: impl Into<String>) -> Result<DescriptorNormalizer> {
    if descriptors.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalizer needs at least 2 descriptors, got {}",
            descriptors.len()
        )));
    }
    if let Some(d) = descriptors.iter().find(|d| d.normalizer.is_some()) {
        return Err(Error::InvalidArgument(format!(
            "descriptor at {} is already normalized",
            d.valid_time
        )));
    }
    let n = descriptors.len() as f64;
    let mut mean = vec![0.0; DESCRIPTOR_DIM];
    let mut std = vec![1.0; DESCRIPTOR_DIM];
    for i in CYCLIC_DIM..DESCRIPTOR_DIM {
        let m = descriptors.iter().map(|d| d.vector[i]).sum::<f64>() / n;
        let var = descriptors
            .iter()
            .map(|d| (d.vector[i] - m).powi(2))
            .sum::<f64>()
            / n;
        mean[i] = m;
        std[i] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    Ok(DescriptorNormalizer {
        fitted_on: fitted_on.into(),
        elements: element_names(),
        mean,
        std,
    })
}

impl DescriptorNormalizer {
    pub fn normalize(&self, w: &WeatherDescriptor) -> Result<WeatherDescriptor> {
        if let Some(id) = &w.normalizer {
            return Err(Error::InvalidArgument(format!("descriptor already normalized with `{id}`")));
        }
        let mut out = w.clone();
        for i in 0..DESCRIPTOR_DIM {
            out.vector[i] = (w.vector[i] - self.mean[i]) / self.std[i];
        }
        out.normalizer = Some(self.fitted_on.clone());
        Ok(out)
    }

    pub fn denormalize(&self, w: &WeatherDescriptor) -> Result<WeatherDescriptor> {
        w.require_normalizer(&self.fitted_on)?;
        let mut out = w.clone();
        for i in 0..DESCRIPTOR_DIM {
            out.vector[i] = w.vector[i] * self.std[i] + self.mean[i];
        }
        out.normalizer = None;
        Ok(out)
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn load<R: Read>(reader: R) -> Result<Self> {
        let n: Self = serde_json::from_reader(reader)?;
        if n.mean.len() != DESCRIPTOR_DIM || n.std.len() != DESCRIPTOR_DIM {
            return Err(Error::Config(format!(
                "normalizer has {} means and {} stds, expected {DESCRIPTOR_DIM}",
                n.mean.len(),
                n.std.len()
            )));
        }
        if n.elements != element_names() {
            return Err(Error::Config("normalizer element order differs from the canonical order".into()));
        }
        if n.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalizer std must be positive".into()));
        }
        Ok(n)
    }
}

/// Repeats each descriptor element over a `height × width` plane.
pub fn tile_to_channels(w: &WeatherDescriptor, height: usize, width: usize) -> Array3<f64> {
    assert!(height > 0 && width > 0, "tile dimensions must be positive");
    Array3::from_shape_fn((height, width, DESCRIPTOR_DIM), |(_, _, k)| w.vector[k])
}

/// Reads NWP rows from CSV with header `timestamp,site_id,<27 fields>`.
pub fn read_nwp_csv<R: Read>(reader: R) -> Result<Vec<NwpRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = col("timestamp").ok_or_else(|| Error::MissingField("timestamp".into()))?;
    let site_col = col("site_id").ok_or_else(|| Error::MissingField("site_id".into()))?;
    let mut field_cols = Vec::with_capacity(NWP_FIELDS.len());
    for field in NWP_FIELDS {
        field_cols.push((field, col(field).ok_or_else(|| Error::MissingField(field.to_string()))?));
    }
    if let Some(extra) = headers
        .iter()
        .find(|h| *h != "timestamp" && *h != "site_id" && field_index(h).is_none())
    {
        return Err(Error::UnknownField(extra.to_string()));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let timestamp = DateTime::parse_from_rfc3339(&row[ts_col])
            .map_err(|e| Error::InvalidArgument(format!("timestamp `{}`: {e}", &row[ts_col])))?
            .with_timezone(&Utc);
        let mut values = BTreeMap::new();
        for (field, idx) in &field_cols {
            let raw = row.get(*idx).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::MissingField(field.to_string()));
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{field} = `{raw}` at {timestamp}")))?;
            values.insert(field.to_string(), v);
        }
        records.push(NwpRecord::new(timestamp, &row[site_col], values)?);
    }
    Ok(records)
}

/// Writes NWP rows in the format accepted by [`read_nwp_csv`].
pub fn write_nwp_csv<W: Write>(writer: W, records: &[NwpRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp", "site_id"];
    header.extend(NWP_FIELDS);
    wtr.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            r.site_id.clone(),
        ];
        row.extend(NWP_FIELDS.iter().map(|f| r.values[*f].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Anything that can produce a descriptor for an arbitrary image time.
pub trait DescriptorSource {
    fn descriptor_at(&self, t: DateTime<Utc>) -> Option<WeatherDescriptor>;
}

/// Hourly descriptors keyed by valid time; sub-hourly times are interpolated
/// between the bracketing hours.
#[derive(Debug, Clone, Default)]
pub struct HourlySeries {
    hours: BTreeMap<DateTime<Utc>, WeatherDescriptor>,
}

impl HourlySeries {
    pub fn from_records(records: &[NwpRecord]) -> Result<Self> {
        let mut hours = BTreeMap::new();
        for r in records {
            let d = build_descriptor(r, r.timestamp)?;
            hours.insert(r.timestamp, d);
        }
        Ok(Self { hours })
    }

    pub fn from_descriptors(descriptors: impl IntoIterator<Item = WeatherDescriptor>) -> Self {
        Self {
            hours: descriptors.into_iter().map(|d| (d.valid_time, d)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &WeatherDescriptor> {
        self.hours.values()
    }

    pub fn normalized(&self, normalizer: &DescriptorNormalizer) -> Result<Self> {
        let hours = self
            .hours
            .iter()
            .map(|(t, d)| Ok((*t, normalizer.normalize(d)?)))
            .collect::<Result<_>>()?;
        Ok(Self { hours })
    }
}

impl DescriptorSource for HourlySeries {
    fn descriptor_at(&self, t: DateTime<Utc>) -> Option<WeatherDescriptor> {
        let floor = t.duration_trunc(Duration::hours(1)).ok()?;
        let before = self.hours.get(&floor)?;
        if floor == t {
            return Some(before.clone());
        }
        let after = self.hours.get(&(floor + Duration::hours(1)))?;
        interpolate_descriptor(before, after, t).ok()
    }
}
