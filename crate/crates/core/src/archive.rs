//! Camera image archive: indexing, preprocessing to the training resolution
//! and enumeration of `(I₀, w₀, Iₜ, wₜ)` tuples.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, Timelike, Utc};
use image::RgbImage;
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::descriptor::{DescriptorSource, WeatherDescriptor};
use crate::error::{Error, Result};

pub const TRAIN_HEIGHT: usize = 64;
pub const TRAIN_WIDTH: usize = 128;
pub const CADENCE_MINUTES: i64 = 10;
pub const MAX_LEAD_MINUTES: u32 = 360;

/// `height × width × 3` RGB intensities in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", data.dim().2)));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("intensity {v} outside [-1, 1]")));
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(Array3::from_elem((height, width, 3), value)).expect("value in range")
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// `1 × 3 × H × W` view for the networks.
    pub fn to_nchw(&self) -> Array4<f64> {
        self.data
            .view()
            .permuted_axes([2, 0, 1])
            .insert_axis(Axis(0))
            .as_standard_layout()
            .into_owned()
    }

    /// Inverse of [`to_nchw`](Self::to_nchw) for one batch element; values
    /// are clamped to `[-1, 1]`.
    pub fn from_nchw(batch: &Array4<f64>, index: usize) -> Self {
        let img = batch
            .index_axis(Axis(0), index)
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .mapv(|v| v.clamp(-1.0, 1.0));
        Self { data: img }
    }

    /// `[0, 255] → [-1, 1]`, no resizing.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0
        });
        Self { data }
    }

    /// `[-1, 1] → [0, 255]`, rounding halves up.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w, _) = self.data.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| to_u8(self.data[[y as usize, x as usize, c]]);
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.data.dim(), other.data.dim(), "image shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// Intensity mapping `[-1, 1] → [0, 255]` with round-half-up.
pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5 + 0.5).floor().min(255.0) as u8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub site_id: String,
    pub timestamp: DateTime<Utc>,
    pub path: PathBuf,
}

/// A run of missing grid slots between two indexed frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub first_missing: DateTime<Utc>,
    pub last_missing: DateTime<Utc>,
    pub missing_frames: i64,
}

#[derive(Debug, Clone, Default)]
pub struct ArchiveIndex {
    pub frames: Vec<FrameRef>,
    pub gaps: Vec<Gap>,
    pub off_grid: Vec<PathBuf>,
    pub excluded: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

const FILENAME_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%SZ",
    "%Y-%m-%dT%H-%M-%SZ",
    "%Y%m%dT%H%M%SZ",
    "%Y%m%dT%H%MZ",
];

/// Timestamp format used when this crate writes frame files.
pub const FILENAME_TIME_FORMAT: &str = "%Y%m%dT%H%MZ";

/// Parses `<site>_<timestamp>.<ext>`.
pub fn parse_frame_name(name: &str) -> Option<(String, DateTime<Utc>)> {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let (site, stamp) = stem.rsplit_once('_')?;
    if let Ok(t) = DateTime::parse_from_rfc3339(stamp) {
        return Some((site.to_string(), t.with_timezone(&Utc)));
    }
    FILENAME_FORMATS.iter().find_map(|fmt| {
        NaiveDateTime::parse_from_str(stamp, fmt)
            .ok()
            .map(|n| (site.to_string(), n.and_utc()))
    })
}

pub fn frame_file_name(site: &str, t: DateTime<Utc>, ext: &str) -> String {
    format!("{site}_{}.{ext}", t.format(FILENAME_TIME_FORMAT))
}

fn on_grid(t: DateTime<Utc>) -> bool {
    t.second() == 0 && t.nanosecond() == 0 && t.minute() % CADENCE_MINUTES as u32 == 0
}

/// Reads an exclusion list: one RFC 3339 timestamp per line, `#` comments.
pub fn read_exclusions<R: BufRead>(reader: R) -> Result<BTreeSet<DateTime<Utc>>> {
    let mut out = BTreeSet::new();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t = DateTime::parse_from_rfc3339(line)
            .map_err(|e| Error::InvalidArgument(format!("exclusion `{line}`: {e}")))?;
        out.insert(t.with_timezone(&Utc));
    }
    Ok(out)
}

fn is_image_ext(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Lists the frames of one site, sorted by time.
pub fn index_archive(root: &Path, site_id: &str, exclusions: &BTreeSet<DateTime<Utc>>) -> Result<ArchiveIndex> {
    let mut index = ArchiveIndex::default();
    let mut frames: Vec<FrameRef> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                log::warn!("skipping unreadable entry in {}: {e}", root.display());
                index.warnings.push(e.to_string());
                continue;
            }
        };
        let path = entry.path();
        if !is_image_ext(&path) {
            continue;
        }
        let readable = entry.metadata().map(|m| m.is_file()).unwrap_or(false);
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            index.warnings.push(format!("non UTF-8 file name {}", path.display()));
            continue;
        };
        let Some((site, timestamp)) = parse_frame_name(name) else {
            continue;
        };
        if site != site_id {
            continue;
        }
        if !readable {
            log::warn!("skipping unreadable file {}", path.display());
            index.warnings.push(format!("unreadable {}", path.display()));
            continue;
        }
        if !on_grid(timestamp) {
            index.off_grid.push(path);
            continue;
        }
        if exclusions.contains(&timestamp) {
            index.excluded.push(path);
            continue;
        }
        frames.push(FrameRef {
            site_id: site,
            timestamp,
            path,
        });
    }
    frames.sort_by_key(|f| f.timestamp);
    if let Some(w) = frames.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
        return Err(Error::DuplicateTimestamp {
            site: site_id.to_string(),
            timestamp: w[0].timestamp,
        });
    }
    let step = Duration::minutes(CADENCE_MINUTES);
    for w in frames.windows(2) {
        let missing = (w[1].timestamp - w[0].timestamp).num_minutes() / CADENCE_MINUTES - 1;
        if missing > 0 {
            index.gaps.push(Gap {
                first_missing: w[0].timestamp + step,
                last_missing: w[1].timestamp - step,
                missing_frames: missing,
            });
        }
    }
    index.off_grid.sort();
    index.frames = frames;
    Ok(index)
}

/// Weights for area resampling `input → output` along one axis.
fn area_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let start = o as f64 * scale;
            let end = (o + 1) as f64 * scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(input);
            (first..last)
                .filter_map(|i| {
                    let overlap = (end.min((i + 1) as f64) - start.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area (box) downsampling to `target_h × target_w` followed by the linear
/// map `[0, 255] → [-1, 1]`.
pub fn preprocess_image(raw: &RgbImage, target_h: usize, target_w: usize) -> Result<ImageTensor> {
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    if h < target_h || w < target_w || target_h == 0 || target_w == 0 {
        return Err(Error::Shape(format!(
            "image {w}×{h} is smaller than the target {target_w}×{target_h}"
        )));
    }
    let wx = area_weights(w, target_w);
    let wy = area_weights(h, target_h);
    let mut horizontal = Array3::<f64>::zeros((h, target_w, 3));
    for y in 0..h {
        for (ox, weights) in wx.iter().enumerate() {
            for c in 0..3 {
                horizontal[[y, ox, c]] = weights
                    .iter()
                    .map(|&(x, wgt)| raw.get_pixel(x as u32, y as u32)[c] as f64 * wgt)
                    .sum();
            }
        }
    }
    let mut out = Array3::<f64>::zeros((target_h, target_w, 3));
    for (oy, weights) in wy.iter().enumerate() {
        for ox in 0..target_w {
            for c in 0..3 {
                let v: f64 = weights.iter().map(|&(y, wgt)| horizontal[[y, ox, c]] * wgt).sum();
                out[[oy, ox, c]] = (v / 127.5 - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    ImageTensor::new(out)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path)?;
    decode_rgb(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One enumerated pair of frames with attached descriptors; images are
/// referenced by index into the frame list.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleRef {
    pub frame0: usize,
    pub frame_t: usize,
    pub t0: DateTime<Utc>,
    pub t: DateTime<Utc>,
    pub lead_minutes: u32,
    pub w0: WeatherDescriptor,
    pub wt: WeatherDescriptor,
}

/// A training/evaluation example with decoded images.
#[derive(Debug, Clone)]
pub struct SampleTuple {
    pub i0: Arc<ImageTensor>,
    pub w0: WeatherDescriptor,
    pub it: Arc<ImageTensor>,
    pub wt: WeatherDescriptor,
    pub lead_minutes: u32,
    pub t0: DateTime<Utc>,
    pub t: DateTime<Utc>,
}

/// Lazily yields every `(I₀, Iₜ)` pair with both frames present and lead in
/// `{0, step, …, max_lead}`, ordered by `t₀` then lead.
pub struct TupleStream<'a, S: DescriptorSource> {
    frames: &'a [FrameRef],
    by_time: HashMap<DateTime<Utc>, usize>,
    descriptors: &'a S,
    leads: Vec<u32>,
    frame: usize,
    lead: usize,
    skipped: usize,
}

impl<S: DescriptorSource> TupleStream<'_, S> {
    /// Tuples dropped so far because a descriptor was unavailable.
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<S: DescriptorSource> Iterator for TupleStream<'_, S> {
    type Item = TupleRef;

    fn next(&mut self) -> Option<TupleRef> {
        while self.frame < self.frames.len() {
            if self.lead >= self.leads.len() {
                self.frame += 1;
                self.lead = 0;
                continue;
            }
            let lead = self.leads[self.lead];
            self.lead += 1;
            let t0 = self.frames[self.frame].timestamp;
            let t = t0 + Duration::minutes(lead as i64);
            let Some(&j) = self.by_time.get(&t) else {
                continue;
            };
            match (self.descriptors.descriptor_at(t0), self.descriptors.descriptor_at(t)) {
                (Some(w0), Some(wt)) => {
                    return Some(TupleRef {
                        frame0: self.frame,
                        frame_t: j,
                        t0,
                        t,
                        lead_minutes: lead,
                        w0,
                        wt,
                    })
                }
                _ => {
                    self.skipped += 1;
                    if self.skipped == 1 {
                        log::warn!("no descriptor coverage for tuple {t0} -> {t}; skipping");
                    }
                }
            }
        }
        None
    }
}

pub fn enumerate_tuples<'a, S: DescriptorSource>(
    frames: &'a [FrameRef],
    descriptors: &'a S,
    max_lead_minutes: u32,
    step_minutes: u32,
) -> Result<TupleStream<'a, S>> {
    if step_minutes == 0 {
        return Err(Error::InvalidArgument("lead step must be positive".into()));
    }
    if frames.windows(2).any(|w| w[0].timestamp >= w[1].timestamp) {
        return Err(Error::InvalidArgument("frames must be strictly time-ordered".into()));
    }
    Ok(TupleStream {
        frames,
        by_time: frames.iter().enumerate().map(|(i, f)| (f.timestamp, i)).collect(),
        descriptors,
        leads: (0..=max_lead_minutes).step_by(step_minutes as usize).collect(),
        frame: 0,
        lead: 0,
        skipped: 0,
    })
}

/// Assigns tuples by the year of `t₀`; tuples straddling a year boundary or
/// falling in neither set are dropped.
pub fn split_by_year<I>(tuples: I, train_years: &BTreeSet<i32>, test_years: &BTreeSet<i32>) -> Result<(Vec<TupleRef>, Vec<TupleRef>)>
where
    I: IntoIterator<Item = TupleRef>,
{
    if let Some(y) = train_years.intersection(test_years).next() {
        return Err(Error::InvalidArgument(format!("year {y} is in both splits")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for tuple in tuples {
        let y0 = tuple.t0.year();
        if tuple.t.year() != y0 {
            continue;
        }
        if train_years.contains(&y0) {
            train.push(tuple);
        } else if test_years.contains(&y0) {
            test.push(tuple);
        }
    }
    Ok((train, test))
}

/// Loads and preprocesses frames on demand, keeping decoded tensors.
#[derive(Debug, Default)]
pub struct FrameCache {
    frames: Vec<FrameRef>,
    images: Vec<Option<Arc<ImageTensor>>>,
    target_h: usize,
    target_w: usize,
}

impl FrameCache {
    pub fn new(frames: Vec<FrameRef>, target_h: usize, target_w: usize) -> Self {
        let images = vec![None; frames.len()];
        Self {
            frames,
            images,
            target_h,
            target_w,
        }
    }

    /// A cache whose images are already in memory.
    pub fn from_images(frames: Vec<FrameRef>, images: Vec<ImageTensor>) -> Result<Self> {
        if frames.len() != images.len() {
            return Err(Error::InvalidArgument("frames and images differ in length".into()));
        }
        let (h, w) = images.first().map(|i| (i.height(), i.width())).unwrap_or((TRAIN_HEIGHT, TRAIN_WIDTH));
        Ok(Self {
            frames,
            images: images.into_iter().map(|i| Some(Arc::new(i))).collect(),
            target_h: h,
            target_w: w,
        })
    }

    pub fn frames(&self) -> &[FrameRef] {
        &self.frames
    }

    pub fn image(&mut self, index: usize) -> Result<Arc<ImageTensor>> {
        if let Some(img) = &self.images[index] {
            return Ok(img.clone());
        }
        let raw = load_rgb(&self.frames[index].path)?;
        let img = Arc::new(preprocess_image(&raw, self.target_h, self.target_w)?);
        self.images[index] = Some(img.clone());
        Ok(img)
    }

    pub fn materialize(&mut self, tuple: &TupleRef) -> Result<SampleTuple> {
        Ok(SampleTuple {
            i0: self.image(tuple.frame0)?,
            w0: tuple.w0.clone(),
            it: self.image(tuple.frame_t)?,
            wt: tuple.wt.clone(),
            lead_minutes: tuple.lead_minutes,
            t0: tuple.t0,
            t: tuple.t,
        })
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub t0: DateTime<Utc>,
    pub t: DateTime<Utc>,
    pub lead_minutes: u32,
}

impl From<&TupleRef> for ManifestRow {
    fn from(t: &TupleRef) -> Self {
        Self {
            t0: t.t0,
            t: t.t,
            lead_minutes: t.lead_minutes,
        }
    }
}

pub fn write_manifest<W: Write>(writer: W, rows: impl IntoIterator<Item = ManifestRow>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read>(reader: R) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}
